//! Problem data for flexible job-shop scheduling with transport, the random
//! instance generator and the JSON instance file format.

use std::fs;
use std::path::Path;

use num_rational::Ratio;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Stream};

/// Integer time unit used for processing and travel times.
pub type Time = i64;

/// Exact rational time, used wherever averages of integer times appear.
pub type ExactTime = Ratio<i128>;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("n, m and v must be at least 1 (got n={n}, m={m}, v={v})")]
    EmptyDimension { n: usize, m: usize, v: usize },
    #[error("invalid instance: {0}")]
    Invariant(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One operation: the machines able to process it (0-based) with their times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    options: Vec<(usize, Time)>,
}

impl Operation {
    pub fn new(mut options: Vec<(usize, Time)>) -> Self {
        options.sort_unstable();
        Self { options }
    }

    /// `(machine, processing time)` pairs in increasing machine order.
    pub fn options(&self) -> &[(usize, Time)] {
        &self.options
    }

    pub fn processing_time(&self, machine: usize) -> Option<Time> {
        self.options
            .binary_search_by_key(&machine, |&(k, _)| k)
            .ok()
            .map(|pos| self.options[pos].1)
    }

    pub fn is_compatible(&self, machine: usize) -> bool {
        self.processing_time(machine).is_some()
    }

    pub fn mean_processing_time(&self) -> ExactTime {
        let total: i128 = self.options.iter().map(|&(_, t)| t as i128).sum();
        Ratio::new(total, self.options.len() as i128)
    }

    pub fn min_processing_time(&self) -> Time {
        self.options.iter().map(|&(_, t)| t).min().unwrap_or(0)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    name: String,
    n: usize,
    m: usize,
    v: usize,
    /// Operations as lists of `[machine, time]` pairs, machines 1-based.
    jobs: Vec<Vec<Vec<(usize, Time)>>>,
    travel: Vec<Vec<Time>>,
}

/// Immutable FJSPT instance.
///
/// Machines are indexed `0..m` in code. Location index 0 of the travel matrix
/// is the load/unload depot and machine `k` sits at location `k + 1`. Raw
/// products and idle vehicles start at the depot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    name: String,
    num_machines: usize,
    num_vehicles: usize,
    jobs: Vec<Vec<Operation>>,
    travel: Vec<Vec<Time>>,
    offsets: Vec<usize>,
}

impl Instance {
    pub fn new(
        name: impl Into<String>,
        num_machines: usize,
        num_vehicles: usize,
        jobs: Vec<Vec<Operation>>,
        travel: Vec<Vec<Time>>,
    ) -> Result<Self, InstanceError> {
        let mut offsets = Vec::with_capacity(jobs.len() + 1);
        let mut acc = 0;
        for job in &jobs {
            offsets.push(acc);
            acc += job.len();
        }
        offsets.push(acc);
        let inst = Self {
            name: name.into(),
            num_machines,
            num_vehicles,
            jobs,
            travel,
            offsets,
        };
        inst.validate()?;
        Ok(inst)
    }

    fn validate(&self) -> Result<(), InstanceError> {
        let (n, m, v) = (self.num_jobs(), self.num_machines, self.num_vehicles);
        if n == 0 || m == 0 || v == 0 {
            return Err(InstanceError::EmptyDimension { n, m, v });
        }
        let bad = |msg: String| Err(InstanceError::Invariant(msg));
        for (i, job) in self.jobs.iter().enumerate() {
            if job.is_empty() {
                return bad(format!("job {} has no operations", i + 1));
            }
            for (j, op) in job.iter().enumerate() {
                if op.options.is_empty() {
                    return bad(format!(
                        "operation O{},{} has an empty compatible-machine set",
                        i + 1,
                        j + 1
                    ));
                }
                for w in op.options.windows(2) {
                    if w[0].0 == w[1].0 {
                        return bad(format!(
                            "operation O{},{} lists machine {} twice",
                            i + 1,
                            j + 1,
                            w[0].0
                        ));
                    }
                }
                for &(k, t) in &op.options {
                    if k >= m {
                        return bad(format!(
                            "operation O{},{} references machine {} outside 1..={m}",
                            i + 1,
                            j + 1,
                            k + 1
                        ));
                    }
                    if t <= 0 {
                        return bad(format!(
                            "operation O{},{} has non-positive processing time {t} on machine {k}",
                            i + 1,
                            j + 1
                        ));
                    }
                }
            }
        }
        if self.travel.len() != m + 1 || self.travel.iter().any(|row| row.len() != m + 1) {
            return bad(format!("travel matrix must be {}x{}", m + 1, m + 1));
        }
        for a in 0..=m {
            if self.travel[a][a] != 0 {
                return bad(format!("travel[{a}][{a}] must be 0"));
            }
            for b in 0..=m {
                if self.travel[a][b] < 0 {
                    return bad(format!("travel[{a}][{b}] is negative"));
                }
                if self.travel[a][b] != self.travel[b][a] {
                    return bad(format!("travel matrix is not symmetric at ({a}, {b})"));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn num_machines(&self) -> usize {
        self.num_machines
    }

    pub fn num_vehicles(&self) -> usize {
        self.num_vehicles
    }

    pub fn num_operations(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn jobs(&self) -> &[Vec<Operation>] {
        &self.jobs
    }

    pub fn job_len(&self, job: usize) -> usize {
        self.jobs[job].len()
    }

    pub fn operation(&self, job: usize, op: usize) -> &Operation {
        &self.jobs[job][op]
    }

    /// Flat index of operation `op` of `job`, ordered job-major.
    pub fn op_index(&self, job: usize, op: usize) -> usize {
        self.offsets[job] + op
    }

    /// Inverse of [`Instance::op_index`].
    pub fn op_at(&self, flat: usize) -> (usize, usize) {
        let job = self.offsets.partition_point(|&o| o <= flat) - 1;
        (job, flat - self.offsets[job])
    }

    /// Travel time between two locations (0 = depot, `k + 1` = machine `k`).
    pub fn travel(&self, from: usize, to: usize) -> Time {
        self.travel[from][to]
    }

    pub fn travel_matrix(&self) -> &[Vec<Time>] {
        &self.travel
    }

    /// Largest processing or travel time; the feature normalisation constant.
    pub fn time_scale(&self) -> Time {
        let p = self
            .jobs
            .iter()
            .flatten()
            .flat_map(|op| op.options.iter().map(|&(_, t)| t))
            .max()
            .unwrap_or(1);
        let t = self.travel.iter().flatten().copied().max().unwrap_or(0);
        p.max(t).max(1)
    }

    pub fn size_label(&self) -> String {
        format!(
            "{}x{}x{}",
            self.num_jobs(),
            self.num_machines,
            self.num_vehicles
        )
    }

    pub fn to_json(&self) -> String {
        let file = InstanceFile {
            name: self.name.clone(),
            n: self.num_jobs(),
            m: self.num_machines,
            v: self.num_vehicles,
            jobs: self
                .jobs
                .iter()
                .map(|job| {
                    job.iter()
                        .map(|op| op.options.iter().map(|&(k, t)| (k + 1, t)).collect())
                        .collect()
                })
                .collect(),
            travel: self.travel.clone(),
        };
        serde_json::to_string_pretty(&file).expect("instance serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, InstanceError> {
        let file: InstanceFile =
            serde_json::from_str(text).map_err(|e| InstanceError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        if file.jobs.len() != file.n {
            return Err(InstanceError::Invariant(format!(
                "n = {} but {} jobs are listed",
                file.n,
                file.jobs.len()
            )));
        }
        let mut jobs = Vec::with_capacity(file.jobs.len());
        for (i, job) in file.jobs.into_iter().enumerate() {
            let mut ops = Vec::with_capacity(job.len());
            for (j, pairs) in job.into_iter().enumerate() {
                if let Some(&(k, _)) = pairs.iter().find(|&&(k, _)| k == 0) {
                    return Err(InstanceError::Invariant(format!(
                        "operation O{},{} references machine {k} outside 1..={}",
                        i + 1,
                        j + 1,
                        file.m
                    )));
                }
                ops.push(Operation::new(pairs.into_iter().map(|(k, t)| (k - 1, t)).collect()));
            }
            jobs.push(ops);
        }
        Instance::new(file.name, file.m, file.v, jobs, file.travel)
    }
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<Instance, InstanceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| InstanceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Instance::from_json(&text)
}

pub fn write_instance(inst: &Instance, path: impl AsRef<Path>) -> Result<(), InstanceError> {
    let path = path.as_ref();
    fs::write(path, inst.to_json() + "\n").map_err(|source| InstanceError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn round_bound(x: f64) -> i64 {
    x.round() as i64
}

/// Uniform integer in `[round(0.8 * mean), round(1.2 * mean)]`, clamped to >= 1.
fn jitter(rng: &mut crate::rng::Rng, mean: i64) -> i64 {
    let lo = round_bound(0.8 * mean as f64).max(1);
    let hi = round_bound(1.2 * mean as f64).max(lo);
    rng.gen_range(lo..=hi)
}

/// Random instance with `n` jobs, `m` machines and `v` vehicles.
///
/// Job lengths follow U(0.8m, 1.2m), compatible-set sizes U(1, m), mean
/// processing times U(1, 30) and mean travel times U(1, 20), each realised
/// as uniform integers over the rounded interval.
pub fn generate_instance(n: usize, m: usize, v: usize, seed: u64) -> Result<Instance, InstanceError> {
    generate_instance_traced(n, m, v, seed).map(|(inst, _)| inst)
}

/// Per-item means drawn while generating an instance.
#[derive(Debug, Clone, Default)]
pub struct GenerationTrace {
    /// Mean processing time of each operation, in flat operation order.
    pub op_means: Vec<i64>,
    /// Mean travel time of each unordered location pair `a < b`.
    pub travel_means: Vec<i64>,
}

/// [`generate_instance`] that also returns the sampled means.
pub fn generate_instance_traced(
    n: usize,
    m: usize,
    v: usize,
    seed: u64,
) -> Result<(Instance, GenerationTrace), InstanceError> {
    if n == 0 || m == 0 || v == 0 {
        return Err(InstanceError::EmptyDimension { n, m, v });
    }
    let mut rng = stream_rng(seed, Stream::Generation, 0);
    let len_lo = round_bound(0.8 * m as f64).max(1) as usize;
    let len_hi = (round_bound(1.2 * m as f64).max(1) as usize).max(len_lo);

    let mut trace = GenerationTrace::default();
    let mut jobs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(len_lo..=len_hi);
        let mut job = Vec::with_capacity(len);
        for _ in 0..len {
            let count = rng.gen_range(1..=m);
            let mean = rng.gen_range(1..=30);
            trace.op_means.push(mean);
            let mut machines = index::sample(&mut rng, m, count).into_vec();
            machines.sort_unstable();
            let options = machines
                .into_iter()
                .map(|k| (k, jitter(&mut rng, mean)))
                .collect();
            job.push(Operation::new(options));
        }
        jobs.push(job);
    }

    let mut travel = vec![vec![0; m + 1]; m + 1];
    for a in 0..=m {
        for b in (a + 1)..=m {
            let mean = rng.gen_range(1..=20);
            trace.travel_means.push(mean);
            let t = jitter(&mut rng, mean);
            travel[a][b] = t;
            travel[b][a] = t;
        }
    }
    let inst = Instance::new(format!("fjspt-{n}x{m}x{v}-s{seed}"), m, v, jobs, travel)?;
    Ok((inst, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_by_one() -> Instance {
        Instance::new(
            "tiny",
            1,
            1,
            vec![vec![Operation::new(vec![(0, 5)])]],
            vec![vec![0, 3], vec![3, 0]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_zero_dimensions() {
        assert!(matches!(
            generate_instance(0, 1, 1, 0),
            Err(InstanceError::EmptyDimension { .. })
        ));
        assert!(generate_instance(1, 0, 1, 0).is_err());
        assert!(generate_instance(1, 1, 0, 0).is_err());
    }

    #[test]
    fn ten_by_six_job_lengths_and_means() {
        let (inst, trace) = generate_instance_traced(10, 6, 6, 42).unwrap();
        for job in inst.jobs() {
            assert!((5..=7).contains(&job.len()), "len {}", job.len());
        }
        assert_eq!(trace.op_means.len(), inst.num_operations());
        for (flat, &mean) in trace.op_means.iter().enumerate() {
            assert!((1..=30).contains(&mean));
            let (i, j) = inst.op_at(flat);
            let lo = ((0.8 * mean as f64).round() as i64).max(1);
            let hi = ((1.2 * mean as f64).round() as i64).max(lo);
            for &(_, t) in inst.operation(i, j).options() {
                assert!((lo..=hi).contains(&t));
            }
        }
        assert_eq!(trace.travel_means.len(), 7 * 6 / 2);
    }

    #[test]
    fn single_machine_instance() {
        let inst = generate_instance(1, 1, 1, 99).unwrap();
        assert_eq!(inst.num_jobs(), 1);
        for op in &inst.jobs()[0] {
            assert_eq!(op.options().len(), 1);
            assert_eq!(op.options()[0].0, 0);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_instance(5, 3, 3, 7).unwrap();
        let b = generate_instance(5, 3, 3, 7).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.to_json(), generate_instance(5, 3, 3, 8).unwrap().to_json());
    }

    #[test]
    fn flat_indexing_round_trips() {
        let inst = generate_instance(4, 3, 2, 1).unwrap();
        for flat in 0..inst.num_operations() {
            let (i, j) = inst.op_at(flat);
            assert_eq!(inst.op_index(i, j), flat);
        }
    }

    #[test]
    fn mean_is_exact() {
        let op = Operation::new(vec![(1, 4), (0, 5)]);
        assert_eq!(op.mean_processing_time(), Ratio::new(9, 2));
        assert_eq!(op.options(), &[(0, 5), (1, 4)]);
        assert_eq!(op.processing_time(1), Some(4));
        assert_eq!(op.processing_time(2), None);
    }

    #[test]
    fn minimal_fixture_loads() {
        let text = r#"{"name":"min","n":1,"m":1,"v":1,"jobs":[[[[1,5]]]],"travel":[[0,3],[3,0]]}"#;
        let inst = Instance::from_json(text).unwrap();
        assert_eq!(inst, one_by_one().renamed("min"));
    }

    #[test]
    fn empty_machine_set_is_rejected() {
        let text = r#"{"name":"bad","n":1,"m":1,"v":1,"jobs":[[[]]],"travel":[[0,3],[3,0]]}"#;
        match Instance::from_json(text) {
            Err(InstanceError::Invariant(msg)) => assert!(msg.contains("empty compatible-machine set")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_syntax_errors_report_position() {
        let text = r#"{"name":"x","n":1,"m":1,"v":1,"jobs":[[[[1,5]]]],"travel":[[0,3],[3,0]],"extra":1}"#;
        assert!(matches!(Instance::from_json(text), Err(InstanceError::Parse { .. })));
        let text = "{\n  \"name\": \"x\",\n  \"n\": oops\n}";
        match Instance::from_json(text) {
            Err(InstanceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_or_bad_travel_is_rejected() {
        let ops = || vec![vec![Operation::new(vec![(0, 5)])]];
        assert!(Instance::new("a", 1, 1, ops(), vec![vec![0, 3], vec![2, 0]]).is_err());
        assert!(Instance::new("a", 1, 1, ops(), vec![vec![1, 3], vec![3, 0]]).is_err());
        assert!(Instance::new("a", 1, 1, ops(), vec![vec![0, 3]]).is_err());
        let zero_time = vec![vec![Operation::new(vec![(0, 0)])]];
        assert!(Instance::new("a", 1, 1, zero_time, vec![vec![0, 3], vec![3, 0]]).is_err());
        let text = r#"{"name":"z","n":1,"m":1,"v":1,"jobs":[[[[0,5]]]],"travel":[[0,3],[3,0]]}"#;
        assert!(matches!(Instance::from_json(text), Err(InstanceError::Invariant(_))));
        let bad_machine = vec![vec![Operation::new(vec![(1, 4)])]];
        assert!(Instance::new("a", 1, 1, bad_machine, vec![vec![0, 3], vec![3, 0]]).is_err());
    }

    #[test]
    fn zero_travel_fixture_still_writes_depot_row() {
        let inst = Instance::new(
            "flat",
            2,
            1,
            vec![vec![Operation::new(vec![(0, 2), (1, 3)])]],
            vec![vec![0; 3]; 3],
        )
        .unwrap();
        let value: serde_json::Value = serde_json::from_str(&inst.to_json()).unwrap();
        assert_eq!(value["travel"].as_array().unwrap().len(), 3);
        assert_eq!(value["travel"][0].as_array().unwrap().len(), 3);
    }

    impl Instance {
        fn renamed(mut self, name: &str) -> Self {
            self.name = name.to_string();
            self
        }
    }
}
