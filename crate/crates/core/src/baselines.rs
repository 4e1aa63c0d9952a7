//! Classical solvers sharing the environment: dispatching rules with
//! nearest-vehicle selection, a random policy, a genetic algorithm and an
//! exhaustive oracle for tiny instances.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{replay, run_episode, ActionTriple, EnvError, EpisodeRecord, ScheduleState};
use crate::instance::{Instance, Time};
use crate::rng::{stream_rng, Rng, Stream};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("instance has {ops} operations, above the exhaustive-search cap of {cap}")]
    TooLarge { ops: usize, cap: usize },
    #[error("invalid GA config: {0}")]
    Config(String),
    #[error("unknown rule {0:?}; expected spt, lpt or fifo")]
    UnknownRule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Spt,
    Lpt,
    Fifo,
}

impl Rule {
    pub const ALL: [Rule; 3] = [Rule::Spt, Rule::Lpt, Rule::Fifo];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Spt => "spt",
            Rule::Lpt => "lpt",
            Rule::Fifo => "fifo",
        }
    }
}

impl FromStr for Rule {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spt" => Ok(Rule::Spt),
            "lpt" => Ok(Rule::Lpt),
            "fifo" => Ok(Rule::Fifo),
            _ => Err(BaselineError::UnknownRule(s.to_string())),
        }
    }
}

/// Idle vehicle with the shortest empty trip to the job's product.
pub fn nearest_vehicle(state: &ScheduleState<'_>, feasible: &[ActionTriple], job: usize, machine: usize) -> Option<usize> {
    feasible
        .iter()
        .filter(|a| a.job == job && a.machine == machine)
        .map(|a| (state.off_load_time(job, a.vehicle), a.vehicle))
        .min()
        .map(|(_, u)| u)
}

fn processing(state: &ScheduleState<'_>, a: &ActionTriple) -> Time {
    state
        .instance()
        .operation(a.job, a.op)
        .processing_time(a.machine)
        .expect("feasible machine is compatible")
}

/// Dispatching decision of `rule`, completed by nearest-vehicle selection.
pub fn rule_step(state: &ScheduleState<'_>, rule: Rule) -> Result<ActionTriple, EnvError> {
    let feasible = state.feasible_actions()?;
    // feasible triples are listed by job, then machine; min_by_key keeps the
    // first minimum, which gives lowest-index tie-breaking
    let pick = match rule {
        Rule::Spt => feasible.iter().min_by_key(|a| processing(state, a)),
        Rule::Lpt => feasible.iter().min_by_key(|a| std::cmp::Reverse(processing(state, a))),
        Rule::Fifo => feasible
            .iter()
            .min_by_key(|a| (state.job_ready_time(a.job), a.job, processing(state, a))),
    }
    .expect("feasible set is nonempty");
    let vehicle = nearest_vehicle(state, &feasible, pick.job, pick.machine).expect("pair has an idle vehicle");
    Ok(ActionTriple::new(pick.job, pick.op, pick.machine, vehicle))
}

pub fn solve_rule(inst: &Instance, rule: Rule) -> Result<EpisodeRecord, BaselineError> {
    Ok(run_episode(inst, |s| rule_step(s, rule))?)
}

/// Uniformly random feasible triples drawn from the `Random` stream.
pub fn solve_random(inst: &Instance, seed: u64, index: u64) -> Result<EpisodeRecord, BaselineError> {
    let mut rng = stream_rng(seed, Stream::Random, index);
    Ok(run_episode(inst, |s| {
        Ok(*s.feasible_actions()?.choose(&mut rng).expect("feasible set is nonempty"))
    })?)
}

pub const DEFAULT_EXHAUSTIVE_CAP: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub makespan: Time,
    pub actions: Vec<ActionTriple>,
    /// Search nodes expanded.
    pub nodes: u64,
}

/// Valid lower bound on the final makespan: completions so far, and for each
/// job its ready time plus the shortest processing of what remains.
fn bound(state: &ScheduleState<'_>) -> Time {
    let inst = state.instance();
    let mut b = state.current_makespan();
    for job in 0..inst.num_jobs() {
        if let Some(next) = state.next_op(job) {
            let rest: Time = (next..inst.job_len(job))
                .map(|j| inst.operation(job, j).min_processing_time())
                .sum();
            b = b.max(state.job_ready_time(job) + rest);
        }
    }
    b
}

/// True optimum of the environment's dynamics by depth-first branch and
/// bound, seeded with the best dispatching rule.
pub fn exhaustive_optimal(inst: &Instance, cap: usize) -> Result<Optimum, BaselineError> {
    let ops = inst.num_operations();
    if ops > cap {
        return Err(BaselineError::TooLarge { ops, cap });
    }
    let mut best: Option<(Time, Vec<ActionTriple>)> = None;
    for rule in Rule::ALL {
        let r = solve_rule(inst, rule)?;
        if best.as_ref().is_none_or(|(b, _)| r.makespan() < *b) {
            best = Some((r.makespan(), r.actions));
        }
    }
    let (mut best_c, mut best_seq) = best.expect("rules ran");
    let mut path = Vec::with_capacity(ops);
    let mut nodes = 0;
    dfs(&ScheduleState::reset(inst), &mut path, &mut best_c, &mut best_seq, &mut nodes)?;
    Ok(Optimum {
        makespan: best_c,
        actions: best_seq,
        nodes,
    })
}

fn dfs(
    state: &ScheduleState<'_>,
    path: &mut Vec<ActionTriple>,
    best_c: &mut Time,
    best_seq: &mut Vec<ActionTriple>,
    nodes: &mut u64,
) -> Result<(), EnvError> {
    *nodes += 1;
    if state.is_terminal() {
        let c = state.current_makespan();
        if c < *best_c {
            *best_c = c;
            *best_seq = path.clone();
        }
        return Ok(());
    }
    if bound(state) >= *best_c {
        return Ok(());
    }
    for a in state.feasible_actions()? {
        let mut next = state.clone();
        next.apply_action(a)?;
        path.push(a);
        dfs(&next, path, best_c, best_seq, nodes)?;
        path.pop();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub tournament: usize,
    /// Best individuals copied unchanged into the next generation.
    pub elite: usize,
    pub seed: u64,
    pub time_budget_s: Option<f64>,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 100,
            crossover_rate: 0.8,
            mutation_rate: 0.2,
            tournament: 3,
            elite: 1,
            seed: 0,
            time_budget_s: None,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::Config(m.to_string()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if self.tournament == 0 {
            return bad("tournament must be at least 1");
        }
        if self.elite > self.population {
            return bad("elite cannot exceed the population");
        }
        Ok(())
    }
}

/// Operation order plus preferred machine and vehicle per flat operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chromosome {
    pub order: Vec<usize>,
    pub machines: Vec<usize>,
    pub vehicles: Vec<usize>,
}

impl Chromosome {
    pub fn random(inst: &Instance, rng: &mut Rng) -> Self {
        let n = inst.num_operations();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let machines = (0..n)
            .map(|o| {
                let (j, op) = inst.op_at(o);
                inst.operation(j, op).options().choose(rng).expect("compatible machine exists").0
            })
            .collect();
        let vehicles = (0..n).map(|_| rng.gen_range(0..inst.num_vehicles())).collect();
        let mut c = Self { order, machines, vehicles };
        c.repair(inst);
        c
    }

    /// Keeps each job's slots in place but fills them with its operations in
    /// precedence order.
    pub fn repair(&mut self, inst: &Instance) {
        let mut next = vec![0; inst.num_jobs()];
        for slot in self.order.iter_mut() {
            let (job, _) = inst.op_at(*slot);
            *slot = inst.op_index(job, next[job]);
            next[job] += 1;
        }
    }

    /// Replays the chromosome: at each decision the first unscheduled
    /// operation in `order` with a feasible triple is dispatched, on its
    /// preferred machine and vehicle when they are free and otherwise on the
    /// fastest free machine and the nearest free vehicle.
    pub fn decode(&self, inst: &Instance) -> Result<EpisodeRecord, EnvError> {
        let mut cursor = 0;
        let order = &self.order;
        let mut done = vec![false; order.len()];
        run_episode(inst, |s| {
            let feasible = s.feasible_actions()?;
            while done[order[cursor]] {
                cursor += 1;
            }
            for &o in &order[cursor..] {
                if done[o] {
                    continue;
                }
                let (job, op) = inst.op_at(o);
                let mut options = feasible.iter().filter(|a| a.job == job && a.op == op).peekable();
                if options.peek().is_none() {
                    continue;
                }
                let machine = if feasible.iter().any(|a| a.job == job && a.machine == self.machines[o]) {
                    self.machines[o]
                } else {
                    options
                        .min_by_key(|a| inst.operation(job, op).processing_time(a.machine))
                        .expect("peeked")
                        .machine
                };
                let vehicle = if feasible
                    .iter()
                    .any(|a| a.job == job && a.machine == machine && a.vehicle == self.vehicles[o])
                {
                    self.vehicles[o]
                } else {
                    nearest_vehicle(s, &feasible, job, machine).expect("pair has an idle vehicle")
                };
                done[o] = true;
                return Ok(ActionTriple::new(job, op, machine, vehicle));
            }
            unreachable!("a feasible triple belongs to some unscheduled operation")
        })
    }

    /// Chromosome that decodes to the given action sequence.
    pub fn from_actions(inst: &Instance, actions: &[ActionTriple]) -> Self {
        let n = inst.num_operations();
        let mut c = Self {
            order: Vec::with_capacity(n),
            machines: vec![0; n],
            vehicles: vec![0; n],
        };
        for a in actions {
            let o = inst.op_index(a.job, a.op);
            c.order.push(o);
            c.machines[o] = a.machine;
            c.vehicles[o] = a.vehicle;
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct GaResult {
    pub best: Chromosome,
    pub record: EpisodeRecord,
    /// Best makespan after initialization and after each generation.
    pub history: Vec<Time>,
}

impl GaResult {
    pub fn makespan(&self) -> Time {
        self.record.makespan()
    }
}

fn one_point<T: Clone>(a: &[T], b: &[T], cut: usize) -> Vec<T> {
    a[..cut].iter().chain(&b[cut..]).cloned().collect()
}

/// Prefix of `a`, then the remaining operations in `b`'s order.
fn order_crossover(a: &[usize], b: &[usize], cut: usize) -> Vec<usize> {
    let mut used = vec![false; a.len()];
    let mut child: Vec<usize> = a[..cut].to_vec();
    for &o in &child {
        used[o] = true;
    }
    child.extend(b.iter().filter(|&&o| !used[o]));
    child
}

fn tournament<'a>(pop: &'a [(Time, Chromosome)], k: usize, rng: &mut Rng) -> &'a Chromosome {
    let mut best = rng.gen_range(0..pop.len());
    for _ in 1..k {
        let c = rng.gen_range(0..pop.len());
        if pop[c].0 < pop[best].0 {
            best = c;
        }
    }
    &pop[best].1
}

fn evaluate(inst: &Instance, pop: Vec<Chromosome>) -> Result<Vec<(Time, Chromosome)>, EnvError> {
    let mut scored: Vec<(Time, Chromosome)> = pop
        .into_par_iter()
        .map(|c| c.decode(inst).map(|r| (r.makespan(), c)))
        .collect::<Result<_, _>>()?;
    // stable, so equal makespans keep their order
    scored.sort_by_key(|(c, _)| *c);
    Ok(scored)
}

pub fn ga_solve(inst: &Instance, cfg: &GaConfig) -> Result<GaResult, BaselineError> {
    let mut rng = stream_rng(cfg.seed, Stream::Genetic, 0);
    let initial = (0..cfg.population).map(|_| Chromosome::random(inst, &mut rng)).collect();
    ga_evolve(inst, cfg, initial, rng)
}

/// Runs the GA from a given initial population.
pub fn ga_solve_from(inst: &Instance, cfg: &GaConfig, initial: Vec<Chromosome>) -> Result<GaResult, BaselineError> {
    let rng = stream_rng(cfg.seed, Stream::Genetic, 1);
    ga_evolve(inst, cfg, initial, rng)
}

fn ga_evolve(inst: &Instance, cfg: &GaConfig, initial: Vec<Chromosome>, mut rng: Rng) -> Result<GaResult, BaselineError> {
    cfg.validate()?;
    if initial.len() != cfg.population {
        return Err(BaselineError::Config(format!(
            "initial population has {} individuals, expected {}",
            initial.len(),
            cfg.population
        )));
    }
    let started = Instant::now();
    let n = inst.num_operations();
    let mut pop = evaluate(inst, initial)?;
    let mut best = pop[0].clone();
    let mut history = vec![best.0];
    for _ in 0..cfg.generations {
        if cfg.time_budget_s.is_some_and(|t| started.elapsed().as_secs_f64() >= t) {
            break;
        }
        let mut next: Vec<Chromosome> = pop.iter().take(cfg.elite).map(|(_, c)| c.clone()).collect();
        while next.len() < cfg.population {
            let a = tournament(&pop, cfg.tournament, &mut rng);
            let b = tournament(&pop, cfg.tournament, &mut rng);
            let mut child = if rng.gen_bool(cfg.crossover_rate) && n > 1 {
                Chromosome {
                    order: order_crossover(&a.order, &b.order, rng.gen_range(1..n)),
                    machines: one_point(&a.machines, &b.machines, rng.gen_range(1..n)),
                    vehicles: one_point(&a.vehicles, &b.vehicles, rng.gen_range(1..n)),
                }
            } else {
                a.clone()
            };
            mutate(inst, &mut child, cfg.mutation_rate, &mut rng);
            child.repair(inst);
            // duplicates are replaced by fresh individuals to keep diversity
            if cfg.mutation_rate > 0.0 && next.contains(&child) {
                child = Chromosome::random(inst, &mut rng);
            }
            next.push(child);
        }
        pop = evaluate(inst, next)?;
        if pop[0].0 < best.0 {
            best = pop[0].clone();
        }
        history.push(best.0);
    }
    let best = best.1;
    let record = best.decode(inst)?;
    Ok(GaResult { best, record, history })
}

/// Each operator fires independently with probability `rate`: swap two
/// order slots, flip one machine, redraw one vehicle.
fn mutate(inst: &Instance, c: &mut Chromosome, rate: f64, rng: &mut Rng) {
    let n = c.order.len();
    if rng.gen_bool(rate) {
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        c.order.swap(i, j);
    }
    if rng.gen_bool(rate) {
        let o = rng.gen_range(0..n);
        let (job, op) = inst.op_at(o);
        c.machines[o] = inst.operation(job, op).options().choose(rng).expect("compatible machine exists").0;
    }
    if rng.gen_bool(rate) {
        let o = rng.gen_range(0..n);
        c.vehicles[o] = rng.gen_range(0..inst.num_vehicles());
    }
}

/// Replays an action sequence and returns its makespan.
pub fn replay_makespan(inst: &Instance, actions: &[ActionTriple]) -> Result<Time, BaselineError> {
    Ok(replay(inst, actions)?.makespan())
}
