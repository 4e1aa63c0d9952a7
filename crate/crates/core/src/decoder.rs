//! Three-stage decoder (operation, then machine, then vehicle) and episode
//! rollouts of the policy.

use rand::Rng as _;
use thiserror::Error;

use crate::encoder::{encode, EmbeddingSet};
use crate::env::{ActionTriple, EnvError, Schedule, ScheduleState};
use crate::hetgraph::featurize;
use crate::instance::{ExactTime, Instance, Time};
use crate::kernel::{EmptyRow, Graph, KernelError, Tensor2, Var};
use crate::model::{Policy, StageParams};
use crate::num::Scalar;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("forced action {0} is not feasible")]
    ForcedInfeasible(ActionTriple),
    #[error("forced action sequence ended before the episode")]
    ForcedTooShort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

/// Masked stage logits as plain numbers; `None` marks a masked candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLogits {
    pub op: Vec<Option<f64>>,
    pub machine: Vec<Option<f64>>,
    pub vehicle: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAction {
    pub action: ActionTriple,
    /// Log-probabilities of the operation, machine and vehicle choices.
    pub stage_log_probs: [f64; 3],
    pub log_prob: f64,
    pub logits: StageLogits,
}

/// Tape handles of one decoding step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    /// `1 x 1` log-probability of the composite action.
    pub log_prob: Var,
    /// `1 x d_h` sum of the selected node embeddings.
    pub glimpse: Var,
}

/// Log-softmax over the unmasked entries.
pub fn masked_log_softmax(logits: &[Option<f64>]) -> Vec<Option<f64>> {
    let max = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().flatten().map(|&x| (x - max).exp()).sum();
    let log_total = total.ln() + max;
    logits.iter().map(|x| x.map(|x| x - log_total)).collect()
}

/// Lowest-index argmax among unmasked entries.
pub fn greedy_index(logits: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in logits.iter().enumerate() {
        if let Some(x) = *x {
            if best.is_none_or(|(_, b)| x > b) {
                best = Some((i, x));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn sample_index(logits: &[Option<f64>], rng: &mut Rng) -> Option<usize> {
    let logp = masked_log_softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, lp) in logp.iter().enumerate() {
        if let Some(lp) = lp {
            acc += lp.exp();
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

fn choose(logits: &[Option<f64>], mode: DecodeMode, rng: &mut Rng) -> Option<usize> {
    match mode {
        DecodeMode::Greedy => greedy_index(logits),
        DecodeMode::Sample => sample_index(logits, rng),
    }
}

/// Context attention: one query row attends over `nodes`.
fn context_mha<S: Scalar>(
    g: &mut Graph<S>,
    policy: &Policy<S>,
    st: &StageParams,
    query: Var,
    nodes: Var,
    mask: Option<&[bool]>,
) -> Result<Var, KernelError> {
    let store = &policy.store;
    let dk = policy.cfg.d_k();
    let inv_sqrt = S::one() / S::of((dk as f64).sqrt());
    let n = g.shape(nodes).0;
    let all = vec![true; n];
    let mask = mask.unwrap_or(&all);
    let wq = g.param(store, st.wq);
    let wk = g.param(store, st.wk);
    let wv = g.param(store, st.wv);
    let q = g.matmul(query, wq)?;
    let k = g.matmul(nodes, wk)?;
    let v = g.matmul(nodes, wv)?;
    let mut heads = Vec::with_capacity(policy.cfg.heads);
    for z in 0..policy.cfg.heads {
        let qz = g.slice_cols(q, z * dk, dk)?;
        let kz = g.slice_cols(k, z * dk, dk)?;
        let vz = g.slice_cols(v, z * dk, dk)?;
        let kt = g.transpose(kz);
        let s = g.matmul(qz, kt)?;
        let s = g.scale(s, inv_sqrt);
        let a = g.softmax_masked(s, mask, EmptyRow::Error)?;
        heads.push(g.matmul(a, vz)?);
    }
    let stacked = g.concat_cols(&heads)?;
    let wo = g.param(store, st.wo);
    g.matmul(stacked, wo)
}

/// Clipped single-head compatibility of `context` with every row of `nodes`.
fn pointer_logits<S: Scalar>(
    g: &mut Graph<S>,
    policy: &Policy<S>,
    st: &StageParams,
    context: Var,
    nodes: Var,
) -> Result<Var, KernelError> {
    let store = &policy.store;
    let inv_sqrt = S::one() / S::of((policy.cfg.d_h as f64).sqrt());
    let pq = g.param(store, st.ptr_q);
    let pk = g.param(store, st.ptr_k);
    let q = g.matmul(context, pq)?;
    let k = g.matmul(nodes, pk)?;
    let kt = g.transpose(k);
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, inv_sqrt);
    let s = g.tanh(s);
    Ok(g.scale(s, S::of(policy.cfg.clip)))
}

fn masked_values<S: Scalar>(g: &Graph<S>, v: Var, mask: &[bool]) -> Vec<Option<f64>> {
    g.value(v)
        .data()
        .iter()
        .zip(mask)
        .map(|(x, &keep)| keep.then(|| x.as_f64()))
        .collect()
}

/// Adds the `d_e`-wide edge rows to every column of `nodes` by broadcasting
/// through a constant `d_e x d_h` matrix of ones.
fn with_edges<S: Scalar>(g: &mut Graph<S>, nodes: Var, edges: Var, rows: &[usize]) -> Result<Var, KernelError> {
    let selected = g.gather_rows(edges, rows)?;
    let (_, d_e) = g.shape(selected);
    let d_h = g.shape(nodes).1;
    let ones = g.constant(Tensor2::filled(d_e, d_h, S::one()));
    let spread = g.matmul(selected, ones)?;
    g.add(nodes, spread)
}

/// One decoding step. When `forced` is given it replaces the sampled or
/// greedy choice, which is how fixed action sequences are scored.
#[allow(clippy::too_many_arguments)]
pub fn decode<S: Scalar>(
    g: &mut Graph<S>,
    policy: &Policy<S>,
    e: &EmbeddingSet,
    state: &ScheduleState,
    glimpse: Var,
    mode: DecodeMode,
    rng: &mut Rng,
    forced: Option<ActionTriple>,
) -> Result<(DecodedAction, StepVars), PolicyError> {
    let inst = state.instance();
    let (n_ops, m, v) = (inst.num_operations(), inst.num_machines(), inst.num_vehicles());
    let feasible = state.feasible_actions()?;
    if let Some(a) = forced {
        if !feasible.contains(&a) {
            return Err(PolicyError::ForcedInfeasible(a));
        }
    }
    let stages = &policy.ids.stages;

    // operation
    let all = g.concat_rows(&[e.ops, e.machines, e.vehicles])?;
    let mean = g.mean_rows(all);
    let context = g.concat_cols(&[mean, glimpse])?;
    let h1 = context_mha(g, policy, &stages[0], context, e.ops, None)?;
    let op_logits = pointer_logits(g, policy, &stages[0], h1, e.ops)?;
    let mut op_mask = vec![false; n_ops];
    for a in &feasible {
        op_mask[inst.op_index(a.job, a.op)] = true;
    }
    let op_vals = masked_values(g, op_logits, &op_mask);
    let o = match forced {
        Some(a) => inst.op_index(a.job, a.op),
        None => choose(&op_vals, mode, rng).expect("feasible set is nonempty"),
    };
    let (job, op) = inst.op_at(o);

    // machine
    let compatible: Vec<bool> = (0..m).map(|k| inst.operation(job, op).is_compatible(k)).collect();
    let mut machine_mask = vec![false; m];
    for a in feasible.iter().filter(|a| a.job == job) {
        machine_mask[a.machine] = true;
    }
    let om_rows: Vec<usize> = (0..m).map(|k| o * m + k).collect();
    let machine_in = with_edges(g, e.machines, e.edge_om, &om_rows)?;
    let h2 = context_mha(g, policy, &stages[1], h1, machine_in, Some(&compatible))?;
    let machine_logits = pointer_logits(g, policy, &stages[1], h2, e.machines)?;
    let machine_vals = masked_values(g, machine_logits, &machine_mask);
    let k = match forced {
        Some(a) => a.machine,
        None => choose(&machine_vals, mode, rng).expect("selected operation has a feasible machine"),
    };

    // vehicle
    let mut vehicle_mask = vec![false; v];
    for a in feasible.iter().filter(|a| a.job == job && a.machine == k) {
        vehicle_mask[a.vehicle] = true;
    }
    let ov_rows: Vec<usize> = (0..v).map(|u| o * v + u).collect();
    let vehicle_in = with_edges(g, e.vehicles, e.edge_ov, &ov_rows)?;
    let h3 = context_mha(g, policy, &stages[2], h2, vehicle_in, None)?;
    let vehicle_logits = pointer_logits(g, policy, &stages[2], h3, e.vehicles)?;
    let vehicle_vals = masked_values(g, vehicle_logits, &vehicle_mask);
    let u = match forced {
        Some(a) => a.vehicle,
        None => choose(&vehicle_vals, mode, rng).expect("an idle vehicle exists"),
    };

    let lp_op = g.log_softmax_select(op_logits, &op_mask, &[o])?;
    let lp_machine = g.log_softmax_select(machine_logits, &machine_mask, &[k])?;
    let lp_vehicle = g.log_softmax_select(vehicle_logits, &vehicle_mask, &[u])?;
    let stage_log_probs = [lp_op, lp_machine, lp_vehicle].map(|x| g.value(x).get(0, 0).as_f64());
    let partial = g.add(lp_op, lp_machine)?;
    let log_prob = g.add(partial, lp_vehicle)?;

    let ho = g.gather_rows(e.ops, &[o])?;
    let hk = g.gather_rows(e.machines, &[k])?;
    let hu = g.gather_rows(e.vehicles, &[u])?;
    let partial = g.add(ho, hk)?;
    let next_glimpse = g.add(partial, hu)?;

    let decoded = DecodedAction {
        action: ActionTriple::new(job, op, k, u),
        stage_log_probs,
        log_prob: g.value(log_prob).get(0, 0).as_f64(),
        logits: StageLogits {
            op: op_vals,
            machine: machine_vals,
            vehicle: vehicle_vals,
        },
    };
    Ok((
        decoded,
        StepVars {
            log_prob,
            glimpse: next_glimpse,
        },
    ))
}

/// Record of one policy episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<ActionTriple>,
    pub stage_log_probs: Vec<[f64; 3]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<ExactTime>,
    pub initial_bound: ExactTime,
    pub makespan: Time,
    pub schedule: Schedule,
}

impl Trajectory {
    /// `G = sum of rewards`, which telescopes to `C_max(s_0) - C_max`.
    pub fn total_return(&self) -> ExactTime {
        self.rewards.iter().copied().sum()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

struct Recorder {
    actions: Vec<ActionTriple>,
    stage_log_probs: Vec<[f64; 3]>,
    log_probs: Vec<f64>,
    rewards: Vec<ExactTime>,
}

impl Recorder {
    fn new(n: usize) -> Self {
        Self {
            actions: Vec::with_capacity(n),
            stage_log_probs: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, state: &mut ScheduleState, d: &DecodedAction) -> Result<(), PolicyError> {
        let out = state.apply_action(d.action)?;
        self.actions.push(d.action);
        self.stage_log_probs.push(d.stage_log_probs);
        self.log_probs.push(d.log_prob);
        self.rewards.push(out.reward);
        Ok(())
    }

    fn finish(self, state: &ScheduleState, initial_bound: ExactTime) -> Result<Trajectory, PolicyError> {
        let schedule = state.final_schedule()?;
        Ok(Trajectory {
            actions: self.actions,
            stage_log_probs: self.stage_log_probs,
            log_probs: self.log_probs,
            rewards: self.rewards,
            initial_bound,
            makespan: schedule.makespan(),
            schedule,
        })
    }
}

fn forced_at(forced: Option<&[ActionTriple]>, t: usize) -> Result<Option<ActionTriple>, PolicyError> {
    match forced {
        None => Ok(None),
        Some(seq) => seq.get(t).copied().map(Some).ok_or(PolicyError::ForcedTooShort),
    }
}

/// Runs an episode, building a fresh tape per decision step.
pub fn rollout<S: Scalar>(
    inst: &Instance,
    policy: &Policy<S>,
    mode: DecodeMode,
    rng: &mut Rng,
) -> Result<Trajectory, PolicyError> {
    let mut state = ScheduleState::reset(inst);
    let initial_bound = state.makespan_lower_bound();
    let mut rec = Recorder::new(inst.num_operations());
    let mut glimpse = Tensor2::zeros(1, policy.cfg.d_h);
    while !state.is_terminal() {
        let mut g = Graph::new();
        let f = featurize::<S>(&state);
        let e = encode(&mut g, policy, &f)?;
        let gl = g.constant(glimpse);
        let (d, vars) = decode(&mut g, policy, &e, &state, gl, mode, rng, None)?;
        glimpse = g.value(vars.glimpse).clone();
        rec.push(&mut state, &d)?;
    }
    rec.finish(&state, initial_bound)
}

/// Runs an episode on a single tape so the summed log-probability can be
/// differentiated, including through the glimpse carried between steps.
pub fn rollout_on_tape<S: Scalar>(
    g: &mut Graph<S>,
    inst: &Instance,
    policy: &Policy<S>,
    mode: DecodeMode,
    rng: &mut Rng,
    forced: Option<&[ActionTriple]>,
) -> Result<(Trajectory, Var), PolicyError> {
    let mut state = ScheduleState::reset(inst);
    let initial_bound = state.makespan_lower_bound();
    let mut rec = Recorder::new(inst.num_operations());
    let mut glimpse = g.constant(Tensor2::zeros(1, policy.cfg.d_h));
    let mut total: Option<Var> = None;
    let mut t = 0;
    while !state.is_terminal() {
        let f = featurize::<S>(&state);
        let e = encode(g, policy, &f)?;
        let (d, vars) = decode(g, policy, &e, &state, glimpse, mode, rng, forced_at(forced, t)?)?;
        glimpse = vars.glimpse;
        total = Some(match total {
            None => vars.log_prob,
            Some(acc) => g.add(acc, vars.log_prob)?,
        });
        rec.push(&mut state, &d)?;
        t += 1;
    }
    let traj = rec.finish(&state, initial_bound)?;
    let total = match total {
        Some(v) => v,
        None => g.constant(Tensor2::scalar(S::zero())),
    };
    Ok((traj, total))
}

#[cfg(test)]
mod tests;
