//! Event-driven scheduling environment.
//!
//! A decision is an [`ActionTriple`] `(operation, machine, vehicle)`. The
//! vehicle leaves its current location at the decision clock, drives empty to
//! the product, carries it to the machine, and is released on arrival. The
//! machine is reserved from the decision until the operation completes.

mod schedule;

use serde::Serialize;
use thiserror::Error;

use crate::instance::{ExactTime, Instance, Time};

pub use schedule::{check_schedule, schedule_violations, Schedule, ScheduledOperation, Violation};

/// Location index of the load/unload depot.
pub const DEPOT: usize = 0;

/// Location index of machine `k`.
pub fn machine_location(machine: usize) -> usize {
    machine + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ActionTriple {
    pub job: usize,
    pub op: usize,
    pub machine: usize,
    pub vehicle: usize,
}

impl ActionTriple {
    pub fn new(job: usize, op: usize, machine: usize, vehicle: usize) -> Self {
        Self {
            job,
            op,
            machine,
            vehicle,
        }
    }
}

impl std::fmt::Display for ActionTriple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(O{},{}, M{}, V{})",
            self.job + 1,
            self.op + 1,
            self.machine + 1,
            self.vehicle + 1
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("episode is already terminal")]
    Terminal,
    #[error("episode is not terminal: {remaining} operations unscheduled")]
    NotTerminal { remaining: usize },
    #[error("infeasible action {action}: {reason}")]
    Infeasible { action: ActionTriple, reason: String },
    #[error("clock advance requested at t={clock} while actions are still feasible")]
    AdvanceWhileFeasible { clock: Time },
    #[error("deadlock at t={clock}: no future event while operations remain")]
    Deadlock { clock: Time },
}

/// Resolved timing of one scheduled operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub machine: usize,
    pub vehicle: usize,
    /// Location the vehicle departed from.
    pub vehicle_origin: usize,
    /// Location where the product was picked up.
    pub pickup_location: usize,
    pub off_load_start: Time,
    pub pickup_time: Time,
    pub arrival: Time,
    pub start: Time,
    pub completion: Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct JobProgress {
    next_op: usize,
    /// Completion time of the last scheduled operation (0 before any).
    ready_time: Time,
    /// Where the product sits once the last scheduled operation completes.
    location: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct VehicleState {
    busy_until: Time,
    location: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// `C_max(s_t) - C_max(s_{t+1})` of the lower-bound makespan estimate.
    pub reward: ExactTime,
    pub done: bool,
    /// Clock of the next decision (unchanged when `done`).
    pub clock: Time,
}

/// Mutable simulation state for one episode.
#[derive(Debug, Clone)]
pub struct ScheduleState<'a> {
    inst: &'a Instance,
    clock: Time,
    jobs: Vec<JobProgress>,
    machine_busy_until: Vec<Time>,
    vehicles: Vec<VehicleState>,
    assignments: Vec<Option<Assignment>>,
    scheduled: usize,
}

impl<'a> ScheduleState<'a> {
    /// Initial state: clock 0, every product and vehicle at the depot.
    pub fn reset(inst: &'a Instance) -> Self {
        Self {
            inst,
            clock: 0,
            jobs: vec![
                JobProgress {
                    next_op: 0,
                    ready_time: 0,
                    location: DEPOT,
                };
                inst.num_jobs()
            ],
            machine_busy_until: vec![0; inst.num_machines()],
            vehicles: vec![
                VehicleState {
                    busy_until: 0,
                    location: DEPOT,
                };
                inst.num_vehicles()
            ],
            assignments: vec![None; inst.num_operations()],
            scheduled: 0,
        }
    }

    pub fn instance(&self) -> &'a Instance {
        self.inst
    }

    pub fn clock(&self) -> Time {
        self.clock
    }

    pub fn is_terminal(&self) -> bool {
        self.scheduled == self.inst.num_operations()
    }

    pub fn num_scheduled(&self) -> usize {
        self.scheduled
    }

    /// Index of the next unscheduled operation of `job`, if any.
    pub fn next_op(&self, job: usize) -> Option<usize> {
        let next = self.jobs[job].next_op;
        (next < self.inst.job_len(job)).then_some(next)
    }

    /// Completion time of the job's last scheduled operation (0 if none).
    pub fn job_ready_time(&self, job: usize) -> Time {
        self.jobs[job].ready_time
    }

    /// Location of the job's product for its next transport.
    pub fn product_location(&self, job: usize) -> usize {
        self.jobs[job].location
    }

    pub fn machine_busy_until(&self, machine: usize) -> Time {
        self.machine_busy_until[machine]
    }

    pub fn machine_idle(&self, machine: usize) -> bool {
        self.machine_busy_until[machine] <= self.clock
    }

    pub fn vehicle_busy_until(&self, vehicle: usize) -> Time {
        self.vehicles[vehicle].busy_until
    }

    pub fn vehicle_idle(&self, vehicle: usize) -> bool {
        self.vehicles[vehicle].busy_until <= self.clock
    }

    /// Current location of a vehicle (its last destination, or the depot).
    pub fn vehicle_location(&self, vehicle: usize) -> usize {
        self.vehicles[vehicle].location
    }

    /// Empty-travel time for `vehicle` to reach the product of `job`.
    pub fn off_load_time(&self, job: usize, vehicle: usize) -> Time {
        self.inst
            .travel(self.vehicles[vehicle].location, self.jobs[job].location)
    }

    pub fn assignment(&self, job: usize, op: usize) -> Option<&Assignment> {
        self.assignments[self.inst.op_index(job, op)].as_ref()
    }

    pub fn assignment_flat(&self, flat: usize) -> Option<&Assignment> {
        self.assignments[flat].as_ref()
    }

    /// Whether the job's next operation may be dispatched now.
    pub fn op_ready(&self, job: usize) -> bool {
        self.next_op(job).is_some() && self.jobs[job].ready_time <= self.clock
    }

    /// Processing time accumulated on `machine` within `[0, clock]`.
    pub fn machine_busy_time(&self, machine: usize) -> Time {
        self.assignments
            .iter()
            .flatten()
            .filter(|a| a.machine == machine)
            .map(|a| (a.completion.min(self.clock) - a.start).max(0))
            .sum()
    }

    /// Busy share of `[0, clock]` for `machine`; 0 at clock 0.
    pub fn machine_utilization(&self, machine: usize) -> f64 {
        if self.clock <= 0 {
            0.0
        } else {
            self.machine_busy_time(machine) as f64 / self.clock as f64
        }
    }

    fn has_feasible(&self) -> bool {
        if !self.vehicles.iter().any(|v| v.busy_until <= self.clock) {
            return false;
        }
        (0..self.inst.num_jobs()).any(|i| {
            self.op_ready(i)
                && self
                    .inst
                    .operation(i, self.jobs[i].next_op)
                    .options()
                    .iter()
                    .any(|&(k, _)| self.machine_idle(k))
        })
    }

    /// All feasible triples at the current clock, ordered by job, machine,
    /// then vehicle.
    pub fn feasible_actions(&self) -> Result<Vec<ActionTriple>, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::Terminal);
        }
        let idle: Vec<usize> = (0..self.vehicles.len())
            .filter(|&u| self.vehicle_idle(u))
            .collect();
        let mut out = Vec::new();
        for i in 0..self.inst.num_jobs() {
            if !self.op_ready(i) {
                continue;
            }
            let j = self.jobs[i].next_op;
            for &(k, _) in self.inst.operation(i, j).options() {
                if self.machine_idle(k) {
                    out.extend(idle.iter().map(|&u| ActionTriple::new(i, j, k, u)));
                }
            }
        }
        Ok(out)
    }

    fn check_feasible(&self, a: ActionTriple) -> Result<(), EnvError> {
        if self.is_terminal() {
            return Err(EnvError::Terminal);
        }
        let fail = |reason: String| {
            Err(EnvError::Infeasible {
                action: a,
                reason,
            })
        };
        if a.job >= self.inst.num_jobs() {
            return fail(format!("job index out of range (n = {})", self.inst.num_jobs()));
        }
        if a.machine >= self.inst.num_machines() {
            return fail("machine index out of range".into());
        }
        if a.vehicle >= self.inst.num_vehicles() {
            return fail("vehicle index out of range".into());
        }
        match self.next_op(a.job) {
            None => return fail("job has no unscheduled operation".into()),
            Some(next) if next != a.op => {
                return fail(format!(
                    "operation is not the job's next unscheduled operation (next is {})",
                    next + 1
                ))
            }
            _ => {}
        }
        if self.jobs[a.job].ready_time > self.clock {
            return fail(format!(
                "predecessor completes at {} after clock {}",
                self.jobs[a.job].ready_time, self.clock
            ));
        }
        if !self.inst.operation(a.job, a.op).is_compatible(a.machine) {
            return fail("machine is not compatible with the operation".into());
        }
        if !self.machine_idle(a.machine) {
            return fail(format!(
                "machine busy until {}",
                self.machine_busy_until[a.machine]
            ));
        }
        if !self.vehicle_idle(a.vehicle) {
            return fail(format!(
                "vehicle busy until {}",
                self.vehicles[a.vehicle].busy_until
            ));
        }
        Ok(())
    }

    /// Commits `a` at the current clock without advancing time.
    pub fn assign(&mut self, a: ActionTriple) -> Result<Assignment, EnvError> {
        self.check_feasible(a)?;
        let origin = self.vehicles[a.vehicle].location;
        let pickup_location = self.jobs[a.job].location;
        let destination = machine_location(a.machine);
        let off_load = self.inst.travel(origin, pickup_location);
        let on_load = self.inst.travel(pickup_location, destination);
        let pickup_time = self.clock + off_load;
        let arrival = pickup_time + on_load;
        let start = arrival.max(self.machine_busy_until[a.machine]);
        let processing = self
            .inst
            .operation(a.job, a.op)
            .processing_time(a.machine)
            .expect("compatibility checked");
        let completion = start + processing;

        let assignment = Assignment {
            machine: a.machine,
            vehicle: a.vehicle,
            vehicle_origin: origin,
            pickup_location,
            off_load_start: self.clock,
            pickup_time,
            arrival,
            start,
            completion,
        };
        self.assignments[self.inst.op_index(a.job, a.op)] = Some(assignment);
        self.vehicles[a.vehicle] = VehicleState {
            busy_until: arrival,
            location: destination,
        };
        self.machine_busy_until[a.machine] = completion;
        self.jobs[a.job] = JobProgress {
            next_op: a.op + 1,
            ready_time: completion,
            location: destination,
        };
        self.scheduled += 1;
        Ok(assignment)
    }

    /// Moves the clock to the earliest event time at which some action is
    /// feasible.
    pub fn advance_clock(&mut self) -> Result<Time, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::Terminal);
        }
        if self.has_feasible() {
            return Err(EnvError::AdvanceWhileFeasible { clock: self.clock });
        }
        let mut events: Vec<Time> = self
            .machine_busy_until
            .iter()
            .copied()
            .chain(self.vehicles.iter().map(|v| v.busy_until))
            .chain(self.jobs.iter().map(|j| j.ready_time))
            .filter(|&t| t > self.clock)
            .collect();
        events.sort_unstable();
        events.dedup();
        for t in events {
            self.clock = t;
            if self.has_feasible() {
                return Ok(t);
            }
        }
        Err(EnvError::Deadlock { clock: self.clock })
    }

    /// Applies `a`, returns the shaped reward and advances the clock to the
    /// next decision point when nothing else is feasible now.
    pub fn apply_action(&mut self, a: ActionTriple) -> Result<StepOutcome, EnvError> {
        let before = self.makespan_lower_bound();
        self.assign(a)?;
        let after = self.makespan_lower_bound();
        let done = self.is_terminal();
        if !done && !self.has_feasible() {
            self.advance_clock()?;
        }
        Ok(StepOutcome {
            reward: before - after,
            done,
            clock: self.clock,
        })
    }

    /// Lower-bound completion estimate of every operation, flat order:
    /// actual completion when scheduled, else predecessor bound plus the mean
    /// processing time over compatible machines. Transport is ignored.
    pub fn completion_bounds(&self) -> Vec<ExactTime> {
        let mut out = Vec::with_capacity(self.inst.num_operations());
        for (i, job) in self.inst.jobs().iter().enumerate() {
            let mut prev = ExactTime::from_integer(0);
            for (j, op) in job.iter().enumerate() {
                let bound = match self.assignment(i, j) {
                    Some(a) => ExactTime::from_integer(a.completion as i128),
                    None => prev + op.mean_processing_time(),
                };
                out.push(bound);
                prev = bound;
            }
        }
        out
    }

    /// `C_max(s_t)`: the largest completion lower bound over all operations.
    pub fn makespan_lower_bound(&self) -> ExactTime {
        self.completion_bounds()
            .into_iter()
            .max()
            .unwrap_or_else(|| ExactTime::from_integer(0))
    }

    /// Makespan of the operations scheduled so far.
    pub fn current_makespan(&self) -> Time {
        self.assignments
            .iter()
            .flatten()
            .map(|a| a.completion)
            .max()
            .unwrap_or(0)
    }

    /// Schedule record of a terminal state.
    pub fn final_schedule(&self) -> Result<Schedule, EnvError> {
        if !self.is_terminal() {
            return Err(EnvError::NotTerminal {
                remaining: self.inst.num_operations() - self.scheduled,
            });
        }
        let mut ops = Vec::with_capacity(self.assignments.len());
        for (flat, a) in self.assignments.iter().enumerate() {
            let (job, op) = self.inst.op_at(flat);
            let a = a.expect("terminal state has every operation assigned");
            ops.push(ScheduledOperation {
                job,
                op,
                machine: a.machine,
                vehicle: a.vehicle,
                vehicle_origin: a.vehicle_origin,
                pickup_location: a.pickup_location,
                off_load_start: a.off_load_start,
                pickup_time: a.pickup_time,
                arrival: a.arrival,
                start: a.start,
                completion: a.completion,
            });
        }
        Ok(Schedule::new(self.inst.name(), ops))
    }
}

/// Everything recorded while driving one episode to completion.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub actions: Vec<ActionTriple>,
    pub rewards: Vec<ExactTime>,
    /// Decision clock at which each action was taken.
    pub clocks: Vec<Time>,
    pub initial_bound: ExactTime,
    pub schedule: Schedule,
}

impl EpisodeRecord {
    pub fn makespan(&self) -> Time {
        self.schedule.makespan()
    }

    pub fn total_reward(&self) -> ExactTime {
        self.rewards
            .iter()
            .fold(ExactTime::from_integer(0), |acc, r| acc + r)
    }
}

/// Runs an episode, asking `choose` for an action at every decision point.
pub fn run_episode<'a, F>(inst: &'a Instance, mut choose: F) -> Result<EpisodeRecord, EnvError>
where
    F: FnMut(&ScheduleState<'a>) -> Result<ActionTriple, EnvError>,
{
    let mut state = ScheduleState::reset(inst);
    let initial_bound = state.makespan_lower_bound();
    let mut actions = Vec::with_capacity(inst.num_operations());
    let mut rewards = Vec::with_capacity(inst.num_operations());
    let mut clocks = Vec::with_capacity(inst.num_operations());
    while !state.is_terminal() {
        let a = choose(&state)?;
        clocks.push(state.clock());
        let outcome = state.apply_action(a)?;
        actions.push(a);
        rewards.push(outcome.reward);
    }
    Ok(EpisodeRecord {
        actions,
        rewards,
        clocks,
        initial_bound,
        schedule: state.final_schedule()?,
    })
}

/// Replays a fixed action sequence from the initial state.
pub fn replay(inst: &Instance, actions: &[ActionTriple]) -> Result<EpisodeRecord, EnvError> {
    let mut iter = actions.iter();
    run_episode(inst, |state| {
        iter.next().copied().ok_or(EnvError::NotTerminal {
            remaining: state.instance().num_operations() - state.num_scheduled(),
        })
    })
}
