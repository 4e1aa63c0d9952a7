//! Raw features and dynamic adjacency of the heterogeneous graph built from a
//! schedule state.
//!
//! Time-valued features are divided by [`Instance::time_scale`]. Counts are
//! left raw.

use num_traits::ToPrimitive;
use serde::Serialize;

use crate::env::{machine_location, ScheduleState};
use crate::instance::{ExactTime, Instance};
use crate::kernel::Tensor2;
use crate::num::Scalar;

pub const OP_FEATURES: usize = 7;
pub const MACHINE_FEATURES: usize = 4;
pub const VEHICLE_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeteroGraphFeatures<S> {
    /// `|O| x 7`: status, machine neighbours, vehicle neighbours, processing
    /// time, unscheduled operations left in the job, job completion, start.
    pub op_feats: Tensor2<S>,
    /// `m x 4`: status, operation neighbours, available time, utilization.
    pub mach_feats: Tensor2<S>,
    /// `v x 4`: status, operation neighbours, available time, location.
    pub veh_feats: Tensor2<S>,
    /// `|O| x m` processing times; zero where incompatible.
    pub edge_om: Tensor2<S>,
    /// Row-major `|O| x m`.
    pub mask_om: Vec<bool>,
    /// `|O| x v` off-load travel from each vehicle to the job's product.
    pub edge_ov: Tensor2<S>,
    pub mask_ov: Vec<bool>,
    /// `m x m` loaded travel between machines; every pair is connected.
    pub edge_mm: Tensor2<S>,
    pub scale: f64,
}

impl<S: Scalar> HeteroGraphFeatures<S> {
    pub fn num_ops(&self) -> usize {
        self.op_feats.rows()
    }

    pub fn num_machines(&self) -> usize {
        self.mach_feats.rows()
    }

    pub fn num_vehicles(&self) -> usize {
        self.veh_feats.rows()
    }

    /// Pretty JSON of every matrix and mask.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("features serialize")
    }

    pub fn neighbor_counts(&self) -> NeighborCounts {
        counts_from_masks(&self.mask_om, &self.mask_ov, self.num_ops(), self.num_machines(), self.num_vehicles())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeighborCounts {
    pub op_machines: Vec<usize>,
    pub op_vehicles: Vec<usize>,
    pub machine_ops: Vec<usize>,
    pub vehicle_ops: Vec<usize>,
}

fn counts_from_masks(om: &[bool], ov: &[bool], n_ops: usize, m: usize, v: usize) -> NeighborCounts {
    let mut c = NeighborCounts {
        op_machines: vec![0; n_ops],
        op_vehicles: vec![0; n_ops],
        machine_ops: vec![0; m],
        vehicle_ops: vec![0; v],
    };
    for o in 0..n_ops {
        for k in 0..m {
            if om[o * m + k] {
                c.op_machines[o] += 1;
                c.machine_ops[k] += 1;
            }
        }
        for u in 0..v {
            if ov[o * v + u] {
                c.op_vehicles[o] += 1;
                c.vehicle_ops[u] += 1;
            }
        }
    }
    c
}

/// Dynamic O–M and O–V masks.
///
/// An unscheduled operation links to every idle compatible machine and every
/// idle vehicle. A scheduled operation keeps only its chosen machine and
/// vehicle until it completes, after which its rows are empty.
pub fn edge_masks(state: &ScheduleState) -> (Vec<bool>, Vec<bool>) {
    let inst = state.instance();
    let (m, v) = (inst.num_machines(), inst.num_vehicles());
    let n_ops = inst.num_operations();
    let mut om = vec![false; n_ops * m];
    let mut ov = vec![false; n_ops * v];
    for o in 0..n_ops {
        let (i, j) = inst.op_at(o);
        match state.assignment_flat(o) {
            Some(a) if a.completion > state.clock() => {
                om[o * m + a.machine] = true;
                ov[o * v + a.vehicle] = true;
            }
            Some(_) => {}
            None => {
                for &(k, _) in inst.operation(i, j).options() {
                    om[o * m + k] = state.machine_idle(k);
                }
                for u in 0..v {
                    ov[o * v + u] = state.vehicle_idle(u);
                }
            }
        }
    }
    (om, ov)
}

pub fn neighbor_counts(state: &ScheduleState) -> NeighborCounts {
    let inst = state.instance();
    let (om, ov) = edge_masks(state);
    counts_from_masks(&om, &ov, inst.num_operations(), inst.num_machines(), inst.num_vehicles())
}

fn ratio_f64(x: ExactTime) -> f64 {
    x.to_f64().expect("bounded rational")
}

/// Feature tensors of `state`; a pure function of the state.
pub fn featurize<S: Scalar>(state: &ScheduleState) -> HeteroGraphFeatures<S> {
    let inst: &Instance = state.instance();
    let (m, v) = (inst.num_machines(), inst.num_vehicles());
    let n_ops = inst.num_operations();
    let scale = inst.time_scale() as f64;
    let t = |x: f64| S::of(x / scale);
    let (mask_om, mask_ov) = edge_masks(state);
    let counts = counts_from_masks(&mask_om, &mask_ov, n_ops, m, v);
    let bounds = state.completion_bounds();

    let mut op_feats = Tensor2::zeros(n_ops, 7);
    let mut edge_om = Tensor2::zeros(n_ops, m);
    let mut edge_ov = Tensor2::zeros(n_ops, v);
    for (i, job) in inst.jobs().iter().enumerate() {
        let first = inst.op_index(i, 0);
        let job_end = ratio_f64(bounds[first + job.len() - 1]);
        let unscheduled = job.len() - (0..job.len()).filter(|&j| state.assignment(i, j).is_some()).count();
        for (j, op) in job.iter().enumerate() {
            let o = first + j;
            let (status, proc, start) = match state.assignment(i, j) {
                Some(a) => (1.0, (a.completion - a.start) as f64, a.start as f64),
                None => {
                    let prev = if j == 0 { 0.0 } else { ratio_f64(bounds[o - 1]) };
                    (0.0, ratio_f64(op.mean_processing_time()), prev)
                }
            };
            let row = [
                S::of(status),
                S::of(counts.op_machines[o] as f64),
                S::of(counts.op_vehicles[o] as f64),
                t(proc),
                S::of(unscheduled as f64),
                t(job_end),
                t(start),
            ];
            op_feats.row_mut(o).copy_from_slice(&row);
            for &(k, p) in op.options() {
                edge_om.set(o, k, t(p as f64));
            }
            for u in 0..v {
                edge_ov.set(o, u, t(state.off_load_time(i, u) as f64));
            }
        }
    }

    let mach_feats = Tensor2::from_fn(m, 4, |k, c| match c {
        0 => S::of(if state.machine_idle(k) { 0.0 } else { 1.0 }),
        1 => S::of(counts.machine_ops[k] as f64),
        2 => t(state.machine_busy_until(k) as f64),
        _ => S::of(state.machine_utilization(k)),
    });
    let veh_feats = Tensor2::from_fn(v, 4, |u, c| match c {
        0 => S::of(if state.vehicle_idle(u) { 0.0 } else { 1.0 }),
        1 => S::of(counts.vehicle_ops[u] as f64),
        2 => t(state.vehicle_busy_until(u) as f64),
        _ => S::of(state.vehicle_location(u) as f64 / m as f64),
    });
    let edge_mm = Tensor2::from_fn(m, m, |a, b| t(inst.travel(machine_location(a), machine_location(b)) as f64));

    HeteroGraphFeatures {
        op_feats,
        mach_feats,
        veh_feats,
        edge_om,
        mask_om,
        edge_ov,
        mask_ov,
        edge_mm,
        scale,
    }
}
