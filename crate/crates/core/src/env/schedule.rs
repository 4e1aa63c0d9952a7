use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use super::{machine_location, DEPOT};
use crate::instance::{Instance, Time};

/// One row of a finished schedule. Indices are 0-based; exports print them
/// 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScheduledOperation {
    pub job: usize,
    pub op: usize,
    pub machine: usize,
    pub vehicle: usize,
    pub vehicle_origin: usize,
    pub pickup_location: usize,
    pub off_load_start: Time,
    pub pickup_time: Time,
    pub arrival: Time,
    pub start: Time,
    pub completion: Time,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schedule {
    instance: String,
    ops: Vec<ScheduledOperation>,
    makespan: Time,
}

impl Schedule {
    pub fn new(instance: &str, ops: Vec<ScheduledOperation>) -> Self {
        let makespan = ops.iter().map(|o| o.completion).max().unwrap_or(0);
        Self {
            instance: instance.to_string(),
            ops,
            makespan,
        }
    }

    pub fn instance_name(&self) -> &str {
        &self.instance
    }

    pub fn operations(&self) -> &[ScheduledOperation] {
        &self.ops
    }

    pub fn makespan(&self) -> Time {
        self.makespan
    }

    /// Transport tasks of `vehicle` in departure order.
    pub fn vehicle_tasks(&self, vehicle: usize) -> Vec<&ScheduledOperation> {
        let mut tasks: Vec<_> = self.ops.iter().filter(|o| o.vehicle == vehicle).collect();
        tasks.sort_by_key(|o| (o.off_load_start, o.arrival));
        tasks
    }

    /// Operations processed on `machine` in start order.
    pub fn machine_sequence(&self, machine: usize) -> Vec<&ScheduledOperation> {
        let mut seq: Vec<_> = self.ops.iter().filter(|o| o.machine == machine).collect();
        seq.sort_by_key(|o| (o.start, o.completion));
        seq
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("job,op,machine,vehicle,off_load_start,arrival,start,completion\n");
        for o in &self.ops {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                o.job + 1,
                o.op + 1,
                o.machine + 1,
                o.vehicle + 1,
                o.off_load_start,
                o.arrival,
                o.start,
                o.completion
            );
        }
        out
    }

    /// Gantt chart with one lane per machine followed by one per vehicle.
    pub fn to_svg(&self, num_machines: usize, num_vehicles: usize) -> String {
        const LANE: f64 = 28.0;
        const LEFT: f64 = 60.0;
        const WIDTH: f64 = 900.0;
        let span = self.makespan.max(1) as f64;
        let x = |t: Time| LEFT + WIDTH * t as f64 / span;
        let lanes = num_machines + num_vehicles;
        let height = LANE * lanes as f64 + 40.0;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="monospace" font-size="10">"#,
            LEFT + WIDTH + 20.0
        );
        let _ = writeln!(svg, "<title>{}</title>", escape(&self.instance));
        for lane in 0..lanes {
            let y = 10.0 + LANE * lane as f64;
            let label = if lane < num_machines {
                format!("M{}", lane + 1)
            } else {
                format!("V{}", lane - num_machines + 1)
            };
            let _ = writeln!(
                svg,
                r#"<text x="4" y="{}">{label}</text>"#,
                y + LANE / 2.0
            );
        }
        for o in &self.ops {
            let hue = (o.job * 47) % 360;
            let y = 10.0 + LANE * o.machine as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{y}" width="{:.2}" height="{}" fill="hsl({hue},60%,70%)" stroke="black"><title>O{},{}</title></rect>"#,
                x(o.start),
                x(o.completion) - x(o.start),
                LANE - 4.0,
                o.job + 1,
                o.op + 1
            );
            let y = 10.0 + LANE * (num_machines + o.vehicle) as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{y}" width="{:.2}" height="{}" fill="hsl({hue},60%,85%)" stroke="gray"><title>O{},{} transport</title></rect>"#,
                x(o.off_load_start),
                x(o.arrival) - x(o.off_load_start),
                LANE - 4.0,
                o.job + 1,
                o.op + 1
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{LEFT}" y="{}">makespan {}</text>"#,
            height - 8.0,
            self.makespan
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("schedule lists {found} operations, instance has {expected}")]
    OperationCount { expected: usize, found: usize },
    #[error("O{job},{op} is missing or duplicated")]
    Coverage { job: usize, op: usize },
    #[error("O{job},{op} runs on incompatible machine M{machine}")]
    Incompatible { job: usize, op: usize, machine: usize },
    #[error("O{job},{op} has wrong duration")]
    Duration { job: usize, op: usize },
    #[error("O{job},{op} starts before its predecessor completes")]
    Precedence { job: usize, op: usize },
    #[error("O{job},{op} transport timing is inconsistent: {detail}")]
    Transport { job: usize, op: usize, detail: String },
    #[error("machine M{machine} runs overlapping operations")]
    MachineOverlap { machine: usize },
    #[error("vehicle V{vehicle} performs overlapping transports")]
    VehicleOverlap { vehicle: usize },
    #[error("vehicle V{vehicle} departs from a location it never reached")]
    VehicleTeleport { vehicle: usize },
    #[error("recorded makespan {recorded} differs from latest completion {actual}")]
    Makespan { recorded: Time, actual: Time },
}

/// Every feasibility violation of `schedule` against `inst`. Job, operation,
/// machine and vehicle numbers in the violations are 1-based.
pub fn schedule_violations(inst: &Instance, schedule: &Schedule) -> Vec<Violation> {
    let mut out = Vec::new();
    let ops = schedule.operations();
    if ops.len() != inst.num_operations() {
        out.push(Violation::OperationCount {
            expected: inst.num_operations(),
            found: ops.len(),
        });
        return out;
    }
    let mut by_index: Vec<Option<&ScheduledOperation>> = vec![None; inst.num_operations()];
    for o in ops {
        if o.job >= inst.num_jobs() || o.op >= inst.job_len(o.job) {
            out.push(Violation::Coverage {
                job: o.job + 1,
                op: o.op + 1,
            });
            continue;
        }
        let slot = &mut by_index[inst.op_index(o.job, o.op)];
        if slot.is_some() {
            out.push(Violation::Coverage {
                job: o.job + 1,
                op: o.op + 1,
            });
        }
        *slot = Some(o);
    }
    if !out.is_empty() {
        return out;
    }

    for o in ops {
        let (job, op) = (o.job + 1, o.op + 1);
        match inst.operation(o.job, o.op).processing_time(o.machine) {
            None => out.push(Violation::Incompatible {
                job,
                op,
                machine: o.machine + 1,
            }),
            Some(p) if o.completion != o.start + p => out.push(Violation::Duration { job, op }),
            _ => {}
        }
        let (ready, location) = if o.op == 0 {
            (0, DEPOT)
        } else {
            let prev = by_index[inst.op_index(o.job, o.op - 1)].expect("coverage checked");
            (prev.completion, machine_location(prev.machine))
        };
        if o.start < ready {
            out.push(Violation::Precedence { job, op });
        }
        let transport = |detail: &str| Violation::Transport {
            job,
            op,
            detail: detail.to_string(),
        };
        if o.pickup_location != location {
            out.push(transport("pickup location differs from the product location"));
        }
        if o.pickup_time < ready {
            out.push(transport("product picked up before it was finished"));
        }
        if o.pickup_time != o.off_load_start + inst.travel(o.vehicle_origin, o.pickup_location) {
            out.push(transport("off-load travel time mismatch"));
        }
        if o.arrival
            != o.pickup_time + inst.travel(o.pickup_location, machine_location(o.machine))
        {
            out.push(transport("on-load travel time mismatch"));
        }
        if o.start < o.arrival {
            out.push(transport("processing starts before delivery"));
        }
    }

    for k in 0..inst.num_machines() {
        let seq = schedule.machine_sequence(k);
        if seq.windows(2).any(|w| w[1].start < w[0].completion) {
            out.push(Violation::MachineOverlap { machine: k + 1 });
        }
    }
    for u in 0..inst.num_vehicles() {
        let tasks = schedule.vehicle_tasks(u);
        let mut location = DEPOT;
        let mut free_at = 0;
        let mut overlap = false;
        let mut teleport = false;
        for t in tasks {
            overlap |= t.off_load_start < free_at;
            teleport |= t.vehicle_origin != location;
            location = machine_location(t.machine);
            free_at = t.arrival;
        }
        if overlap {
            out.push(Violation::VehicleOverlap { vehicle: u + 1 });
        }
        if teleport {
            out.push(Violation::VehicleTeleport { vehicle: u + 1 });
        }
    }

    let actual = ops.iter().map(|o| o.completion).max().unwrap_or(0);
    if actual != schedule.makespan() {
        out.push(Violation::Makespan {
            recorded: schedule.makespan(),
            actual,
        });
    }
    out
}

/// First violation, if any.
pub fn check_schedule(inst: &Instance, schedule: &Schedule) -> Result<(), Violation> {
    match schedule_violations(inst, schedule).into_iter().next() {
        Some(v) => Err(v),
        None => Ok(()),
    }
}
