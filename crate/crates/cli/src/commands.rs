use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use hgs_core::baselines::{
    exhaustive_optimal, ga_solve, solve_random, solve_rule, GaConfig, Rule, DEFAULT_EXHAUSTIVE_CAP,
};
use hgs_core::decoder::{rollout, DecodeMode};
use hgs_core::env::Schedule;
use hgs_core::model::Policy;
use hgs_core::rng::{derive_seed, stream_rng, Stream};
use hgs_core::training::{gap, train_with_progress, TrainConfig, TrainLog};
use hgs_core::{generate_instance, load_instance, write_instance, Instance, Time};
use rayon::prelude::*;
use serde_json::json;

use crate::error::CliError;
use crate::manifest::{manifest_path_for, RunManifest};
use crate::{EvalArgs, GaArgs, GenerateArgs, SolveArgs, TrainArgs};

pub const RESULTS_HEADER: &str = "instance,method,makespan,runtime_s,gap_pct";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Hgs,
    Rule(Rule),
    Ga,
    Random,
    Optimal,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Hgs => "hgs",
            Method::Rule(r) => r.name(),
            Method::Ga => "ga",
            Method::Random => "random",
            Method::Optimal => "optimal",
        }
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hgs" => Ok(Method::Hgs),
            "ga" => Ok(Method::Ga),
            "random" => Ok(Method::Random),
            "optimal" => Ok(Method::Optimal),
            other => other.parse::<Rule>().map(Method::Rule).map_err(|_| {
                CliError::new(
                    "method",
                    format!("unknown method {s:?}; expected hgs, spt, lpt, fifo, ga, random or optimal"),
                )
            }),
        }
    }
}

fn ga_config(args: &GaArgs, seed: u64, index: u64) -> GaConfig {
    GaConfig {
        population: args.ga_population,
        generations: args.ga_generations,
        seed: derive_seed(seed, Stream::Genetic, index),
        time_budget_s: args.ga_time_budget,
        ..GaConfig::default()
    }
}

fn load_policy(checkpoint: Option<&Path>) -> Result<Policy<f64>, CliError> {
    let path = checkpoint.ok_or_else(|| CliError::new("checkpoint", "method hgs requires --checkpoint"))?;
    Policy::load(path).map_err(|e| CliError::new("checkpoint", format!("{}: {e}", path.display())))
}

/// Runs one method on one instance, returning its schedule.
fn run_method(
    method: Method,
    inst: &Instance,
    policy: Option<&Policy<f64>>,
    ga: &GaArgs,
    seed: u64,
    index: u64,
) -> Result<Schedule, CliError> {
    let solver = |e: &dyn std::fmt::Display| CliError::new("solver", format!("{} on {}: {e}", method.name(), inst.name()));
    match method {
        Method::Hgs => {
            let policy = policy.expect("policy loaded when hgs is requested");
            let mut rng = stream_rng(seed, Stream::Sampling, index);
            rollout(inst, policy, DecodeMode::Greedy, &mut rng)
                .map(|t| t.schedule)
                .map_err(|e| solver(&e))
        }
        Method::Rule(r) => solve_rule(inst, r).map(|r| r.schedule).map_err(|e| solver(&e)),
        Method::Ga => ga_solve(inst, &ga_config(ga, seed, index))
            .map(|r| r.record.schedule)
            .map_err(|e| solver(&e)),
        Method::Random => solve_random(inst, seed, index).map(|r| r.schedule).map_err(|e| solver(&e)),
        Method::Optimal => exhaustive_optimal(inst, DEFAULT_EXHAUSTIVE_CAP)
            .and_then(|o| Ok(hgs_core::env::replay(inst, &o.actions)?.schedule))
            .map_err(|e| solver(&e)),
    }
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let mut manifest = RunManifest::new(
        "generate",
        json!({ "n": args.n, "m": args.m, "v": args.v, "count": args.count, "out_dir": args.out_dir }),
        args.seed,
    );
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64);
        let inst = generate_instance(args.n, args.m, args.v, seed).map_err(|e| CliError::new("instance", e))?;
        let path = args
            .out_dir
            .join(format!("fjspt-{}x{}x{}-{:04}.json", args.n, args.m, args.v, i));
        write_instance(&inst, &path).map_err(|e| CliError::io(&path, e))?;
        manifest.outputs.push(path);
    }
    manifest.write(&args.out_dir.join("manifest.json"), started)?;
    println!("wrote {} instances to {}", args.count, args.out_dir.display());
    Ok(())
}

/// Parses a training config, reporting the path of an offending field.
pub fn parse_train_config(text: &str, seed: Option<u64>, env_seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::new("config", format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::new("config", "top level must be an object"))?;
    match (seed, obj.contains_key("seed"), env_seed) {
        (Some(s), _, _) | (None, false, Some(s)) => {
            obj.insert("seed".into(), json!(s));
        }
        _ => {}
    }
    let cfg: TrainConfig = serde_path_to_error::deserialize(&value)
        .map_err(|e| CliError::new("config", format!("at {}: {}", e.path(), e.inner())))?;
    cfg.validate().map_err(|e| CliError::new("config", e))?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let text = std::fs::read_to_string(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let env_seed = match std::env::var("HGS_SEED") {
        Ok(s) => Some(
            s.parse::<u64>()
                .map_err(|e| CliError::new("config", format!("HGS_SEED={s:?}: {e}")))?,
        ),
        Err(_) => None,
    };
    let mut cfg = parse_train_config(&text, args.seed, env_seed)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let checkpoint = cfg
        .checkpoint
        .get_or_insert_with(|| args.out_dir.join("policy.json"))
        .clone();
    let log = cfg.log.get_or_insert_with(|| args.out_dir.join("train_log.csv")).clone();
    for p in [&checkpoint, &log] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    println!("{}", TrainLog::HEADER);
    let out = train_with_progress::<f64>(&cfg, |r| {
        println!(
            "{},{},{},{},{:.3}",
            r.episode, r.mean_greedy_makespan, r.mean_sampled_makespan, r.grad_norm, r.wallclock
        )
    })
    .map_err(|e| CliError::new("train", e))?;
    out.policy.save(&checkpoint).map_err(|e| CliError::io(&checkpoint, e))?;
    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&cfg).expect("config serialises"),
        cfg.seed,
    );
    manifest.outputs = vec![checkpoint.clone(), log];
    manifest.write(&manifest_path_for(&checkpoint), started)
}

/// Instance files of a directory in name order, skipping manifests.
fn instance_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.contains("manifest")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::new("instance", format!("no instance files in {}", dir.display())));
    }
    Ok(files)
}

struct Cell {
    makespan: Time,
    runtime_s: f64,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(CliError::new("method", "no methods requested"));
    }
    let policy = if methods.contains(&Method::Hgs) {
        Some(load_policy(args.checkpoint.as_deref())?)
    } else {
        None
    };
    let files = instance_files(&args.instances)?;
    let instances: Vec<Instance> = files
        .iter()
        .map(|p| load_instance(p).map_err(|e| CliError::new("instance", format!("{}: {e}", p.display()))))
        .collect::<Result<_, _>>()?;

    let results: Vec<Vec<Cell>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            methods
                .iter()
                .map(|&m| {
                    let t = Instant::now();
                    let s = run_method(m, inst, policy.as_ref(), &args.ga, args.seed, i as u64)?;
                    Ok(Cell {
                        makespan: s.makespan(),
                        runtime_s: t.elapsed().as_secs_f64(),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<_, _>>()?;

    let mut csv = format!("{RESULTS_HEADER}\n");
    // per size label: per method (makespan, runtime, gap) sums and count
    let mut sizes: Vec<(String, Vec<[f64; 3]>, usize)> = Vec::new();
    for (inst, cells) in instances.iter().zip(&results) {
        let best = cells.iter().map(|c| c.makespan).min().expect("methods nonempty");
        let label = inst.size_label();
        let idx = match sizes.iter().position(|(l, _, _)| *l == label) {
            Some(i) => i,
            None => {
                sizes.push((label, vec![[0.0; 3]; methods.len()], 0));
                sizes.len() - 1
            }
        };
        sizes[idx].2 += 1;
        for (j, (m, c)) in methods.iter().zip(cells).enumerate() {
            let g = gap(c.makespan as f64, best as f64).map_err(|e| CliError::new("solver", e))?;
            let _ = writeln!(csv, "{},{},{},{:.6},{:.4}", inst.name(), m.name(), c.makespan, c.runtime_s, g);
            let acc = &mut sizes[idx].1[j];
            acc[0] += c.makespan as f64;
            acc[1] += c.runtime_s;
            acc[2] += g;
        }
    }
    for (label, sums, count) in &sizes {
        let n = *count as f64;
        for (m, s) in methods.iter().zip(sums) {
            let _ = writeln!(
                csv,
                "mean[{label}],{},{:.4},{:.6},{:.4}",
                m.name(),
                s[0] / n,
                s[1] / n,
                s[2] / n
            );
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(&args.out, &csv).map_err(|e| CliError::io(&args.out, e))?;
    let mut manifest = RunManifest::new(
        "eval",
        json!({
            "checkpoint": args.checkpoint,
            "instances": args.instances,
            "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "ga_population": args.ga.ga_population,
            "ga_generations": args.ga.ga_generations,
            "ga_time_budget": args.ga.ga_time_budget,
        }),
        args.seed,
    );
    manifest.outputs = vec![args.out.clone()];
    manifest.write(&manifest_path_for(&args.out), started)?;
    print!("{csv}");
    Ok(())
}

pub fn solve(args: &SolveArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let method: Method = args.method.parse()?;
    let inst = load_instance(&args.instance)
        .map_err(|e| CliError::new("instance", format!("{}: {e}", args.instance.display())))?;
    let policy = if method == Method::Hgs {
        Some(load_policy(args.checkpoint.as_deref())?)
    } else {
        None
    };
    let schedule = run_method(method, &inst, policy.as_ref(), &args.ga, args.seed, 0)?;
    let svg = args.out.extension().is_some_and(|x| x.eq_ignore_ascii_case("svg"));
    let text = if svg {
        schedule.to_svg(inst.num_machines(), inst.num_vehicles())
    } else {
        schedule.to_csv()
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(&args.out, text).map_err(|e| CliError::io(&args.out, e))?;
    let mut manifest = RunManifest::new(
        "solve",
        json!({ "instance": args.instance, "method": method.name(), "checkpoint": args.checkpoint }),
        args.seed,
    );
    manifest.outputs = vec![args.out.clone()];
    manifest.write(&manifest_path_for(&args.out), started)?;
    println!("{} {} makespan {}", inst.name(), method.name(), schedule.makespan());
    Ok(())
}
