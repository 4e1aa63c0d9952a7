use rand::SeedableRng;

use super::*;
use crate::env::tests::two_by_two;
use crate::instance::{generate_instance, Operation};
use crate::kernel::check::check_parameter_gradient;
use crate::kernel::ParamGrads;
use crate::model::ModelConfig;
use crate::rng::{stream_rng, Stream};

fn tiny(seed: u64) -> Policy<f64> {
    Policy::new(ModelConfig::tiny(), seed).unwrap()
}

fn first_step(policy: &Policy<f64>, inst: &Instance, glimpse: Tensor2<f64>) -> DecodedAction {
    let state = ScheduleState::reset(inst);
    let mut g = Graph::new();
    let f = featurize::<f64>(&state);
    let e = encode(&mut g, policy, &f).unwrap();
    let gl = g.constant(glimpse);
    let mut rng = Rng::seed_from_u64(0);
    decode(&mut g, policy, &e, &state, gl, DecodeMode::Greedy, &mut rng, None)
        .unwrap()
        .0
}

#[test]
fn single_candidate_has_probability_one() {
    let inst = Instance::new(
        "1x1x1",
        1,
        1,
        vec![vec![Operation::new(vec![(0, 5)])]],
        vec![vec![0, 3], vec![3, 0]],
    )
    .unwrap();
    let p = tiny(1);
    for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
        let mut rng = Rng::seed_from_u64(4);
        let t = rollout(&inst, &p, mode, &mut rng).unwrap();
        assert_eq!(t.actions, vec![ActionTriple::new(0, 0, 0, 0)]);
        for lp in t.stage_log_probs[0] {
            assert!(lp.abs() < 1e-12);
        }
    }
}

#[test]
fn logits_are_clipped() {
    let mut p = tiny(2);
    // blow up the pointer projections so tanh saturates
    for st in p.ids.stages.clone() {
        for id in [st.ptr_q, st.ptr_k] {
            for x in p.store.value_mut(id).data_mut() {
                *x *= 1e3;
            }
        }
    }
    let inst = generate_instance(3, 2, 2, 5).unwrap();
    let d = first_step(&p, &inst, Tensor2::zeros(1, p.cfg.d_h));
    let all = d.logits.op.iter().chain(&d.logits.machine).chain(&d.logits.vehicle);
    for x in all.flatten() {
        assert!(x.abs() <= p.cfg.clip + 1e-12, "{x}");
    }
}

#[test]
fn greedy_rollout_is_deterministic_and_rng_free() {
    let inst = generate_instance(3, 3, 2, 11).unwrap();
    let p = tiny(3);
    let a = rollout(&inst, &p, DecodeMode::Greedy, &mut Rng::seed_from_u64(1)).unwrap();
    let b = rollout(&inst, &p, DecodeMode::Greedy, &mut Rng::seed_from_u64(99)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sampling_reproduces_under_the_same_stream() {
    let inst = generate_instance(3, 3, 2, 11).unwrap();
    let p = tiny(3);
    let run = || rollout(&inst, &p, DecodeMode::Sample, &mut stream_rng(7, Stream::Sampling, 0)).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn joint_probability_is_product_of_stages() {
    let inst = generate_instance(3, 3, 2, 21).unwrap();
    let p = tiny(4);
    let d = first_step(&p, &inst, Tensor2::zeros(1, p.cfg.d_h));
    let a = d.action;
    let o = inst.op_index(a.job, a.op);
    // independent softmax over the reported logits
    let prob = |logits: &[Option<f64>], pick: usize| {
        let z: f64 = logits.iter().flatten().map(|x| x.exp()).sum();
        logits[pick].unwrap().exp() / z
    };
    let expect = prob(&d.logits.op, o) * prob(&d.logits.machine, a.machine) * prob(&d.logits.vehicle, a.vehicle);
    assert!((d.log_prob.exp() - expect).abs() < 1e-12);
    let sum: f64 = d.stage_log_probs.iter().sum();
    assert!((sum - d.log_prob).abs() < 1e-12);
}

#[test]
fn rollout_length_and_telescoping_return() {
    for seed in 0..4 {
        let inst = generate_instance(4, 3, 2, seed).unwrap();
        let p = tiny(seed);
        let mut rng = stream_rng(seed, Stream::Sampling, 0);
        let t = rollout(&inst, &p, DecodeMode::Sample, &mut rng).unwrap();
        assert_eq!(t.actions.len(), inst.num_operations());
        assert_eq!(
            t.total_return(),
            t.initial_bound - ExactTime::from_integer(t.makespan as i128)
        );
        crate::env::check_schedule(&inst, &t.schedule).unwrap();
    }
}

#[test]
fn chosen_actions_are_always_feasible() {
    let inst = generate_instance(4, 3, 3, 8).unwrap();
    let p = tiny(8);
    let mut rng = stream_rng(8, Stream::Sampling, 0);
    let t = rollout(&inst, &p, DecodeMode::Sample, &mut rng).unwrap();
    let mut s = ScheduleState::reset(&inst);
    for a in &t.actions {
        assert!(s.feasible_actions().unwrap().contains(a));
        s.apply_action(*a).unwrap();
    }
}

#[test]
fn masks_match_feasible_set() {
    let inst = generate_instance(3, 3, 2, 13).unwrap();
    let p = tiny(5);
    let state = ScheduleState::reset(&inst);
    let d = first_step(&p, &inst, Tensor2::zeros(1, p.cfg.d_h));
    let feasible = state.feasible_actions().unwrap();
    for (o, x) in d.logits.op.iter().enumerate() {
        let (j, op) = inst.op_at(o);
        assert_eq!(x.is_some(), feasible.iter().any(|a| a.job == j && a.op == op));
    }
    let a = d.action;
    for (k, x) in d.logits.machine.iter().enumerate() {
        assert_eq!(x.is_some(), feasible.iter().any(|b| b.job == a.job && b.machine == k));
    }
    for (u, x) in d.logits.vehicle.iter().enumerate() {
        assert_eq!(
            x.is_some(),
            feasible.iter().any(|b| b.job == a.job && b.machine == a.machine && b.vehicle == u)
        );
    }
}

#[test]
fn glimpse_slot_feeds_the_operation_stage() {
    let inst = generate_instance(3, 2, 2, 3).unwrap();
    let p = tiny(6);
    let zero = first_step(&p, &inst, Tensor2::zeros(1, p.cfg.d_h));
    let mut rng = Rng::seed_from_u64(0);
    let from_rollout = rollout(&inst, &p, DecodeMode::Greedy, &mut rng).unwrap();
    assert_eq!(zero.action, from_rollout.actions[0]);
    assert!((zero.log_prob - from_rollout.log_probs[0]).abs() < 1e-12);
    let bumped = first_step(&p, &inst, Tensor2::filled(1, p.cfg.d_h, 0.5));
    assert_ne!(zero.logits.op, bumped.logits.op);
}

#[test]
fn greedy_is_shift_invariant_and_breaks_ties_low() {
    let logits = vec![Some(1.0), None, Some(3.0), Some(3.0), Some(-2.0)];
    assert_eq!(greedy_index(&logits), Some(2));
    let shifted: Vec<_> = logits.iter().map(|x| x.map(|x| x + 17.5)).collect();
    assert_eq!(greedy_index(&shifted), Some(2));
    let lp = masked_log_softmax(&logits);
    let lps = masked_log_softmax(&shifted);
    for (a, b) in lp.iter().zip(&lps) {
        match (a, b) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (None, None) => {}
            _ => panic!("mask changed"),
        }
    }
    assert_eq!(greedy_index(&[None, None]), None);
}

#[test]
fn tape_rollout_matches_stepwise_rollout() {
    let inst = generate_instance(3, 3, 2, 17).unwrap();
    let p = tiny(9);
    let a = rollout(&inst, &p, DecodeMode::Sample, &mut stream_rng(1, Stream::Sampling, 0)).unwrap();
    let mut g = Graph::new();
    let (b, total) =
        rollout_on_tape(&mut g, &inst, &p, DecodeMode::Sample, &mut stream_rng(1, Stream::Sampling, 0), None)
            .unwrap();
    assert_eq!(a.actions, b.actions);
    for (x, y) in a.log_probs.iter().zip(&b.log_probs) {
        assert!((x - y).abs() < 1e-10);
    }
    assert!((g.value(total).get(0, 0) - a.total_log_prob()).abs() < 1e-10);
}

#[test]
fn forced_actions_are_scored_and_checked() {
    let inst = two_by_two();
    let p = tiny(10);
    let greedy = rollout(&inst, &p, DecodeMode::Greedy, &mut Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let (t, _) = rollout_on_tape(
        &mut g,
        &inst,
        &p,
        DecodeMode::Sample,
        &mut Rng::seed_from_u64(3),
        Some(&greedy.actions),
    )
    .unwrap();
    assert_eq!(t.actions, greedy.actions);
    assert!((t.total_log_prob() - greedy.total_log_prob()).abs() < 1e-10);

    let mut g = Graph::new();
    let bad = [ActionTriple::new(0, 1, 1, 0)];
    let err = rollout_on_tape(&mut g, &inst, &p, DecodeMode::Greedy, &mut Rng::seed_from_u64(0), Some(&bad));
    assert!(matches!(err, Err(PolicyError::ForcedInfeasible(_))));
    let mut g = Graph::new();
    let short = &greedy.actions[..1];
    let err = rollout_on_tape(&mut g, &inst, &p, DecodeMode::Greedy, &mut Rng::seed_from_u64(0), Some(short));
    assert!(matches!(err, Err(PolicyError::ForcedTooShort)));
}

#[test]
fn full_policy_gradient_matches_finite_differences() {
    let inst = two_by_two();
    let p = tiny(12);
    let actions = rollout(&inst, &p, DecodeMode::Sample, &mut stream_rng(12, Stream::Sampling, 0))
        .unwrap()
        .actions;
    let advantage = 0.7;
    let mut g = Graph::new();
    let (_, total) =
        rollout_on_tape(&mut g, &inst, &p, DecodeMode::Greedy, &mut Rng::seed_from_u64(0), Some(&actions))
            .unwrap();
    let mut grads = ParamGrads::zeros_like(&p.store);
    g.backward_into(total, -advantage, &mut grads).unwrap();
    let report = check_parameter_gradient(&p.store, &grads, 1e-6, |store| {
        let q = Policy {
            cfg: p.cfg,
            store: store.clone(),
            ids: p.ids.clone(),
        };
        let mut g = Graph::new();
        let (t, _) =
            rollout_on_tape(&mut g, &inst, &q, DecodeMode::Greedy, &mut Rng::seed_from_u64(0), Some(&actions))
                .map_err(|e| KernelError::Checkpoint(e.to_string()))?;
        Ok(-advantage * t.total_log_prob())
    })
    .unwrap();
    assert!(report.max_relative_error <= 1e-3, "{report:?}");
}

#[test]
fn single_precision_policy_schedules_feasibly() {
    let inst = generate_instance(4, 3, 2, 8).unwrap();
    let p32 = Policy::<f32>::new(ModelConfig::tiny(), 2).unwrap();
    for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
        let t = rollout(&inst, &p32, mode, &mut stream_rng(2, Stream::Sampling, 0)).unwrap();
        crate::env::check_schedule(&inst, &t.schedule).unwrap();
        assert!(t.log_probs.iter().all(|lp| lp.is_finite() && *lp <= 1e-6));
    }
    let (t64, t32) = (
        rollout(&inst, &tiny(2), DecodeMode::Greedy, &mut stream_rng(0, Stream::Sampling, 0)).unwrap(),
        rollout(&inst, &p32, DecodeMode::Greedy, &mut stream_rng(0, Stream::Sampling, 0)).unwrap(),
    );
    assert_eq!(t64.actions.len(), t32.actions.len());
}
