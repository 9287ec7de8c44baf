mod common;

use anchorinv_core::anchors::SelectionStrategy;
use anchorinv_core::data::{sample_few_shot, Dataset};
use anchorinv_core::inversion::InversionConfig;
use anchorinv_core::model::{checksum, compute_prototypes, PARAM_NAMES};
use anchorinv_core::trainer::*;
use anchorinv_core::CoreError;

fn small_config() -> FscilConfig {
    FscilConfig {
        finetune: FinetuneConfig {
            iterations: 10,
            lr: 3e-3,
            class_weighted: true,
            ..Default::default()
        },
        inversion: InversionConfig {
            iterations: 20,
            ..Default::default()
        },
        base_anchors: SelectionStrategy::RandomSample,
        base_anchors_per_class: 3,
        session_anchors: SelectionStrategy::FullSet,
        session_anchors_per_class: 2,
        replay_policy: ReplayPolicy::Accumulate,
        real_per_class: 3,
    }
}

#[test]
fn frozen_tensors_unchanged_across_seeds() {
    let base = common::tiny_state(&[0, 1], 4);
    let replay = common::tiny_data(&[0, 1], 3, 10);
    for seed in 0..20u64 {
        let new = common::tiny_data(&[2], 4, 100 + seed);
        let cfg = FinetuneConfig {
            iterations: 15,
            lr: 1e-2,
            seed,
            prototype_init: seed % 2 == 0,
            ..Default::default()
        };
        let (after, log) = finetune_session(&base, &replay, &new, &cfg).unwrap();
        assert_eq!(log.loss.len(), 15);
        for name in ["temporal.weight", "temporal.bias"] {
            assert_eq!(checksum(base.backbone.param(name).unwrap()), checksum(after.backbone.param(name).unwrap()));
        }
        for k in [0, 1] {
            assert_eq!(checksum(&base.phi[&k]), checksum(&after.phi[&k]), "seed {seed}: phi.{k}");
        }
        assert_ne!(
            checksum(base.backbone.param("spatial.weight").unwrap()),
            checksum(after.backbone.param("spatial.weight").unwrap())
        );
        let expected = frozen_checksums(&base, &cfg.trainable, &[2]);
        let got = frozen_checksums(&after, &cfg.trainable, &[2]);
        assert_eq!(expected, got);
        assert!(!got.contains_key("phi.2"));
    }
}

#[test]
fn every_tensor_frozen_when_only_new_classes_train() {
    let base = common::tiny_state(&[0, 1], 4);
    let new = common::tiny_data(&[2], 4, 7);
    let cfg = FinetuneConfig {
        trainable: TrainableSet {
            backbone: vec![],
            new_classes: true,
        },
        iterations: 10,
        lr: 1e-2,
        ..Default::default()
    };
    let (after, _) = finetune_session(&base, &Dataset::default(), &new, &cfg).unwrap();
    for name in PARAM_NAMES {
        assert_eq!(base.backbone.param(name), after.backbone.param(name));
    }
}

#[test]
fn lambda_zero_ignores_replay() {
    let state = common::tiny_state(&[0, 1, 2], 2);
    let new = common::tiny_data(&[2], 4, 1);
    let replay = common::tiny_data(&[0, 1], 4, 2);
    let only_new = composite_loss(&state, &Dataset::default(), &new, 1.0).unwrap();
    assert_eq!(composite_loss(&state, &replay, &new, 0.0).unwrap(), only_new);
    let only_old = composite_loss(&state, &replay, &Dataset::default(), 1.0).unwrap();
    let both = composite_loss(&state, &replay, &new, 2.5).unwrap();
    assert!((both - (only_new + 2.5 * only_old)).abs() < 1e-9);
}

#[test]
fn duplicate_and_unknown_classes_rejected() {
    let base = common::tiny_state(&[0, 1], 4);
    let dup = common::tiny_data(&[1], 2, 3);
    assert!(matches!(
        finetune_session(&base, &Dataset::default(), &dup, &FinetuneConfig::default()),
        Err(CoreError::DuplicateClass(1))
    ));
    let new = common::tiny_data(&[2], 2, 3);
    let stray = common::tiny_data(&[9], 2, 3);
    assert!(matches!(
        finetune_session(&base, &stray, &new, &FinetuneConfig::default()),
        Err(CoreError::UnknownClass(9))
    ));
}

#[test]
fn protonet_adds_prototypes_only() {
    let base = common::tiny_state(&[0, 1], 4);
    let new = common::tiny_data(&[2, 3], 3, 5);
    let out = adapt_protonet(&base, &new).unwrap();
    assert_eq!(out.backbone, base.backbone);
    assert_eq!(out.phi[&0], base.phi[&0]);
    let mut oracle = base.clone();
    compute_prototypes(&mut oracle, &new, &[2, 3]).unwrap();
    assert_eq!(out.phi, oracle.phi);
}

fn teen_oracle(p: &[f64], base: &[Vec<f64>], tau: f64, alpha: f64) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let w: Vec<f64> = base
        .iter()
        .map(|b| (tau * p.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(p) * norm(b))).exp())
        .collect();
    let z: f64 = w.iter().sum();
    (0..p.len())
        .map(|d| alpha * p[d] + (1.0 - alpha) * base.iter().zip(&w).map(|(b, wi)| wi / z * b[d]).sum::<f64>())
        .collect()
}

#[test]
fn teen_matches_calibration_formula() {
    let base = common::tiny_state(&[0, 1, 2], 8);
    let new = common::tiny_data(&[5], 3, 2);
    let proto = adapt_protonet(&base, &new).unwrap().phi[&5].data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let bases: Vec<Vec<f64>> = [0, 1, 2]
        .iter()
        .map(|k| base.phi[k].data().iter().map(|&v| v as f64).collect())
        .collect();
    for (tau, alpha) in [(32.0, 0.5), (1.0, 0.2), (16.0, 0.9)] {
        let out = adapt_teen(&base, &new, &[0, 1, 2], tau, alpha).unwrap();
        let oracle = teen_oracle(&proto, &bases, tau, alpha);
        for (a, b) in out.phi[&5].data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5, "tau {tau} alpha {alpha}");
        }
    }
    let unchanged = adapt_teen(&base, &new, &[0, 1, 2], 32.0, 1.0).unwrap();
    assert_eq!(unchanged.phi[&5].data().iter().map(|&v| v as f64).collect::<Vec<_>>(), proto);
    assert!(adapt_teen(&base, &new, &[0], 0.0, 0.5).is_err());
}

#[test]
fn cycling_repeats_anchors_to_count() {
    let d = common::desk();
    let cfg = FscilConfig {
        base_anchors: SelectionStrategy::KMeansCentroids(2),
        base_anchors_per_class: 2,
        ..small_config()
    };
    let set = select_base_anchors(&d.state, &d.split.base, &cfg, 5).unwrap();
    assert_eq!(set.len(), 4);
    let cycled = cycle_anchors(&set, 5);
    assert_eq!(cycled.len(), 10);
    let class0: Vec<_> = cycled.anchors.iter().filter(|a| a.class == 0).collect();
    assert_eq!(class0[0], class0[2]);
    assert_eq!(class0[1], class0[3]);
    assert_eq!(cycle_anchors(&set, 1), set);
}

#[test]
fn session_feed_serves_in_order_once() {
    let sets = vec![common::tiny_data(&[2], 1, 1), common::tiny_data(&[3], 1, 1)];
    let mut feed = SessionFeed::new(sets.clone());
    assert_eq!(feed.next_session(), Some((1, sets[0].clone())));
    assert_eq!(feed.next_session(), Some((2, sets[1].clone())));
    assert_eq!(feed.next_session(), None);
    assert_eq!(feed.served(), &[1, 2]);
}

#[test]
fn anchor_inv_chain_grows_memory_and_keeps_order() {
    let d = common::desk();
    let cfg = small_config();
    let methods = [Method::AnchorInv, Method::RealReplay, Method::ProtoNet];
    let memory = prepare_base_memory(&d.state, &d.split.base, &methods, &cfg, 5).unwrap();
    assert_eq!(memory.anchors.len(), 6);
    assert_eq!(memory.replay.as_ref().unwrap().len(), 6);
    assert_eq!(memory.real.as_ref().unwrap().len(), 6);
    assert!(memory.deep_dream.is_none());
    let sets: Vec<Dataset> = d
        .split
        .pools
        .iter()
        .enumerate()
        .map(|(i, p)| sample_few_shot(p, 10, i as u64).unwrap())
        .collect();
    let run = run_fscil(&d.state, &memory, SessionFeed::new(sets.clone()), &Method::AnchorInv, &cfg, 1).unwrap();
    assert_eq!(run.access_log, vec![1, 2]);
    assert_eq!(run.states.len(), 3);
    assert_eq!(run.states[2].classes(), vec![0, 1, 2, 3]);
    // full-set session anchors: every few-shot sample of classes 2 and 3
    assert_eq!(run.anchors.len(), 6 + 10 + 10);
    assert_eq!(run.anchors.of_session(1).classes(), vec![2]);
    let again = run_fscil(&d.state, &memory, SessionFeed::new(sets.clone()), &Method::AnchorInv, &cfg, 1).unwrap();
    assert_eq!(again.states, run.states);
    let missing = run_fscil(&d.state, &memory, SessionFeed::new(sets), &Method::DeepDreamReplay, &cfg, 1);
    assert!(missing.is_err());
}

#[test]
fn stored_anchor_store_must_match_base_classes() {
    let d = common::desk();
    let cfg = small_config();
    let mut set = select_base_anchors(&d.state, &d.split.base, &cfg, 5).unwrap();
    set.anchors.retain(|a| a.class == 0);
    assert!(build_base_memory(&d.state, &d.split.base, set, &[Method::ProtoNet], &cfg, 5).is_err());
}

#[test]
fn method_labels_round_trip() {
    for label in ["anchor-inv", "finetune", "protonet", "teen", "deep-dream", "deep-inv", "real-replay"] {
        assert_eq!(Method::parse(label).unwrap().label(), label);
    }
    assert!(Method::parse("icarl").is_none());
}
