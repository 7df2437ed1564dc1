mod common;

use ccss_core::model::Ablation;
use ccss_core::training::*;

fn tiny_train_config(seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        batch_size: 8,
        horizon: 16,
        max_train_windows: Some(24),
        val_windows: 8,
        model: common::tiny_config(64),
        ablation,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (series, _) = common::small_plant(2500, 21);
    let a = train(&series, &tiny_train_config(5, Ablation::default()), None).unwrap();
    let b = train(&series, &tiny_train_config(5, Ablation::default()), None).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
    let c = train(&series, &tiny_train_config(6, Ablation::default()), None).unwrap();
    assert_ne!(a.checkpoint.to_bytes().unwrap(), c.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log.len(), 2);
    assert!(a.log.iter().all(|e| e.mean_loss.is_finite() && e.val_nll.is_finite()));
    assert!(a.log[0].improved);
}

#[test]
fn best_checkpoint_is_written_and_reloads() {
    let (series, _) = common::small_plant(2500, 22);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ccss");
    let out = train(&series, &tiny_train_config(1, Ablation::default()), Some(&path)).unwrap();
    let loaded = ccss_core::checkpoint::Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params, out.checkpoint.params);
}

#[test]
fn semigroup_term_vanishes_when_disabled() {
    let f = common::fixture(64, Ablation::default(), 3);
    let data = f.windows(16, 3);
    let items: Vec<_> = data.iter().collect();
    let w = LossWeights::default();
    let closed = composite_loss(&f.model, &f.store, &f.stats, &items, &w, None).unwrap();
    assert_eq!(closed.terms["semigroup"], 0.0);
    let open = composite_loss(&f.model, &f.store, &f.stats, &items, &w, Some(8)).unwrap();
    assert!(open.terms["semigroup"] > 0.0);
    for lb in [&closed, &open] {
        assert!((lb.resum() - lb.total).abs() <= 1e-10 * lb.total.abs().max(1.0));
        assert_eq!(lb.terms.len(), TERM_NAMES.len());
    }
    // every other term is unaffected by the gate
    for n in TERM_NAMES.iter().filter(|n| **n != "semigroup") {
        assert_eq!(closed.terms[*n], open.terms[*n], "{n}");
    }

    let g = common::fixture(64, Ablation::parse("no-semigroup").unwrap(), 3);
    let off = composite_loss(&g.model, &g.store, &g.stats, &items, &w, Some(8)).unwrap();
    assert_eq!(off.terms["semigroup"], 0.0);
}

#[test]
fn time_weight_shape() {
    assert_eq!(time_weight(0, 200).unwrap(), 0.2);
    assert_eq!(time_weight(200, 200).unwrap(), 2.2);
    assert!((time_weight(100, 200).unwrap() - 0.7).abs() < 1e-15);
    let ws: Vec<f64> = (0..=50).map(|t| time_weight(t, 50).unwrap()).collect();
    assert!(ws.windows(2).all(|p| p[1] > p[0]));
    assert!(time_weight(201, 200).is_err());
    assert!(time_weight(0, 0).is_err());
}

#[test]
fn semigroup_split_stays_in_the_middle_half() {
    let mut rng = ccss_core::params::seeded_rng(0);
    let mut opened = 0;
    for _ in 0..4000 {
        if let Some(s) = draw_semigroup_split(&mut rng, 200, 0.1) {
            assert!((50..=150).contains(&s));
            opened += 1;
        }
    }
    // binomial(4000, 0.1): mean 400, sd 19
    assert!((300..500).contains(&opened), "{opened}");
    assert!(draw_semigroup_split(&mut rng, 200, 0.0).is_none());
    assert!(draw_semigroup_split(&mut rng, 200, 1.0).is_some());
}

#[test]
fn bad_configs_are_rejected() {
    let ok = tiny_train_config(1, Ablation::default());
    ok.validate().unwrap();
    let bad = [
        TrainConfig { epochs: 0, ..ok.clone() },
        TrainConfig { train_fraction: 1.0, ..ok.clone() },
        TrainConfig { weights: LossWeights { tv: -1.0, ..Default::default() }, ..ok.clone() },
        TrainConfig { weights: LossWeights { semigroup_prob: 1.5, ..Default::default() }, ..ok.clone() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert!(Ablation::parse("k2").is_err());
    for name in ["full", "no-forcing", "no-semigroup", "k1"] {
        assert_eq!(Ablation::parse(name).unwrap().label(), name);
    }
}
