mod common;

use ccss_core::model::Ablation;
use ccss_core::training::{gradient_check, LossWeights};

#[test]
fn composite_loss_gradients_match_central_differences() {
    let f = common::fixture(64, Ablation::default(), 5);
    let data = f.windows(16, 3);
    let items: Vec<_> = data.iter().collect();
    let probes = gradient_check(&f.model, &f.store, &f.stats, &items, &LossWeights::default(), Some(8), 60, 1e-5, 1e-6, 21).unwrap();
    let ok = probes.iter().filter(|p| p.rel_error <= 1e-4).count();
    let worst = probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    assert!(ok as f64 >= 0.99 * probes.len() as f64, "{ok}/{} within tolerance, worst {worst:?}", probes.len());
}

#[test]
fn ablated_models_also_differentiate_cleanly() {
    for ab in ["no-forcing", "k1"] {
        let f = common::fixture(48, Ablation::parse(ab).unwrap(), 6);
        let data = f.windows(12, 2);
        let items: Vec<_> = data.iter().collect();
        let probes = gradient_check(&f.model, &f.store, &f.stats, &items, &LossWeights::default(), Some(5), 25, 1e-5, 1e-6, 3).unwrap();
        let ok = probes.iter().filter(|p| p.rel_error <= 1e-4).count();
        let bad: Vec<_> = probes.iter().filter(|p| p.rel_error > 1e-4).collect();
        assert!(ok >= 24, "{ab}: {ok}/25 {bad:?}");
    }
}
