mod common;

use common::*;
use wdlab::model::{build_mlp, forward, LossKind, MLPSpec};
use wdlab::Model;

#[test]
fn every_primitive_matches_finite_differences() {
    for name in PRIMITIVES {
        let worst = (0..100).map(|s| primitive_case(name, s).check()).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn composite_networks_match_finite_differences() {
    for (name, spec) in composite_specs() {
        let worst = (0..100).map(|s| composite_check(&spec, s)).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn tape_forward_matches_loop_oracle() {
    for (name, spec) in composite_specs() {
        for seed in 0..20 {
            let (model, params) = build_mlp(&spec, seed).unwrap();
            let batch = random_batch(seed, 9, spec.layer_widths[0], spec.loss, *spec.layer_widths.last().unwrap());
            let (loss, _) = forward(&model, &params, &batch).unwrap();
            let oracle = mlp_loss(&model, &params, &batch);
            assert!((loss - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{name} seed {seed}: {loss} vs {oracle}");
            let out = model.predict(&params, &batch.inputs, &wdlab::MixedPrecisionPolicy::FULL).unwrap();
            assert!(rel_diff(out.data(), &mlp_outputs(&model, &params, &batch.inputs), 1e-12) < 1e-12);
        }
    }
}

#[test]
fn scale_invariant_outputs_ignore_rescaling() {
    let (_, spec) = composite_specs().remove(1);
    let (model, params) = build_mlp(&spec, 4).unwrap();
    let batch = random_batch(4, 16, 4, LossKind::Bce, 1);
    let base = mlp_outputs(&model, &params, &batch.inputs);
    for alpha in [1e-3, 0.5, 3.0, 1e3] {
        let scaled = params.with_flat(&params.flatten().iter().map(|w| w * alpha).collect::<Vec<_>>()).unwrap();
        let out = model.predict(&scaled, &batch.inputs, &wdlab::MixedPrecisionPolicy::FULL).unwrap();
        assert!(rel_diff(out.data(), &base, 1e-12) < 1e-12, "alpha {alpha}");
        // gradient is orthogonal to w and scales as 1/alpha
        let fwd = model.forward(&scaled, &batch, &wdlab::MixedPrecisionPolicy::FULL).unwrap();
        let g = wdlab::autodiff::gradient(&fwd.tape, &scaled).unwrap();
        let w = scaled.flatten();
        let cos = g.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (norm(&g) * norm(&w));
        assert!(cos.abs() < 1e-8, "alpha {alpha}: cos {cos:e}");
    }
}

#[test]
fn bf16_forward_stays_close_to_full() {
    let spec = MLPSpec::new(vec![3, 8, 3], LossKind::CrossEntropy);
    let (model, params) = build_mlp(&spec, 1).unwrap();
    let batch = random_batch(1, 32, 3, LossKind::CrossEntropy, 3);
    let full = model.forward(&params, &batch, &wdlab::MixedPrecisionPolicy::FULL).unwrap().loss;
    let bf = model.forward(&params, &batch, &wdlab::MixedPrecisionPolicy::mixed(wdlab::NumericMode::Bf16)).unwrap();
    assert!(bf.loss != full && (bf.loss - full).abs() < 0.05 * full);
    assert!(bf.outputs().is_consistent());
}
