//! End-to-end gradient fidelity: the analytic gradient of the full attack
//! objective (purify -> place -> compose -> score, plus the smoothness term)
//! with respect to the perturbation field must match central finite
//! differences through the very same computation.

use natpatch_core::attack::{probe_loss, AttackConfig, OptimizerRoute, PlacementStrategy};
use natpatch_core::diffusion::{BetaCurve, ConvDenoiser, ScheduleSpec};
use natpatch_core::model::{
    FusionKind, ModelDescriptor, SurrogateModel, TextBatch, ToyDualEncoder, Vocabulary,
};
use natpatch_core::placement::Placement;
use natpatch_core::raster::Raster;
use std::collections::BTreeSet;

fn tiny_model() -> ToyDualEncoder {
    let descriptor = ModelDescriptor {
        image_size: 16,
        patch_embed: 8,
        grid: 2,
        d_model: 16,
        heads: 2,
        ffn_hidden: 32,
        vocab_size: 10,
        max_text_len: 5,
        stem: natpatch_core::model::StemKind::PatchEmbed,
        fusion: FusionKind::CrossAttention,
        pseudo_attention: true,
    };
    let vocab = Vocabulary::new((0..10).map(|i| format!("w{i}")).collect()).unwrap();
    ToyDualEncoder::init(descriptor, vocab, 17)
}

#[test]
fn objective_gradient_matches_central_differences() {
    let model = tiny_model();
    let denoiser = ConvDenoiser::init(6, 3, 100, 23);
    let schedule_spec = ScheduleSpec {
        total_steps: 100,
        beta_curve: BetaCurve::Linear { start: 1e-4, end: 0.02 },
        respaced_stride: 10,
        entry_timestep: 20,
    };
    let schedule = schedule_spec.build().unwrap();
    assert_eq!(schedule.respaced_ladder().len(), 2, "two-step ladder");

    let mut config = AttackConfig {
        patch_ratio: 0.5,
        top_k: 2,
        lambda_tv: 0.1,
        success_at: 2,
        schedule: schedule_spec,
        placement_strategy: PlacementStrategy::AttentionGuided,
        optimizer_route: OptimizerRoute::DiffusionGuided,
        ..AttackConfig::default()
    };
    config.seed = 5;

    let side = 8usize;
    let image = Raster::new(
        16,
        16,
        3,
        (0..16 * 16 * 3).map(|i| 0.25 + 0.5 * (((i * 13) % 41) as f64 / 41.0)).collect(),
    )
    .unwrap();
    let seed_patch = Raster::new(
        side,
        side,
        3,
        (0..side * side * 3).map(|i| 0.35 + 0.3 * (((i * 7) % 23) as f64 / 23.0)).collect(),
    )
    .unwrap();
    let perturbation = Raster::new(
        side,
        side,
        3,
        (0..side * side * 3)
            .map(|i| 0.02 * ((i as f64 * 0.77).sin()))
            .collect(),
    )
    .unwrap();
    let noise = Raster::new(
        side,
        side,
        3,
        (0..side * side * 3)
            .map(|i| 0.3 * (((i * 29) % 17) as f64 - 8.0) / 8.0)
            .collect(),
    )
    .unwrap();

    let texts = TextBatch::new(vec![vec![0, 1], vec![2, 3], vec![4, 5, 6], vec![7, 8]], 10).unwrap();
    let features: Vec<_> = (0..texts.len())
        .map(|j| model.text_features(texts.sequence(j)).unwrap())
        .collect();
    let matched: BTreeSet<usize> = [0].into();
    let placement = Placement::new(8, 8, side, 16, 16).unwrap();

    // Guard: the purified patch must sit strictly inside (0, 1) so the final
    // clamp is locally linear and finite differences see the same branch.
    let purified = natpatch_core::diffusion::purify(
        &seed_patch,
        &perturbation,
        &noise,
        &denoiser,
        &schedule,
    )
    .unwrap()
    .final_patch;
    assert!(
        purified.data().iter().all(|&v| v > 0.01 && v < 0.99),
        "clamp boundary would break the finite-difference comparison"
    );

    let probe = |pert: &Raster| {
        probe_loss(
            &model,
            &denoiser,
            &image,
            &matched,
            &features,
            &seed_patch,
            pert,
            &noise,
            &placement,
            &schedule,
            &config,
            None,
            1,
        )
        .unwrap()
    };

    let base = probe(&perturbation);
    let analytic = base.gradient.clone();
    assert!(analytic.iter().any(|g| g.abs() > 1e-8), "gradient should be nonzero");

    let h = 1e-5;
    let mut numeric = vec![0.0; analytic.len()];
    for i in 0..analytic.len() {
        let mut plus = perturbation.clone();
        plus.data_mut()[i] += h;
        let mut minus = perturbation.clone();
        minus.data_mut()[i] -= h;
        numeric[i] = (probe(&plus).loss - probe(&minus).loss) / (2.0 * h);
    }

    let diff_norm: f64 = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let ref_norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let rel = diff_norm / ref_norm.max(1e-12);
    assert!(rel < 1e-3, "vector relative error {rel} exceeds 1e-3");

    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale > 1e-7 {
            let rel = (a - n).abs() / scale;
            assert!(rel < 1e-3, "entry {i}: analytic {a} numeric {n} rel {rel}");
        } else {
            assert!((a - n).abs() < 1e-8, "entry {i}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn direct_route_gradient_matches_central_differences() {
    let model = tiny_model();
    let denoiser = ConvDenoiser::init(6, 3, 100, 23);
    let schedule_spec = ScheduleSpec::default();
    let schedule = schedule_spec.build().unwrap();
    let config = AttackConfig {
        patch_ratio: 0.5,
        top_k: 2,
        lambda_tv: 0.1,
        success_at: 2,
        optimizer_route: OptimizerRoute::DirectPixel,
        ..AttackConfig::default()
    };

    let side = 8usize;
    let image = Raster::new(
        16,
        16,
        3,
        (0..16 * 16 * 3).map(|i| 0.3 + 0.4 * (((i * 19) % 31) as f64 / 31.0)).collect(),
    )
    .unwrap();
    let patch = Raster::new(
        side,
        side,
        3,
        (0..side * side * 3).map(|i| 0.3 + 0.4 * (((i * 11) % 29) as f64 / 29.0)).collect(),
    )
    .unwrap();
    let noise = Raster::zeros(side, side, 3);
    let texts = TextBatch::new(vec![vec![0, 1], vec![2], vec![3, 4]], 10).unwrap();
    let features: Vec<_> = (0..texts.len())
        .map(|j| model.text_features(texts.sequence(j)).unwrap())
        .collect();
    let matched: BTreeSet<usize> = [1].into();
    let placement = Placement::new(7, 7, side, 16, 16).unwrap();

    let probe = |p: &Raster| {
        probe_loss(
            &model, &denoiser, &image, &matched, &features, &patch, p, &noise, &placement,
            &schedule, &config, None, 1,
        )
        .unwrap()
    };
    let base = probe(&patch);
    let h = 1e-5;
    for i in (0..patch.len()).step_by(17) {
        let mut plus = patch.clone();
        plus.data_mut()[i] += h;
        let mut minus = patch.clone();
        minus.data_mut()[i] -= h;
        let numeric = (probe(&plus).loss - probe(&minus).loss) / (2.0 * h);
        let a = base.gradient[i];
        let scale = a.abs().max(numeric.abs());
        if scale > 1e-7 {
            assert!((a - numeric).abs() / scale < 1e-3, "entry {i}: {a} vs {numeric}");
        }
    }
}
