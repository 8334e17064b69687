//! The attack loop: purify the perturbed seed patch, place it, compose the
//! attacked image, score it against the text pool, and descend the combined
//! score/smoothness loss with respect to the perturbation field.
//!
//! The perturbation is the only free parameter. Placement is frozen from the
//! clean image's saliency map before the first iteration (recomputation per
//! step is available behind a flag). The sum of seed and perturbation is kept
//! inside [0, clip_max] after every update by folding the clamp correction
//! back into the perturbation.

use crate::diffusion::{self, NoisePredictor, ScheduleSpec};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{SurrogateModel, TextBatch, TextFeatures};
use crate::nn;
use crate::placement::{self, Placement};
use crate::raster::{Patch, Raster};
use crate::tape::{BufId, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementStrategy {
    /// Argmax of the upsampled cross-attention map on the clean image.
    AttentionGuided,
    /// Uniform over valid centers, seeded.
    RandomUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerRoute {
    /// Gradient steps on the perturbation behind the denoising chain.
    DiffusionGuided,
    /// Gradient steps directly on patch pixels, skipping purification.
    DirectPixel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub lambda_tv: f64,
    pub top_k: usize,
    pub clip_max: f64,
    pub patch_ratio: f64,
    pub schedule: ScheduleSpec,
    /// Attack succeeds once no matched text remains in the top N.
    pub success_at: usize,
    pub margin_floor: f64,
    pub seed: u64,
    pub placement_strategy: PlacementStrategy,
    pub optimizer_route: OptimizerRoute,
    /// Recompute placement from the attacked image every iteration instead of
    /// freezing it from the clean image.
    pub recompute_placement: bool,
    /// Seeded pixel noise added to the composed image before scoring, for
    /// robustness studies. Zero disables it.
    pub score_noise_std: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            max_iterations: 300,
            learning_rate: 0.01,
            lambda_tv: 0.1,
            top_k: 15,
            clip_max: 1.0,
            patch_ratio: 0.15,
            schedule: ScheduleSpec::default(),
            success_at: 10,
            margin_floor: 1.0,
            seed: 0,
            placement_strategy: PlacementStrategy::AttentionGuided,
            optimizer_route: OptimizerRoute::DiffusionGuided,
            recompute_placement: false,
            score_noise_std: 0.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be positive".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if self.lambda_tv < 0.0 {
            return Err(Error::InvalidConfig("lambda_tv must be non-negative".into()));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(self.clip_max > 0.0 && self.clip_max <= 1.0) {
            return Err(Error::InvalidConfig("clip_max must lie in (0, 1]".into()));
        }
        if !(self.patch_ratio > 0.0 && self.patch_ratio <= 1.0) {
            return Err(Error::InvalidConfig("patch_ratio must lie in (0, 1]".into()));
        }
        if self.success_at == 0 {
            return Err(Error::InvalidConfig("success_at must be at least 1".into()));
        }
        if self.margin_floor < 0.0 {
            return Err(Error::InvalidConfig("margin_floor must be non-negative".into()));
        }
        if self.score_noise_std < 0.0 {
            return Err(Error::InvalidConfig("score_noise_std must be non-negative".into()));
        }
        self.schedule.build().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessFlags {
    pub at_1: bool,
    pub at_5: bool,
    pub at_10: bool,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub final_patch: Patch,
    pub perturbation: Patch,
    pub placement: Placement,
    pub iterations_used: usize,
    pub loss_trace: Vec<f64>,
    pub success: SuccessFlags,
    /// Whether the configured criterion was met within budget.
    pub succeeded: bool,
    pub wall_time_secs: f64,
}

/// Pointwise clamp to [0, tau].
pub fn clip_perturbed(values: &Raster, tau: f64) -> Raster {
    values.map(|v| v.clamp(0.0, tau))
}

enum ScoreSelection {
    /// No matched text inside the top K: the attack already saturated.
    Saturated,
    /// Indices of max-scoring matched and min-scoring unmatched texts.
    Pair { matched: usize, unmatched: usize },
}

/// Texts ordered by descending score, ties toward the smaller index.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b))
    });
    order
}

fn select_score_pair(
    scores: &[f64],
    matched: &BTreeSet<usize>,
    k: usize,
) -> Result<ScoreSelection> {
    if matched.is_empty() {
        return Err(Error::InvalidInput("matched text set is empty".into()));
    }
    if k > scores.len() {
        return Err(Error::InvalidInput(format!(
            "top_k {k} exceeds text pool of {}",
            scores.len()
        )));
    }
    if let Some(&bad) = matched.iter().find(|&&j| j >= scores.len()) {
        return Err(Error::InvalidInput(format!("matched id {bad} outside pool")));
    }
    if matched.len() == scores.len() {
        return Err(Error::InvalidInput("no unmatched texts in pool".into()));
    }
    let order = ranked_indices(scores);
    let top = &order[..k];
    let best_matched = top.iter().copied().find(|j| matched.contains(j));
    let Some(best_matched) = best_matched else {
        return Ok(ScoreSelection::Saturated);
    };
    // Lowest-scoring unmatched inside the top K; if the top K happens to be
    // all matched, fall back to the best unmatched below the cut so the loss
    // keeps a defined gradient direction.
    let min_unmatched = top
        .iter()
        .rev()
        .copied()
        .find(|j| !matched.contains(j))
        .or_else(|| order[k..].iter().copied().find(|j| !matched.contains(j)));
    let unmatched = min_unmatched.expect("pool has unmatched texts");
    Ok(ScoreSelection::Pair { matched: best_matched, unmatched })
}

/// Top-K margin loss: max score among matched texts in the top K minus the
/// minimum unmatched score there; the configured negative floor once every
/// matched text has left the top K.
pub fn score_loss(
    scores: &[f64],
    matched: &BTreeSet<usize>,
    k: usize,
    margin_floor: f64,
) -> Result<f64> {
    match select_score_pair(scores, matched, k)? {
        ScoreSelection::Saturated => Ok(-margin_floor),
        ScoreSelection::Pair { matched, unmatched } => Ok(scores[matched] - scores[unmatched]),
    }
}

/// Smoothness penalty: sqrt of summed squared forward differences (both
/// axes, all channels, out-of-range neighbors skipped) divided by the pixel
/// count.
pub fn tv_loss(patch: &Raster) -> f64 {
    let (h, w, c) = (patch.height(), patch.width(), patch.channels());
    let mut total = 0.0;
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let v = patch.get(r, col, ch);
                if r + 1 < h {
                    let d = v - patch.get(r + 1, col, ch);
                    total += d * d;
                }
                if col + 1 < w {
                    let d = v - patch.get(r, col + 1, ch);
                    total += d * d;
                }
            }
        }
    }
    total.sqrt() / (h * w) as f64
}

/// Index pairs for the traced total-variation computation.
fn tv_index_pairs(h: usize, w: usize, c: usize) -> (Vec<usize>, Vec<usize>) {
    let mut from = Vec::new();
    let mut to = Vec::new();
    let at = |r: usize, col: usize, ch: usize| (r * w + col) * c + ch;
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                if r + 1 < h {
                    from.push(at(r, col, ch));
                    to.push(at(r + 1, col, ch));
                }
                if col + 1 < w {
                    from.push(at(r, col, ch));
                    to.push(at(r, col + 1, ch));
                }
            }
        }
    }
    (from, to)
}

pub fn tv_loss_traced(tape: &mut Tape, patch: BufId, h: usize, w: usize, c: usize) -> BufId {
    let (from, to) = tv_index_pairs(h, w, c);
    if from.is_empty() {
        return tape.scalar_leaf(0.0);
    }
    let a = tape.gather(patch, &from);
    let b = tape.gather(patch, &to);
    let diff = tape.sub(a, b);
    let sq = tape.mul(diff, diff);
    let total = tape.sum_all(sq);
    let root = tape.sqrt(total);
    tape.scale(root, 1.0 / (h * w) as f64)
}

/// Combined objective.
pub fn total_loss(score_part: f64, tv_part: f64, lambda_tv: f64) -> f64 {
    score_part + lambda_tv * tv_part
}

struct LoopState {
    /// Perturbation field for the diffusion route, or the running patch for
    /// the direct route.
    values: Raster,
}

/// One evaluation of the attack objective: forward values plus the gradient
/// with respect to the free parameter (the perturbation field on the
/// diffusion route, patch pixels on the direct route).
#[derive(Debug, Clone)]
pub struct LossProbe {
    pub loss: f64,
    pub score_part: f64,
    pub tv_part: f64,
    pub scores: Vec<f64>,
    pub gradient: Vec<f64>,
}

/// Forward + backward of the full per-iteration objective. This is the exact
/// computation one attack iteration performs; the optimizer loop applies the
/// returned gradient and the clamp correction.
#[allow(clippy::too_many_arguments)]
pub fn probe_loss(
    model: &dyn SurrogateModel,
    predictor: &dyn NoisePredictor,
    image: &Raster,
    matched_ids: &BTreeSet<usize>,
    features: &[TextFeatures],
    seed_patch: &Raster,
    free_values: &Raster,
    noise: &Raster,
    placement: &Placement,
    schedule: &diffusion::DiffusionSchedule,
    config: &AttackConfig,
    score_jitter: Option<&Raster>,
    iteration: usize,
) -> Result<LossProbe> {
    let side = seed_patch.height();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);

    let patch_id: BufId;
    let grad_source: BufId;
    match config.optimizer_route {
        OptimizerRoute::DiffusionGuided => {
            let seed_id = tape.leaf(seed_patch.data().to_vec(), vec![side, side, 3]);
            let pert_id = tape.leaf(free_values.data().to_vec(), vec![side, side, 3]);
            let (purified, _) = diffusion::purify_traced(
                &mut tape, seed_id, pert_id, noise, side, side, 3, predictor, schedule,
            );
            patch_id = purified;
            grad_source = pert_id;
        }
        OptimizerRoute::DirectPixel => {
            let p = tape.leaf(free_values.data().to_vec(), vec![side, side, 3]);
            patch_id = p;
            grad_source = p;
        }
    }

    let img_id = tape.leaf(
        image.data().to_vec(),
        vec![image.height(), image.width(), image.channels()],
    );
    let mut composed = placement::compose_traced(&mut tape, img_id, patch_id, 3, placement);
    if let Some(jitter) = score_jitter {
        let jitter_id = tape.leaf(
            jitter.data().to_vec(),
            vec![image.height(), image.width(), image.channels()],
        );
        let noisy = tape.add(composed, jitter_id);
        composed = tape.clamp01(noisy);
    }
    let vis = model.encode_image_traced(&mut tape, &binding, composed);
    let mut score_ids = Vec::with_capacity(features.len());
    for tf in features {
        let trace = model.fuse_traced(&mut tape, &binding, vis, tf);
        score_ids.push(trace.score);
    }
    let score_values: Vec<f64> = score_ids.iter().map(|&id| tape.scalar(id)).collect();

    let score_term = match select_score_pair(&score_values, matched_ids, config.top_k)? {
        ScoreSelection::Saturated => tape.scalar_leaf(-config.margin_floor),
        ScoreSelection::Pair { matched, unmatched } => {
            tape.sub(score_ids[matched], score_ids[unmatched])
        }
    };
    let tv_term = tv_loss_traced(&mut tape, patch_id, side, side, 3);
    let tv_scaled = tape.scale(tv_term, config.lambda_tv);
    let loss = tape.add(score_term, tv_scaled);
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { iteration, value: loss_value });
    }
    let score_part = tape.scalar(score_term);
    let tv_part = tape.scalar(tv_term);
    tape.backward(loss);
    let gradient = tape
        .grad(grad_source)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; side * side * 3]);
    Ok(LossProbe { loss: loss_value, score_part, tv_part, scores: score_values, gradient })
}

/// Run the attack on one example. The image, seed patch, and pool are left
/// untouched; all evolving state lives in the result.
pub fn run_attack(
    model: &dyn SurrogateModel,
    predictor: &dyn NoisePredictor,
    image: &Raster,
    matched_ids: &BTreeSet<usize>,
    text_pool: &TextBatch,
    seed_patch: &Patch,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let start = Instant::now();
    config.validate()?;
    model.validate_image(image)?;
    if matched_ids.is_empty() {
        return Err(Error::InvalidInput("matched_ids must be nonempty".into()));
    }
    if let Some(&bad) = matched_ids.iter().find(|&&j| j >= text_pool.len()) {
        return Err(Error::InvalidInput(format!("matched id {bad} outside text pool")));
    }
    if config.top_k > text_pool.len() {
        return Err(Error::InvalidConfig(format!(
            "top_k {} exceeds text pool of {}",
            config.top_k,
            text_pool.len()
        )));
    }
    if config.success_at >= text_pool.len() {
        return Err(Error::InvalidConfig(format!(
            "success criterion R@{} can never break with a pool of {} texts",
            config.success_at,
            text_pool.len()
        )));
    }
    let side = placement::patch_side_for_ratio(config.patch_ratio, image.height(), image.width());
    if seed_patch.height() != side || seed_patch.width() != side || seed_patch.channels() != 3 {
        return Err(Error::shape(
            "seed patch for configured ratio",
            format!("{side}x{side}x3"),
            seed_patch.shape_string(),
        ));
    }
    let schedule = config.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Raster::new(side, side, 3, nn::sample_normal(&mut rng, side * side * 3))
        .expect("noise raster");

    let features: Result<Vec<TextFeatures>> =
        (0..text_pool.len()).map(|j| model.text_features(text_pool.sequence(j))).collect();
    let features = features?;

    let anchor_caption = *matched_ids.iter().next().expect("nonempty matched set");
    let attention_placement = |img: &Raster| -> Result<Placement> {
        let map = model.cross_attention_map(img, text_pool.sequence(anchor_caption))?;
        let raster = placement::upsample_map(&map, img.height(), img.width())?;
        placement::select_center(&raster, side)
    };
    let mut current_placement = match config.placement_strategy {
        PlacementStrategy::AttentionGuided => attention_placement(image)?,
        PlacementStrategy::RandomUniform => {
            placement::random_center(&mut rng, image.height(), image.width(), side)?
        }
    };

    let mut state = match config.optimizer_route {
        OptimizerRoute::DiffusionGuided => {
            // Fold the initial clamp correction into the perturbation so
            // seed + d stays within [0, clip_max] from the very start.
            let clipped = clip_perturbed(seed_patch, config.clip_max);
            LoopState { values: clipped.zip(seed_patch, |c, s| c - s).expect("same shape") }
        }
        OptimizerRoute::DirectPixel => {
            LoopState { values: clip_perturbed(seed_patch, config.clip_max) }
        }
    };

    let mut loss_trace = Vec::new();
    let mut succeeded = false;
    let mut iterations_used = 0;

    for iteration in 1..=config.max_iterations {
        iterations_used = iteration;
        let score_jitter = if config.score_noise_std > 0.0 {
            let jitter: Vec<f64> = nn::sample_normal(&mut rng, image.len())
                .into_iter()
                .map(|v| v * config.score_noise_std)
                .collect();
            Some(
                Raster::new(image.height(), image.width(), image.channels(), jitter)
                    .expect("jitter raster"),
            )
        } else {
            None
        };
        let probe = probe_loss(
            model,
            predictor,
            image,
            matched_ids,
            &features,
            seed_patch,
            &state.values,
            &noise,
            &current_placement,
            &schedule,
            config,
            score_jitter.as_ref(),
            iteration,
        )?;
        loss_trace.push(probe.loss);

        if !eval::hit_at_n(&probe.scores, matched_ids, config.success_at) {
            succeeded = true;
            break;
        }

        match config.optimizer_route {
            OptimizerRoute::DiffusionGuided => {
                for (v, g) in state.values.data_mut().iter_mut().zip(probe.gradient.iter()) {
                    *v -= config.learning_rate * g;
                }
                let summed = seed_patch.zip(&state.values, |s, d| s + d).expect("same shape");
                let clipped = clip_perturbed(&summed, config.clip_max);
                state.values = clipped.zip(seed_patch, |c, s| c - s).expect("same shape");
            }
            OptimizerRoute::DirectPixel => {
                for (v, g) in state.values.data_mut().iter_mut().zip(probe.gradient.iter()) {
                    *v -= config.learning_rate * g;
                }
                state.values = clip_perturbed(&state.values, config.clip_max);
            }
        }

        if config.recompute_placement && config.placement_strategy == PlacementStrategy::AttentionGuided
        {
            let final_patch = final_patch_for(
                &state, seed_patch, &noise, predictor, &schedule, config,
            )?;
            let mask = placement::make_mask(&current_placement);
            let attacked =
                placement::compose(image, &final_patch, &mask, &current_placement)?;
            current_placement = attention_placement(&attacked)?;
        }
    }

    let final_patch = final_patch_for(&state, seed_patch, &noise, predictor, &schedule, config)?;
    let mask = placement::make_mask(&current_placement);
    let attacked_image = placement::compose(image, &final_patch, &mask, &current_placement)?;
    let final_scores = score_row(model, &attacked_image, &features)?;
    let success = SuccessFlags {
        at_1: !eval::hit_at_n(&final_scores, matched_ids, 1.min(text_pool.len())),
        at_5: !eval::hit_at_n(&final_scores, matched_ids, 5.min(text_pool.len())),
        at_10: !eval::hit_at_n(&final_scores, matched_ids, 10.min(text_pool.len())),
    };
    let perturbation = match config.optimizer_route {
        OptimizerRoute::DiffusionGuided => state.values.clone(),
        OptimizerRoute::DirectPixel => {
            state.values.zip(seed_patch, |p, s| p - s).expect("same shape")
        }
    };
    Ok(AttackResult {
        final_patch,
        perturbation,
        placement: current_placement,
        iterations_used,
        loss_trace,
        success,
        succeeded,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn final_patch_for(
    state: &LoopState,
    seed_patch: &Raster,
    noise: &Raster,
    predictor: &dyn NoisePredictor,
    schedule: &diffusion::DiffusionSchedule,
    config: &AttackConfig,
) -> Result<Raster> {
    match config.optimizer_route {
        OptimizerRoute::DiffusionGuided => Ok(diffusion::purify(
            seed_patch,
            &state.values,
            noise,
            predictor,
            schedule,
        )?
        .final_patch),
        OptimizerRoute::DirectPixel => Ok(state.values.clone()),
    }
}

/// Scores of one composed image against cached text features.
pub fn score_row(
    model: &dyn SurrogateModel,
    image: &Raster,
    features: &[TextFeatures],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let img_id = tape.leaf(
        image.data().to_vec(),
        vec![image.height(), image.width(), image.channels()],
    );
    let vis = model.encode_image_traced(&mut tape, &binding, img_id);
    Ok(features
        .iter()
        .map(|tf| {
            let trace = model.fuse_traced(&mut tape, &binding, vis, tf);
            tape.scalar(trace.score)
        })
        .collect())
}

/// Ablation baseline: identical loop with placement drawn uniformly over
/// valid centers.
pub fn baseline_random_location(
    model: &dyn SurrogateModel,
    predictor: &dyn NoisePredictor,
    image: &Raster,
    matched_ids: &BTreeSet<usize>,
    text_pool: &TextBatch,
    seed_patch: &Patch,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut cfg = config.clone();
    cfg.placement_strategy = PlacementStrategy::RandomUniform;
    run_attack(model, predictor, image, matched_ids, text_pool, seed_patch, &cfg)
}

/// Ablation baseline: optimize patch pixels directly, skipping purification.
pub fn baseline_direct_pixel(
    model: &dyn SurrogateModel,
    predictor: &dyn NoisePredictor,
    image: &Raster,
    matched_ids: &BTreeSet<usize>,
    text_pool: &TextBatch,
    seed_patch: &Patch,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut cfg = config.clone();
    cfg.optimizer_route = OptimizerRoute::DirectPixel;
    run_attack(model, predictor, image, matched_ids, text_pool, seed_patch, &cfg)
}
