//! Ablation batches: sweep one factor with everything else held fixed and
//! emit a two-column (value, metric) table.
//!
//! - topk: metric is TR ASR at the success cutoff over clean-correct queries.
//! - size: same metric over a patch-ratio grid.
//! - location: metric is mean attack iterations, run for both placement
//!   strategies under both optimizer routes (four cells).

use crate::config::RunConfig;
use crate::error::{Result, RunnerError};
use crate::experiment::{attack_batch, ExampleOutcome, ModelArtifacts};
use crate::manifest::DatasetManifest;
use natpatch_core::attack::{self, AttackConfig, OptimizerRoute, PlacementStrategy};
use natpatch_core::eval::ScoreMatrix;
use natpatch_core::model::{SurrogateModel, TextBatch, TextFeatures};
use natpatch_core::raster::Raster;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    TopK,
    Size,
    Location,
}

impl AblationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::TopK => "topk",
            AblationKind::Size => "size",
            AblationKind::Location => "location",
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            AblationKind::TopK | AblationKind::Size => "asr_at_10",
            AblationKind::Location => "mean_iterations",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub metric_name: String,
    pub rows: Vec<(String, Option<f64>)>,
}

impl AblationTable {
    pub fn render_csv(&self) -> String {
        let mut out = String::from("value,metric\n");
        for (value, metric) in &self.rows {
            match metric {
                Some(m) => out.push_str(&format!("{value},{m}\n")),
                None => out.push_str(&format!("{value},undefined\n")),
            }
        }
        out
    }
}

/// Shared pool state computed once per ablation run.
pub struct AblationContext<'a> {
    pub manifest: &'a DatasetManifest,
    pub images: Vec<Raster>,
    pub texts: TextBatch,
    pub features: Vec<TextFeatures>,
    pub clean: ScoreMatrix,
    pub examples: Vec<usize>,
}

pub fn build_context<'a>(
    artifacts: &ModelArtifacts,
    manifest: &'a DatasetManifest,
    cfg: &RunConfig,
) -> Result<AblationContext<'a>> {
    let model = &artifacts.model;
    let images = manifest.load_images()?;
    let (captions, matched) = manifest.caption_pool();
    let texts = TextBatch::from_captions(model.vocabulary(), &captions).map_err(RunnerError::Core)?;
    let features: Vec<TextFeatures> = (0..texts.len())
        .map(|j| model.text_features(texts.sequence(j)))
        .collect::<natpatch_core::Result<_>>()
        .map_err(RunnerError::Core)?;
    let clean_rows: Vec<Vec<f64>> = images
        .iter()
        .map(|img| attack::score_row(model, img, &features))
        .collect::<natpatch_core::Result<_>>()
        .map_err(RunnerError::Core)?;
    let matched_sets: Vec<BTreeSet<usize>> =
        matched.iter().map(|m| m.iter().copied().collect()).collect();
    let clean = ScoreMatrix::new(clean_rows, matched_sets).map_err(RunnerError::Core)?;
    let limit = cfg.max_examples.unwrap_or(images.len()).min(images.len());
    Ok(AblationContext {
        manifest,
        images,
        texts,
        features,
        clean,
        examples: (0..limit).collect(),
    })
}

/// ASR at the configured success cutoff over clean-correct queries of the
/// attacked batch; None when no query was clean-correct.
pub fn batch_asr(outcomes: &[ExampleOutcome]) -> Option<f64> {
    let clean_correct = outcomes.iter().filter(|o| o.clean_hits[2]).count();
    if clean_correct == 0 {
        return None;
    }
    let broken = outcomes
        .iter()
        .filter(|o| o.clean_hits[2] && o.result.success.at_10)
        .count();
    Some(broken as f64 / clean_correct as f64)
}

pub fn mean_iterations(outcomes: &[ExampleOutcome]) -> f64 {
    outcomes.iter().map(|o| o.result.iterations_used as f64).sum::<f64>()
        / outcomes.len().max(1) as f64
}

fn run_cell(
    artifacts: &ModelArtifacts,
    ctx: &AblationContext,
    attack_cfg: &AttackConfig,
    cfg: &RunConfig,
) -> Result<Vec<ExampleOutcome>> {
    attack_batch(
        &artifacts.model,
        &artifacts.denoiser,
        ctx.manifest,
        &ctx.images,
        &ctx.texts,
        &ctx.features,
        &ctx.clean,
        &ctx.examples,
        attack_cfg,
        cfg.seed,
        cfg.workers,
        None,
    )
}

pub fn run_ablation(
    kind: AblationKind,
    grid: &[String],
    artifacts: &ModelArtifacts,
    manifest: &DatasetManifest,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<AblationTable> {
    if kind != AblationKind::Location && grid.is_empty() {
        return Err(RunnerError::Usage(format!("{} ablation needs a nonempty grid", kind.name())));
    }
    let ctx = build_context(artifacts, manifest, cfg)?;
    let mut rows = Vec::new();
    match kind {
        AblationKind::TopK => {
            for raw in grid {
                let k: usize = raw
                    .parse()
                    .map_err(|_| RunnerError::Usage(format!("bad top-k grid value '{raw}'")))?;
                let mut attack_cfg = cfg.attack.clone();
                attack_cfg.top_k = k;
                let outcomes = run_cell(artifacts, &ctx, &attack_cfg, cfg)?;
                rows.push((raw.clone(), batch_asr(&outcomes)));
            }
        }
        AblationKind::Size => {
            for raw in grid {
                let ratio: f64 = raw
                    .parse()
                    .map_err(|_| RunnerError::Usage(format!("bad size grid value '{raw}'")))?;
                let mut attack_cfg = cfg.attack.clone();
                attack_cfg.patch_ratio = ratio;
                let outcomes = run_cell(artifacts, &ctx, &attack_cfg, cfg)?;
                rows.push((raw.clone(), batch_asr(&outcomes)));
            }
        }
        AblationKind::Location => {
            let cells = [
                ("attention+diffusion", PlacementStrategy::AttentionGuided, OptimizerRoute::DiffusionGuided),
                ("random+diffusion", PlacementStrategy::RandomUniform, OptimizerRoute::DiffusionGuided),
                ("attention+direct", PlacementStrategy::AttentionGuided, OptimizerRoute::DirectPixel),
                ("random+direct", PlacementStrategy::RandomUniform, OptimizerRoute::DirectPixel),
            ];
            for (label, strategy, route) in cells {
                let mut attack_cfg = cfg.attack.clone();
                attack_cfg.placement_strategy = strategy;
                attack_cfg.optimizer_route = route;
                let outcomes = run_cell(artifacts, &ctx, &attack_cfg, cfg)?;
                rows.push((label.to_string(), Some(mean_iterations(&outcomes))));
            }
        }
    }
    let table = AblationTable {
        kind,
        metric_name: kind.metric_name().to_string(),
        rows,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(format!("ablation_{}.csv", kind.name())), table.render_csv())?;
    Ok(table)
}
