//! Experiment orchestration: model training/loading, seeded batch attack
//! runs over an evaluation split, result persistence, and summary emission.
//!
//! Reproducibility contract: (manifest, config, seed) determine every metric.
//! Per-example seeds derive from the run seed and the example id, examples
//! run on a bounded worker pool, and all aggregation happens over outcomes
//! sorted in manifest order.

use crate::config::RunConfig;
use crate::error::{Result, RunnerError};
use crate::manifest::DatasetManifest;
use crate::report;
use natpatch_core::attack::{self, AttackConfig, AttackResult};
use natpatch_core::diffusion::ConvDenoiser;
use natpatch_core::eval::{self, ScoreMatrix};
use natpatch_core::model::{
    SurrogateModel, TextBatch, TextFeatures, ToyDualEncoder, TrainReport, Vocabulary,
};
use natpatch_core::nn::derive_seed;
use natpatch_core::placement::{self, Placement};
use natpatch_core::raster::Raster;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

pub struct ModelArtifacts {
    pub model: ToyDualEncoder,
    pub denoiser: ConvDenoiser,
}

pub enum ModelSource {
    Checkpoints { model: PathBuf, denoiser: PathBuf },
    Train { train_manifest: PathBuf, heldout_manifest: PathBuf },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub clean_recall_at_1: f64,
    pub final_model_loss: f64,
    pub final_denoiser_loss: f64,
}

/// Train the toy dual encoder on the train split (held-out floor checked on
/// the re-jittered split) and the toy denoiser on the train images.
pub fn train_toy_model(
    train: &DatasetManifest,
    heldout: &DatasetManifest,
    cfg: &RunConfig,
) -> Result<(ModelArtifacts, TrainReport, Vec<f64>)> {
    let all_captions: Vec<String> = train
        .records()
        .iter()
        .chain(heldout.records())
        .flat_map(|r| r.captions.iter().cloned())
        .collect();
    let vocab = Vocabulary::from_captions(all_captions.iter().map(|s| s.as_str()))
        .map_err(RunnerError::Core)?;

    let pairs = |manifest: &DatasetManifest| -> Result<Vec<(Raster, Vec<usize>)>> {
        let images = manifest.load_images()?;
        images
            .into_iter()
            .zip(manifest.records())
            .map(|(img, rec)| Ok((img, vocab.tokenize(&rec.captions[0]).map_err(RunnerError::Core)?)))
            .collect()
    };
    let train_pairs = pairs(train)?;
    let heldout_pairs = pairs(heldout)?;

    let (model, train_report) =
        ToyDualEncoder::train(&vocab, &train_pairs, &heldout_pairs, &cfg.training.model, cfg.seed)
            .map_err(RunnerError::Core)?;

    let schedule = cfg.attack.schedule.build().map_err(RunnerError::Core)?;
    let train_images: Vec<Raster> = train_pairs.into_iter().map(|(img, _)| img).collect();
    let (denoiser, losses) =
        ConvDenoiser::train(&train_images, &schedule, &cfg.training.denoiser, cfg.seed)
            .map_err(RunnerError::Core)?;

    Ok((ModelArtifacts { model, denoiser }, train_report, losses))
}

pub fn save_artifacts(out_dir: &Path, artifacts: &ModelArtifacts) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    artifacts.model.save(&out_dir.join("model.ckpt")).map_err(RunnerError::Core)?;
    artifacts
        .denoiser
        .save(&out_dir.join("denoiser.ckpt"))
        .map_err(RunnerError::Core)?;
    artifacts
        .model
        .vocabulary()
        .save(&out_dir.join("vocab.txt"))
        .map_err(RunnerError::Core)?;
    Ok(())
}

pub fn load_artifacts(model_path: &Path, denoiser_path: &Path) -> Result<ModelArtifacts> {
    Ok(ModelArtifacts {
        model: ToyDualEncoder::load(model_path).map_err(RunnerError::Core)?,
        denoiser: ConvDenoiser::load(denoiser_path).map_err(RunnerError::Core)?,
    })
}

/// One attacked example with everything the metrics need.
pub struct ExampleOutcome {
    pub index: usize,
    pub example_id: String,
    pub result: AttackResult,
    pub attacked_row: Vec<f64>,
    /// Clean TR hits for this image at the report cutoffs.
    pub clean_hits: [bool; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub example_id: String,
    pub config_hash: String,
    pub iterations_used: usize,
    pub succeeded: bool,
    pub success_at_1: bool,
    pub success_at_5: bool,
    pub success_at_10: bool,
    pub final_loss: f64,
    pub final_patch_tv: f64,
    pub placement: Placement,
    pub patch_path: String,
    pub clean_hit_at_1: bool,
    pub clean_hit_at_10: bool,
    pub started_ms: u128,
    pub finished_ms: u128,
}

/// Serialized sink for run records plus the patch artifact directory.
pub struct Persist {
    sink: Mutex<std::io::BufWriter<std::fs::File>>,
    patches_dir: PathBuf,
    config_hash: String,
}

impl Persist {
    pub fn create(out_dir: &Path, config_hash: &str) -> Result<Self> {
        let patches_dir = out_dir.join("patches");
        std::fs::create_dir_all(&patches_dir)?;
        let file = std::fs::File::create(out_dir.join("records.jsonl"))?;
        Ok(Persist {
            sink: Mutex::new(std::io::BufWriter::new(file)),
            patches_dir,
            config_hash: config_hash.to_string(),
        })
    }

    fn record(&self, outcome: &ExampleOutcome, started_ms: u128) -> Result<RunRecord> {
        let patch_path = format!("patches/{}.png", outcome.example_id);
        outcome
            .result
            .final_patch
            .save_png(&self.patches_dir.join(format!("{}.png", outcome.example_id)))
            .map_err(RunnerError::Core)?;
        let record = RunRecord {
            example_id: outcome.example_id.clone(),
            config_hash: self.config_hash.clone(),
            iterations_used: outcome.result.iterations_used,
            succeeded: outcome.result.succeeded,
            success_at_1: outcome.result.success.at_1,
            success_at_5: outcome.result.success.at_5,
            success_at_10: outcome.result.success.at_10,
            final_loss: outcome.result.loss_trace.last().copied().unwrap_or(f64::NAN),
            final_patch_tv: attack::tv_loss(&outcome.result.final_patch),
            placement: outcome.result.placement,
            patch_path,
            clean_hit_at_1: outcome.clean_hits[0],
            clean_hit_at_10: outcome.clean_hits[2],
            started_ms,
            finished_ms: now_ms(),
        };
        let line = serde_json::to_string(&record)?;
        let mut sink = self.sink.lock().expect("record sink");
        writeln!(sink, "{line}")?;
        sink.flush()?;
        Ok(record)
    }
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Center crop used as the seed patch: a real image region from the corpus
/// (the next record in the split), mirroring a natural init patch.
pub fn seed_patch_for(images: &[Raster], index: usize, side: usize) -> Raster {
    let source = &images[(index + 1) % images.len()];
    let top_r = (source.height() - side) / 2;
    let top_c = (source.width() - side) / 2;
    let mut data = Vec::with_capacity(side * side * source.channels());
    for r in 0..side {
        for c in 0..side {
            for ch in 0..source.channels() {
                data.push(source.get(top_r + r, top_c + c, ch));
            }
        }
    }
    Raster::new(side, side, source.channels(), data).expect("crop shape")
}

/// Run attacks over the chosen examples on a bounded worker pool. Outcomes
/// come back in manifest order regardless of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn attack_batch(
    model: &dyn SurrogateModel,
    denoiser: &ConvDenoiser,
    manifest: &DatasetManifest,
    images: &[Raster],
    texts: &TextBatch,
    features: &[TextFeatures],
    clean: &ScoreMatrix,
    examples: &[usize],
    attack_cfg: &AttackConfig,
    run_seed: u64,
    workers: usize,
    persist: Option<&Persist>,
) -> Result<Vec<ExampleOutcome>> {
    let side = placement::patch_side_for_ratio(
        attack_cfg.patch_ratio,
        model.descriptor().image_size,
        model.descriptor().image_size,
    );
    let run_one = |&index: &usize| -> Result<ExampleOutcome> {
        let started = now_ms();
        let record = &manifest.records()[index];
        let image = &images[index];
        let seed_patch = seed_patch_for(images, index, side);
        let mut cfg = attack_cfg.clone();
        cfg.seed = derive_seed(run_seed, &record.id);
        let matched = clean.matched_texts(index).clone();
        let result = attack::run_attack(model, denoiser, image, &matched, texts, &seed_patch, &cfg)
            .map_err(RunnerError::Core)?;
        let mask = placement::make_mask(&result.placement);
        let attacked_image = placement::compose(image, &result.final_patch, &mask, &result.placement)
            .map_err(RunnerError::Core)?;
        let attacked_row =
            attack::score_row(model, &attacked_image, features).map_err(RunnerError::Core)?;
        let clean_hits = [1usize, 5, 10].map(|n| {
            eval::hit_at_n(clean.row(index), &matched, n.min(texts.len()))
        });
        let outcome = ExampleOutcome {
            index,
            example_id: record.id.clone(),
            result,
            attacked_row,
            clean_hits,
        };
        if let Some(p) = persist {
            p.record(&outcome, started)?;
        }
        Ok(outcome)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunnerError::Config(format!("worker pool: {e}")))?;
    let outcomes: std::result::Result<Vec<ExampleOutcome>, RunnerError> = pool.install(|| {
        use rayon::prelude::*;
        examples.par_iter().map(run_one).collect()
    });
    outcomes
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MatricesFile {
    pub example_ids: Vec<String>,
    pub matched_texts: Vec<Vec<usize>>,
    pub clean: Vec<Vec<f64>>,
    pub attacked: Vec<Vec<f64>>,
    pub attacked_examples: Vec<usize>,
    pub dataset: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub dataset: String,
    pub config_hash: String,
    pub examples_attacked: usize,
    pub report: eval::RetrievalReport,
    pub mean_iterations: f64,
    pub success_rate_at_criterion: f64,
    pub training: Option<TrainingSummary>,
}

/// Full pipeline: load or train the models, build the clean score matrix,
/// attack the evaluation split, and persist records, patches, matrices, and
/// the summary pair (CSV + JSON). A structured error record is written on
/// abort with partial results left in place.
pub fn run_experiment(
    eval_manifest: &DatasetManifest,
    source: ModelSource,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<ExperimentSummary> {
    std::fs::create_dir_all(out_dir)?;
    match run_experiment_inner(eval_manifest, source, cfg, out_dir) {
        Ok(summary) => Ok(summary),
        Err(err) => {
            let record = serde_json::json!({
                "status": "error",
                "message": err.to_string(),
                "config_hash": cfg.hash(),
            });
            let _ = std::fs::write(
                out_dir.join("error.json"),
                serde_json::to_string_pretty(&record).unwrap_or_default(),
            );
            Err(err)
        }
    }
}

fn run_experiment_inner(
    eval_manifest: &DatasetManifest,
    source: ModelSource,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<ExperimentSummary> {
    let (artifacts, training) = match source {
        ModelSource::Checkpoints { model, denoiser } => (load_artifacts(&model, &denoiser)?, None),
        ModelSource::Train { train_manifest, heldout_manifest } => {
            let train = crate::manifest::ingest_manifest(&train_manifest)?;
            let heldout = crate::manifest::ingest_manifest(&heldout_manifest)?;
            let (artifacts, report, denoiser_losses) = train_toy_model(&train, &heldout, cfg)?;
            save_artifacts(&out_dir.join("models"), &artifacts)?;
            let summary = TrainingSummary {
                epochs_run: report.epochs_run,
                clean_recall_at_1: report.clean_recall_at_1,
                final_model_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                final_denoiser_loss: denoiser_losses.last().copied().unwrap_or(f64::NAN),
            };
            (artifacts, Some(summary))
        }
    };
    let model = &artifacts.model;

    let images = eval_manifest.load_images()?;
    let (captions, matched) = eval_manifest.caption_pool();
    let vocab = model.vocabulary();
    let texts = TextBatch::from_captions(vocab, &captions).map_err(RunnerError::Core)?;
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
    let examples: Vec<usize> = (0..limit).collect();

    let config_hash = cfg.hash();
    let persist = Persist::create(out_dir, &config_hash)?;
    let outcomes = attack_batch(
        model,
        &artifacts.denoiser,
        eval_manifest,
        &images,
        &texts,
        &features,
        &clean,
        &examples,
        &cfg.attack,
        cfg.seed,
        cfg.workers,
        Some(&persist),
    )?;

    // Deterministic record file: rewrite in manifest order after the run.
    rewrite_records_sorted(out_dir)?;

    let mut attacked = clean.clone();
    for outcome in &outcomes {
        attacked = attacked
            .with_row(outcome.index, outcome.attacked_row.clone())
            .map_err(RunnerError::Core)?;
    }
    let report = eval::build_report(&clean, &attacked, Some(&examples)).map_err(RunnerError::Core)?;

    let matrices = MatricesFile {
        example_ids: eval_manifest.records().iter().map(|r| r.id.clone()).collect(),
        matched_texts: matched,
        clean: (0..clean.num_images()).map(|i| clean.row(i).to_vec()).collect(),
        attacked: (0..attacked.num_images()).map(|i| attacked.row(i).to_vec()).collect(),
        attacked_examples: examples.clone(),
        dataset: eval_manifest.split().to_string(),
    };
    std::fs::write(out_dir.join("matrices.json"), serde_json::to_string(&matrices)?)?;

    let mean_iterations = outcomes.iter().map(|o| o.result.iterations_used as f64).sum::<f64>()
        / outcomes.len().max(1) as f64;
    let success_rate = outcomes.iter().filter(|o| o.result.succeeded).count() as f64
        / outcomes.len().max(1) as f64;
    let summary = ExperimentSummary {
        dataset: eval_manifest.split().to_string(),
        config_hash,
        examples_attacked: outcomes.len(),
        report,
        mean_iterations,
        success_rate_at_criterion: success_rate,
        training,
    };
    write_summary(out_dir, &summary)?;
    Ok(summary)
}

fn rewrite_records_sorted(out_dir: &Path) -> Result<()> {
    let path = out_dir.join("records.jsonl");
    let text = std::fs::read_to_string(&path)?;
    let mut records: Vec<RunRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    records.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let mut out = String::new();
    for record in &records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(&path, out)?;
    Ok(())
}

/// Write the Table-2-shaped CSV and the raw-count JSON document.
pub fn write_summary(out_dir: &Path, summary: &ExperimentSummary) -> Result<()> {
    let row = report::row_from_retrieval_report(
        &summary.report,
        "toy-dual-encoder",
        &summary.dataset,
        "Ours",
    );
    report::write_table_csv(&out_dir.join("summary.csv"), &[row])?;
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

/// Rebuild the summary pair from persisted matrices (the `eval` subcommand).
pub fn summarize_run(run_dir: &Path) -> Result<ExperimentSummary> {
    let text = std::fs::read_to_string(run_dir.join("matrices.json"))
        .map_err(|e| RunnerError::Usage(format!("no matrices.json in run dir: {e}")))?;
    let matrices: MatricesFile = serde_json::from_str(&text)?;
    let matched: Vec<BTreeSet<usize>> = matrices
        .matched_texts
        .iter()
        .map(|m| m.iter().copied().collect())
        .collect();
    let clean = ScoreMatrix::new(matrices.clean.clone(), matched.clone()).map_err(RunnerError::Core)?;
    let attacked = ScoreMatrix::new(matrices.attacked.clone(), matched).map_err(RunnerError::Core)?;
    let report = eval::build_report(&clean, &attacked, Some(&matrices.attacked_examples))
        .map_err(RunnerError::Core)?;

    // Mean iterations and criterion success come from the record log when
    // present; zero otherwise (matrices alone cannot reconstruct them).
    let (mean_iterations, success_rate, config_hash) =
        match std::fs::read_to_string(run_dir.join("records.jsonl")) {
            Ok(text) => {
                let records: Vec<RunRecord> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<std::result::Result<_, _>>()?;
                let n = records.len().max(1) as f64;
                (
                    records.iter().map(|r| r.iterations_used as f64).sum::<f64>() / n,
                    records.iter().filter(|r| r.succeeded).count() as f64 / n,
                    records.first().map(|r| r.config_hash.clone()).unwrap_or_default(),
                )
            }
            Err(_) => (0.0, 0.0, String::new()),
        };
    let summary = ExperimentSummary {
        dataset: matrices.dataset.clone(),
        config_hash,
        examples_attacked: matrices.attacked_examples.len(),
        report,
        mean_iterations,
        success_rate_at_criterion: success_rate,
        training: None,
    };
    write_summary(run_dir, &summary)?;
    Ok(summary)
}
