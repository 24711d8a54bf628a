//! Experiment orchestration: pretrain → (prune → noisy training) → rewrite →
//! evaluate, for the four model variants.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::{DataConfig, ExperimentConfig, Grouping, PrPlusConfig, PretrainConfig, Variant};
pub use stages::{
    assert_disjoint, calibration, latent_dimension, load_data, prepare_pr, prepare_pr_plus, pretrain, rewrite_dataset,
    rewrite_text, Data, PretrainSummary, PruneSummary, RewriteOptions, RewriteRecord,
};

use crate::clipping::{estimate_clip_constant, ClipEstimate, ClipMode, ClipRule, ClipSpec};
use crate::corpus::{write_jsonl, LabeledDocument, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{macro_f1, text_bleu, train_classifier, BleuResult, ClassifierConfig};
use crate::mechanisms::{delta_guideline, Calibration, Epsilon, Mechanism, PrivacyParams};
use crate::model::checkpoint::Checkpoint;
use crate::model::decode::DecodeStrategy;
use crate::model::{encode_batch, Architecture};
use crate::pruning::PruneMask;

pub const REPORT_VERSION: u32 = 1;
pub const VOCAB_FILE: &str = "vocab.json";
const STAGE_FILE: &str = "stage.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub public_train: usize,
    pub public_val: usize,
    pub public_filtered: usize,
    pub vocab_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub d_tok: usize,
    pub pruned_indices: Vec<usize>,
    pub pruned_fraction: f64,
    /// Latent coordinates before pruning.
    pub full_dimension: usize,
    /// Coordinates the sensitivity is computed over.
    pub effective_dimension: usize,
    /// Pruned fraction after each pruning round.
    pub round_fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCheck {
    pub recomputed_noise_scale: f64,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Downstream {
    pub macro_f1: f64,
    /// Same classifier trained on the original (not rewritten) training data.
    pub original_macro_f1: f64,
    pub classifier_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub config: ExperimentConfig,
    pub architecture: Architecture,
    pub data: DataSummary,
    pub pretrain: PretrainSummary,
    pub pruning: Option<PruneSummary>,
    pub mask: MaskStats,
    pub prplus_epochs: Option<usize>,
    pub clip: ClipSpec,
    /// Fitted on unclipped encoder outputs of the public validation split.
    pub clip_estimate: ClipEstimate,
    pub calibration: Calibration,
    pub calibration_check: CalibrationCheck,
    pub delta_guideline: f64,
    pub rewritten_documents: usize,
    pub bleu: BleuResult,
    pub downstream: Downstream,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

/// The noise scale from first principles, independent of `mechanisms`.
fn recompute_noise_scale(clip: &ClipSpec, n: usize, privacy: &PrivacyParams) -> f64 {
    let Epsilon::Finite(eps) = privacy.epsilon else {
        return 0.0;
    };
    let n = n as f64;
    let (l1, l2) = match clip.mode {
        ClipMode::ByValue => ((clip.c_max - clip.c_min) * n, (clip.c_max - clip.c_min) * n.sqrt()),
        ClipMode::ByNorm => (2.0 * clip.c * n.sqrt(), 2.0 * clip.c),
    };
    match privacy.mechanism {
        Mechanism::Laplace => l1 / eps,
        Mechanism::Gaussian => (2.0 * (1.25 / privacy.delta).ln()).sqrt() * l2 / eps,
    }
}

pub fn check_calibration(ck: &Checkpoint, privacy: &PrivacyParams) -> Result<(Calibration, CalibrationCheck)> {
    let cal = calibration(ck, privacy)?;
    let clip = ck.clip.expect("calibration succeeded so a clip is present");
    let again = recompute_noise_scale(&clip, latent_dimension(ck)?, privacy);
    let matches = (again - cal.noise_scale).abs() <= 1e-12 * again.abs().max(1.0);
    Ok((
        cal,
        CalibrationCheck {
            recomputed_noise_scale: again,
            matches,
        },
    ))
}

/// Loads `dir` if its recorded key equals `key`, otherwise builds and saves it.
fn cached<T: Serialize + DeserializeOwned>(
    dir: &Path,
    key: &Value,
    vocab: &Vocab,
    build: impl FnOnce() -> Result<(Checkpoint, T)>,
) -> Result<(Checkpoint, T)> {
    let stage_path = dir.join(STAGE_FILE);
    if let Ok(text) = fs::read_to_string(&stage_path) {
        if let Ok(stored) = serde_json::from_str::<Value>(&text) {
            if stored.get("key") == Some(key) {
                match (Checkpoint::load(dir), serde_json::from_value::<T>(stored["summary"].clone())) {
                    (Ok(ck), Ok(summary)) => {
                        log::info!("reusing {}", dir.display());
                        return Ok((ck, summary));
                    }
                    _ => log::warn!("{} is stale or damaged; rebuilding", dir.display()),
                }
            }
        }
    }
    let (ck, summary) = build()?;
    ck.save(dir)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let stage = json!({ "key": key, "summary": summary });
    fs::write(&stage_path, serde_json::to_string_pretty(&stage)? + "\n").map_err(|e| Error::io(&stage_path, e))?;
    Ok((ck, summary))
}

fn stage_keys(cfg: &ExperimentConfig) -> (Value, Value) {
    let pre = json!({
        "architecture": cfg.variant.architecture(),
        "model": cfg.model,
        "pretrain": cfg.pretrain,
        "clip": if cfg.pretrain.clip_in_loop { json!(cfg.clip) } else { Value::Null },
        "rewrite_clip": cfg.clip,
        "data": cfg.data,
        "seed": cfg.seed,
    });
    let prune = json!({ "pretrain": pre.clone(), "schedule": cfg.schedule });
    (pre, prune)
}

/// Checkpoints up to and including the variant's last training stage.
pub struct Prepared {
    pub checkpoint: Checkpoint,
    /// Directory the checkpoint (and its `vocab.json`) lives in.
    pub dir: PathBuf,
    pub pretrain: PretrainSummary,
    pub pruning: Option<PruneSummary>,
    pub prplus_epochs: Option<usize>,
}

pub fn prepare(cfg: &ExperimentConfig, data: &Data, timings: &mut BTreeMap<String, f64>) -> Result<Prepared> {
    let root = cfg.checkpoint_root();
    let (pre_key, prune_key) = stage_keys(cfg);
    let arch = match cfg.variant.architecture() {
        Architecture::TinyTransformer => "transformer",
        Architecture::RecurrentBaseline => "recurrent",
    };
    let t = Instant::now();
    let pre_dir = root.join(format!("pretrain-{arch}"));
    let (pretrained, pre_summary) = cached(&pre_dir, &pre_key, &data.vocab, || {
        pretrain(cfg, data)
    })
    .map_err(|e| e.in_stage("pretrain"))?;
    timings.insert("pretrain".into(), t.elapsed().as_secs_f64());
    if !cfg.variant.is_pruned() {
        return Ok(Prepared {
            checkpoint: pretrained,
            dir: pre_dir,
            pretrain: pre_summary,
            pruning: None,
            prplus_epochs: None,
        });
    }

    let schedule = cfg.schedule.as_ref().expect("validated: pruned variants carry a schedule");
    let t = Instant::now();
    let prune_dir = root.join("prune");
    let (pruned, prune_summary) = cached(&prune_dir, &prune_key, &data.vocab, || {
        prepare_pr(&pretrained, &data.public_train, schedule, &cfg.pretrain.train, cfg.seed)
    })
    .map_err(|e| e.in_stage("prune"))?;
    timings.insert("prune".into(), t.elapsed().as_secs_f64());
    if cfg.variant != config::Variant::PrPlus {
        return Ok(Prepared {
            checkpoint: pruned,
            dir: prune_dir,
            pretrain: pre_summary,
            pruning: Some(prune_summary),
            prplus_epochs: None,
        });
    }

    let epochs = cfg.prplus_epoch_count()?;
    let key = json!({ "prune": prune_key, "privacy": cfg.privacy, "epochs": epochs, "prplus": cfg.prplus });
    let t = Instant::now();
    let noisy_dir = root.join(format!("pr-plus-eps{}", cfg.privacy.epsilon));
    let (noisy, ()) = cached(&noisy_dir, &key, &data.vocab, || {
        Ok((prepare_pr_plus(&pruned, &data.public_train, &cfg.privacy, epochs, &cfg.prplus, cfg.seed)?, ()))
    })
    .map_err(|e| e.in_stage("train-noisy"))?;
    timings.insert("train-noisy".into(), t.elapsed().as_secs_f64());
    Ok(Prepared {
        checkpoint: noisy,
        dir: noisy_dir,
        pretrain: pre_summary,
        pruning: Some(prune_summary),
        prplus_epochs: Some(epochs),
    })
}

pub fn mask_stats(ck: &Checkpoint, pruning: Option<&PruneSummary>) -> Result<MaskStats> {
    let (tokens, width) = ck.params.config.latent_shape();
    let empty = PruneMask::empty(width);
    let mask = ck.prune_mask.as_ref().unwrap_or(&empty);
    Ok(MaskStats {
        d_tok: width,
        pruned_indices: mask.indices().to_vec(),
        pruned_fraction: mask.fraction(),
        full_dimension: tokens * width,
        effective_dimension: latent_dimension(ck)?,
        round_fractions: pruning.map_or_else(Vec::new, |p| p.history.iter().map(PruneMask::fraction).collect()),
    })
}

/// Macro-F1 on the original test split of a classifier trained on `train`
/// and early-stopped on `val`.
pub fn downstream_f1(
    train: &[LabeledDocument],
    val: &[LabeledDocument],
    test: &[LabeledDocument],
    cfg: &ClassifierConfig,
) -> Result<(f64, usize)> {
    let model = train_classifier(train, val, cfg)?;
    Ok((macro_f1(&model, test)?, model.epochs_trained))
}

fn as_docs(records: &[RewriteRecord]) -> Vec<LabeledDocument> {
    records.iter().map(|r| LabeledDocument::new(r.rewritten_text.clone(), r.label.clone())).collect()
}

/// Runs every stage of `cfg` and writes `rewritten.jsonl` and `report.json`
/// into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let data = load_data(cfg).map_err(|e| e.in_stage("load"))?;
    timings.insert("load".into(), t.elapsed().as_secs_f64());
    let prepared = prepare(cfg, &data, &mut timings)?;
    let ck = &prepared.checkpoint;

    let latents = encode_batch(&data.public_val, &ck.params).map_err(|e| e.in_stage("estimate-clip"))?;
    let clip_estimate = estimate_clip_constant(&latents, ClipRule::HalfSigma).map_err(|e| e.in_stage("estimate-clip"))?;
    let (cal, check) = check_calibration(ck, &cfg.privacy).map_err(|e| e.in_stage("rewrite"))?;
    if !check.matches {
        return Err(Error::Diagnostic(format!(
            "noise scale {} disagrees with the recomputed {}",
            cal.noise_scale, check.recomputed_noise_scale
        ))
        .in_stage("rewrite"));
    }

    let t = Instant::now();
    let opts = RewriteOptions {
        seed: cfg.seed,
        strategy: DecodeStrategy::Beam(cfg.beam),
        audit: true,
        grouping: cfg.grouping,
    };
    let rewrite = |docs| rewrite_dataset(docs, ck, &data.vocab, &cfg.privacy, &opts).map_err(|e| e.in_stage("rewrite"));
    let train_rw = rewrite(&data.train)?;
    let val_rw = rewrite(&data.val)?;
    timings.insert("rewrite".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let refs: Vec<String> = train_rw.iter().map(|r| r.original_text.clone().unwrap_or_default()).collect();
    let hyps: Vec<String> = train_rw.iter().map(|r| r.rewritten_text.clone()).collect();
    let bleu = text_bleu(&refs, &hyps).map_err(|e| e.in_stage("evaluate"))?;
    let test: Vec<LabeledDocument> = data.test.iter().map(|(_, d)| d.clone()).collect();
    let plain = |v: &[(u64, LabeledDocument)]| v.iter().map(|(_, d)| d.clone()).collect::<Vec<_>>();
    let ccfg = ClassifierConfig {
        seed: cfg.seed,
        ..cfg.classifier.clone()
    };
    let (f1, epochs) = downstream_f1(&as_docs(&train_rw), &as_docs(&val_rw), &test, &ccfg).map_err(|e| e.in_stage("evaluate"))?;
    let (f1_orig, _) = downstream_f1(&plain(&data.train), &plain(&data.val), &test, &ccfg).map_err(|e| e.in_stage("evaluate"))?;
    timings.insert("evaluate".into(), t.elapsed().as_secs_f64());

    let mut records: Vec<RewriteRecord> = train_rw.into_iter().chain(val_rw).collect();
    records.sort_by_key(|r| r.doc_id);
    if !cfg.audit {
        records.iter_mut().for_each(|r| r.original_text = None);
    }
    write_jsonl(&cfg.output_dir.join("rewritten.jsonl"), &records)?;

    let report = Report {
        version: REPORT_VERSION,
        config: cfg.clone(),
        architecture: cfg.variant.architecture(),
        data: DataSummary {
            public_train: data.public_train.len(),
            public_val: data.public_val.len(),
            public_filtered: data.public_filtered,
            vocab_size: data.vocab.len(),
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
        },
        pretrain: prepared.pretrain.clone(),
        pruning: prepared.pruning.clone(),
        mask: mask_stats(ck, prepared.pruning.as_ref())?,
        prplus_epochs: prepared.prplus_epochs,
        clip: cfg.clip,
        clip_estimate,
        calibration: cal,
        calibration_check: check,
        delta_guideline: delta_guideline(records.len() as u64),
        rewritten_documents: records.len(),
        bleu,
        downstream: Downstream {
            macro_f1: f1,
            original_macro_f1: f1_orig,
            classifier_epochs: epochs,
        },
        timings,
    };
    let path = cfg.output_dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
