use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Grouping, PrPlusConfig};
use crate::clipping::ClipSpec;
use crate::corpus::{
    build_vocab, detokenize, generate_synthetic, load_jsonl, normalize, split, tokenize, CorpusKind, LabeledDocument,
    Vocab,
};
use crate::error::{invalid_arg, Error, Result};
use crate::latent::LatentVector;
use crate::mechanisms::{calibrate, compose_budget, delta_guideline, privatize_latent, Calibration, Epsilon, Mechanism, PrivacyParams, Sensitivity};
use crate::model::checkpoint::Checkpoint;
use crate::model::decode::{decode, DecodeStrategy};
use crate::model::train::{corpus_loss, train_epoch, train_steps, LatentOptions, Optimizer, TrainConfig};
use crate::model::{encode, ModelConfig, ModelParams, TokenSequence};
use crate::pruning::{effective_dim, iterative_prune_train, prune, PruneMask, PruneSchedule};
use crate::rng::{purpose, stream};

/// Everything the stages read, with the downstream dataset already split.
#[derive(Debug, Clone)]
pub struct Data {
    pub vocab: Vocab,
    pub public_train: Vec<TokenSequence>,
    pub public_val: Vec<TokenSequence>,
    /// Public documents dropped because they also occur downstream.
    pub public_filtered: usize,
    /// Downstream documents tagged with their position in the dataset.
    pub train: Vec<(u64, LabeledDocument)>,
    pub val: Vec<(u64, LabeledDocument)>,
    pub test: Vec<(u64, LabeledDocument)>,
}

fn read_public_file(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(load_jsonl(path)?.into_iter().map(|d| d.text).collect());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect())
}

/// Fails if any public document also occurs (after normalisation) downstream.
pub fn assert_disjoint(public: &[String], downstream: &[LabeledDocument]) -> Result<()> {
    let seen: HashSet<String> = downstream.iter().map(|d| normalize(&d.text)).collect();
    let shared = public.iter().filter(|t| seen.contains(&normalize(t))).count();
    if shared > 0 {
        return Err(Error::InvalidState(format!(
            "{shared} public document(s) also occur in the downstream dataset"
        )));
    }
    Ok(())
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let d = &cfg.data;
    let mut public: Vec<String> = generate_synthetic(CorpusKind::PublicCorpus, d.public_docs, d.public_seed)
        .into_iter()
        .map(|doc| doc.text)
        .collect();
    if let Some(p) = &d.public_path {
        public.extend(read_public_file(p)?);
    }
    let dataset = match &d.dataset_path {
        Some(p) => load_jsonl(p)?,
        None => generate_synthetic(CorpusKind::SentimentToy, d.dataset_docs, d.dataset_seed),
    };
    let downstream: HashSet<String> = dataset.iter().map(|doc| normalize(&doc.text)).collect();
    let before = public.len();
    public.retain(|t| !downstream.contains(&normalize(t)));
    let public_filtered = before - public.len();
    if public_filtered > 0 {
        log::info!("dropped {public_filtered} public documents that also occur downstream");
    }
    assert_disjoint(&public, &dataset)?;
    if public.is_empty() {
        return invalid_arg("the public corpus is empty");
    }

    let vocab = build_vocab(public.iter().map(String::as_str), d.max_vocab)?;
    let l = cfg.model.max_len;
    let seqs: Vec<TokenSequence> = public.iter().map(|t| tokenize(t, &vocab, l)).collect();
    let vf = cfg.pretrain.val_fraction;
    let (public_train, public_val, _) = split(&seqs, (1.0 - vf, vf, 0.0), cfg.seed)?;

    let indexed: Vec<(u64, LabeledDocument)> = dataset.into_iter().enumerate().map(|(i, doc)| (i as u64, doc)).collect();
    let (train, val, test) = split(&indexed, d.split, d.dataset_seed)?;
    Ok(Data {
        vocab,
        public_train,
        public_val,
        public_filtered,
        train,
        val,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

/// Reconstruction training on the public corpus with early stopping on
/// validation loss. The returned checkpoint is frozen and already rounded to
/// its on-disk precision.
pub fn pretrain(cfg: &ExperimentConfig, data: &Data) -> Result<(Checkpoint, PretrainSummary)> {
    let model_cfg = cfg.model_config(data.vocab.len());
    let mut params = ModelParams::init(&model_cfg, cfg.seed)?;
    let options = LatentOptions {
        clip: cfg.pretrain.clip_in_loop.then_some(cfg.clip),
        ..LatentOptions::default()
    };
    let pc = &cfg.pretrain;
    let mut opt = Optimizer::new(pc.train.optimizer.clone(), &params);
    let mut rng = stream(cfg.seed, purpose::PRETRAIN);
    let mut eval_rng = stream(cfg.seed, purpose::PRETRAIN - 100);
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut summary = PretrainSummary {
        epochs: 0,
        best_epoch: 0,
        train_losses: Vec::new(),
        val_losses: Vec::new(),
    };
    for epoch in 0..pc.max_epochs {
        let train = train_epoch(&mut params, &data.public_train, &pc.train, &mut opt, &options, &mut rng)?;
        let val = if data.public_val.is_empty() {
            train
        } else {
            corpus_loss(&params, &data.public_val, &options, &mut eval_rng)?
        };
        if !val.is_finite() {
            return Err(Error::Diagnostic(format!("validation loss is {val} after epoch {epoch}")));
        }
        log::info!("pretrain epoch {epoch}: train {train:.4}, val {val:.4}");
        summary.epochs = epoch + 1;
        summary.train_losses.push(train);
        summary.val_losses.push(val);
        if val < best.0 {
            best = (val, params.clone(), epoch);
        } else if epoch - best.2 >= pc.patience {
            break;
        }
    }
    let (_, mut params, best_epoch) = best;
    summary.best_epoch = best_epoch;
    params.round_to_f32();
    params.frozen = true;
    let mut ck = Checkpoint::new(params);
    ck.clip = Some(cfg.clip);
    Ok((ck, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub history: Vec<PruneMask>,
    pub losses: Vec<f64>,
}

/// Iterative pruning on the public corpus; the result is frozen with the
/// deployed mask attached.
pub fn prepare_pr(
    pretrained: &Checkpoint,
    public: &[TokenSequence],
    schedule: &PruneSchedule,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Checkpoint, PruneSummary)> {
    let mut params = pretrained.params.clone();
    params.frozen = false;
    let mut rng = stream(seed, purpose::PRUNE);
    let outcome = iterative_prune_train(&params, public, schedule, train, &mut rng)?;
    let mut params = outcome.params;
    params.round_to_f32();
    let ck = Checkpoint {
        params,
        prune_mask: Some(outcome.deployed),
        clip: pretrained.clip,
        privacy: None,
    };
    Ok((
        ck,
        PruneSummary {
            history: outcome.history,
            losses: outcome.losses,
        },
    ))
}

/// Noise calibration for rewriting with `ck` under `privacy`: the sensitivity
/// uses the checkpoint's clip and the number of unpruned latent coordinates.
pub fn calibration(ck: &Checkpoint, privacy: &PrivacyParams) -> Result<Calibration> {
    let clip = ck
        .clip
        .ok_or_else(|| Error::InvalidState("checkpoint carries no clip spec".into()))?;
    calibrate(&Sensitivity::for_clip(&clip, latent_dimension(ck)?)?, privacy)
}

/// `n`: latent coordinates left after pruning.
pub fn latent_dimension(ck: &Checkpoint) -> Result<usize> {
    let (tokens, width) = ck.params.config.latent_shape();
    match &ck.prune_mask {
        Some(m) if m.d_tok() != width => Err(Error::InvalidState(format!(
            "prune mask width {} does not match latent width {width}",
            m.d_tok()
        ))),
        Some(m) => Ok(effective_dim(m, tokens)),
        None => Ok(tokens * width),
    }
}

/// Continues training a pruned model with pruning, clipping and calibrated
/// noise applied to every encoder output.
pub fn prepare_pr_plus(
    pruned: &Checkpoint,
    public: &[TokenSequence],
    privacy: &PrivacyParams,
    epochs: usize,
    cfg: &PrPlusConfig,
    seed: u64,
) -> Result<Checkpoint> {
    if privacy.epsilon.is_infinite() {
        return invalid_arg("noisy training needs a finite epsilon");
    }
    if pruned.prune_mask.is_none() {
        return Err(Error::InvalidState("noisy training expects a pruned checkpoint".into()));
    }
    let cal = calibration(pruned, privacy)?;
    let options = LatentOptions {
        mask: pruned.prune_mask.clone(),
        clip: pruned.clip,
        noise: cal.noise(),
    };
    let mut params = pruned.params.clone();
    params.frozen = false;
    let mut opt = Optimizer::new(cfg.train.optimizer.clone(), &params);
    let mut rng = stream(seed, purpose::NOISY_TRAIN);
    for epoch in 0..epochs {
        let loss = train_steps(&mut params, public, &cfg.train, &mut opt, &options, cfg.steps_per_epoch, &mut rng)?;
        log::debug!("noisy epoch {epoch}: loss {loss:.4}");
    }
    params.round_to_f32();
    params.frozen = true;
    Ok(Checkpoint {
        params,
        prune_mask: pruned.prune_mask.clone(),
        clip: pruned.clip,
        privacy: Some(*privacy),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub doc_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_text: Option<String>,
    pub rewritten_text: String,
    pub label: String,
    pub epsilon_charged: Epsilon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteOptions {
    pub seed: u64,
    pub strategy: DecodeStrategy,
    pub audit: bool,
    pub grouping: Grouping,
}

/// Encode, prune, clip, noise and decode one text with its own noise stream.
pub fn rewrite_text(
    text: &str,
    doc_id: u64,
    ck: &Checkpoint,
    vocab: &Vocab,
    privacy: &PrivacyParams,
    seed: u64,
    strategy: DecodeStrategy,
) -> Result<String> {
    let clip: ClipSpec = ck
        .clip
        .ok_or_else(|| Error::InvalidState("checkpoint carries no clip spec".into()))?;
    let cfg: &ModelConfig = &ck.params.config;
    let x = tokenize(text, vocab, cfg.max_len);
    let z = encode(&x, &ck.params)?;
    let z = match &ck.prune_mask {
        Some(m) => prune(&z, m)?,
        None => z,
    };
    let zbar: LatentVector = clip.apply_latent(&z);
    let sens = Sensitivity::for_clip(&clip, latent_dimension(ck)?)?;
    let mut rng = stream(seed, doc_id);
    let zdot = privatize_latent(&zbar, ck.prune_mask.as_ref(), &sens, privacy, &mut rng)?;
    let y = decode(&zdot, &ck.params, strategy)?;
    Ok(detokenize(&y.ids, vocab))
}

struct Unit {
    doc_id: u64,
    text: String,
    label: String,
    charged: Epsilon,
}

fn units(docs: &[(u64, LabeledDocument)], epsilon: Epsilon, grouping: Grouping) -> Vec<Unit> {
    let single = |(id, d): &(u64, LabeledDocument), charged| Unit {
        doc_id: *id,
        text: d.text.clone(),
        label: d.label.clone(),
        charged,
    };
    if grouping == Grouping::PerDocument {
        return docs.iter().map(|d| single(d, epsilon)).collect();
    }
    let mut groups: BTreeMap<&str, Vec<&(u64, LabeledDocument)>> = BTreeMap::new();
    let mut out = Vec::new();
    for d in docs {
        match &d.1.individual_id {
            Some(who) => groups.entry(who.as_str()).or_default().push(d),
            None => out.push(single(d, epsilon)),
        }
    }
    for (who, members) in groups {
        match grouping {
            Grouping::ComposeBudget => {
                let charged = match epsilon {
                    Epsilon::Finite(e) => Epsilon::Finite(compose_budget(e, members.len() as u32)),
                    Epsilon::Infinite => Epsilon::Infinite,
                };
                out.extend(members.into_iter().map(|d| single(d, charged)));
            }
            Grouping::Concatenate => {
                let labels: HashSet<&str> = members.iter().map(|d| d.1.label.as_str()).collect();
                if labels.len() > 1 {
                    log::warn!("individual `{who}` has mixed labels; keeping the first");
                }
                out.push(Unit {
                    doc_id: members[0].0,
                    text: members.iter().map(|d| d.1.text.as_str()).collect::<Vec<_>>().join(" "),
                    label: members[0].1.label.clone(),
                    charged: epsilon,
                });
            }
            Grouping::PerDocument => unreachable!(),
        }
    }
    out.sort_by_key(|u| u.doc_id);
    out
}

/// Rewrites every document in parallel. Records come back ordered by `doc_id`;
/// the noise for a document depends only on `(seed, doc_id)`.
pub fn rewrite_dataset(
    docs: &[(u64, LabeledDocument)],
    ck: &Checkpoint,
    vocab: &Vocab,
    privacy: &PrivacyParams,
    opts: &RewriteOptions,
) -> Result<Vec<RewriteRecord>> {
    if docs.is_empty() {
        log::warn!("nothing to rewrite: the dataset is empty");
        return Ok(Vec::new());
    }
    if !ck.params.frozen {
        return Err(Error::InvalidState("rewriting needs a frozen checkpoint".into()));
    }
    if ck.params.config.vocab_size != vocab.len() {
        return Err(Error::InvalidState(format!(
            "checkpoint expects {} tokens but the vocabulary has {}",
            ck.params.config.vocab_size,
            vocab.len()
        )));
    }
    privacy.validate()?;
    let guideline = delta_guideline(docs.len() as u64);
    if privacy.mechanism == Mechanism::Gaussian && privacy.delta > guideline {
        log::warn!(
            "delta {} exceeds {guideline}, the guideline for {} documents",
            privacy.delta,
            docs.len()
        );
    }
    calibration(ck, privacy)?;
    let units = units(docs, privacy.epsilon, opts.grouping);
    let originals: BTreeMap<u64, &str> = docs.iter().map(|(i, d)| (*i, d.text.as_str())).collect();
    let results = crate::parallel::map(&units, |u| {
        rewrite_text(&u.text, u.doc_id, ck, vocab, privacy, opts.seed, opts.strategy)
    });
    units
        .iter()
        .zip(results)
        .map(|(u, r)| {
            Ok(RewriteRecord {
                doc_id: u.doc_id,
                original_text: opts.audit.then(|| {
                    if opts.grouping == Grouping::Concatenate {
                        u.text.clone()
                    } else {
                        originals[&u.doc_id].to_string()
                    }
                }),
                rewritten_text: r?,
                label: u.label.clone(),
                epsilon_charged: u.charged,
            })
        })
        .collect()
}
