use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dprewrite::clipping::{estimate_clip_constant, ClipRule, ClipSpec};
use dprewrite::corpus::{load_jsonl, write_jsonl, LabeledDocument, Vocab};
use dprewrite::evaluation::{text_bleu, ClassifierConfig};
use dprewrite::mechanisms::{calibrate, Epsilon, Mechanism, PrivacyParams, Sensitivity};
use dprewrite::model::checkpoint::Checkpoint;
use dprewrite::model::decode::DecodeStrategy;
use dprewrite::model::encode_batch;
use dprewrite::pipeline::{
    downstream_f1, load_data, prepare, rewrite_dataset, run_experiment, ExperimentConfig, Grouping, Prepared,
    RewriteOptions, RewriteRecord, Variant, VOCAB_FILE,
};
use dprewrite::{Error, Result};

#[derive(Parser)]
#[command(name = "dprewrite", version, about = "Differentially private text rewriting with a toy autoencoder")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration (JSON). Defaults to the toy setup of the variant.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Privacy budget, a positive number or `inf`.
    #[arg(long)]
    epsilon: Option<Epsilon>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    mechanism: Option<Mechanism>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Beam width used for decoding.
    #[arg(long)]
    beam: Option<usize>,
    /// Keep the original text next to each rewrite.
    #[arg(long)]
    audit: bool,
    /// Output directory (overrides the config).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipModeArg {
    Value,
    Norm,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    HalfSigma,
    TwoSigma,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupingArg {
    PerDocument,
    ComposeBudget,
    Concatenate,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder on the public corpus.
    Pretrain(Common),
    /// Iteratively prune the pretrained model.
    Prune(Common),
    /// Continue training the pruned model under calibrated noise (PR+).
    TrainNoisy(Common),
    /// Rewrite a JSONL dataset with a trained checkpoint.
    Rewrite {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Checkpoint directory; defaults to the variant's last stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        grouping: Option<GroupingArg>,
    },
    /// Score rewritten records: BLEU against their originals and macro-F1 of a
    /// classifier trained on them.
    Evaluate {
        /// Rewrite output (JSONL records).
        #[arg(long)]
        rewritten: PathBuf,
        /// Labeled test documents (JSONL); enables the downstream score.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Share of the rewritten records held out for early stopping.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print sensitivities and the noise scale for a clip constant and dimension.
    Calibrate {
        #[arg(long = "clip-c")]
        clip_c: f64,
        /// Number of (unpruned) latent coordinates.
        #[arg(long)]
        dim: usize,
        #[arg(long, value_enum, default_value = "value")]
        clip_mode: ClipModeArg,
        #[arg(long, default_value = "inf")]
        epsilon: Epsilon,
        /// Defaults to 1e-5 for Gaussian noise and 0 for Laplace.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value = "gaussian")]
        mechanism: Mechanism,
    },
    /// Fit a clipping constant to the encoder outputs on the public corpus.
    EstimateClip {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "half-sigma")]
        rule: RuleArg,
    },
    /// Run every stage of an experiment and write its report.
    Run(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
            if let Some(v) = c.variant {
                cfg.variant = v;
            }
            cfg
        }
        None => {
            let v = c.variant.unwrap_or(Variant::Clv);
            ExperimentConfig::toy(v, PathBuf::from("runs").join(v.to_string()))
        }
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = c.epsilon {
        cfg.privacy.epsilon = e;
    }
    if let Some(d) = c.delta {
        cfg.privacy.delta = d;
    }
    if let Some(m) = c.mechanism {
        cfg.privacy.mechanism = m;
        if m == Mechanism::Laplace && c.delta.is_none() {
            cfg.privacy.delta = 0.0;
        }
    }
    if let Some(b) = c.beam {
        cfg.beam = b;
    }
    if c.audit {
        cfg.audit = true;
    }
    if let Some(o) = &c.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the training stages up to `upto`, reusing cached checkpoints.
fn stages(cfg: &ExperimentConfig, upto: Variant) -> Result<Prepared> {
    let mut c = cfg.clone();
    c.variant = upto;
    if upto.is_pruned() && c.schedule.is_none() {
        c.schedule = ExperimentConfig::toy(upto, &c.output_dir).schedule;
    }
    c.validate()?;
    let data = load_data(&c).map_err(|e| e.in_stage("load"))?;
    prepare(&c, &data, &mut BTreeMap::new())
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn training_stage(common: &Common, upto: impl Fn(Variant) -> Result<Variant>) -> Result<()> {
    let cfg = load_config(common)?;
    let target = upto(cfg.variant)?;
    let p = stages(&cfg, target)?;
    print_json(&json!({
        "checkpoint": p.dir,
        "pretrain": p.pretrain,
        "pruning": p.pruning,
        "prune_mask": p.checkpoint.prune_mask,
        "prplus_epochs": p.prplus_epochs,
    }))
}

fn rewrite(common: &Common, input: &Path, output: &Path, checkpoint: Option<&Path>, grouping: Option<GroupingArg>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = match checkpoint {
        Some(d) => d.to_path_buf(),
        None => stages(&cfg, cfg.variant)?.dir,
    };
    let ck = Checkpoint::load(&dir)?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if let Some(trained) = ck.privacy {
        if trained != cfg.privacy {
            log::warn!(
                "checkpoint was trained for epsilon {} but rewriting uses {}",
                trained.epsilon,
                cfg.privacy.epsilon
            );
        }
    }
    let docs: Vec<(u64, LabeledDocument)> = load_jsonl(input)?.into_iter().enumerate().map(|(i, d)| (i as u64, d)).collect();
    let opts = RewriteOptions {
        seed: cfg.seed,
        strategy: DecodeStrategy::Beam(cfg.beam),
        audit: cfg.audit,
        grouping: match grouping {
            Some(GroupingArg::PerDocument) => Grouping::PerDocument,
            Some(GroupingArg::ComposeBudget) => Grouping::ComposeBudget,
            Some(GroupingArg::Concatenate) => Grouping::Concatenate,
            None => cfg.grouping,
        },
    };
    let records = rewrite_dataset(&docs, &ck, &vocab, &cfg.privacy, &opts)?;
    write_jsonl(output, &records)?;
    eprintln!("rewrote {} record(s) into {}", records.len(), output.display());
    Ok(())
}

fn evaluate(rewritten: &Path, test: Option<&Path>, val_fraction: f64, seed: u64) -> Result<()> {
    let text = fs::read_to_string(rewritten).map_err(|e| Error::io(rewritten, e))?;
    let records: Vec<RewriteRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let audited: Vec<&RewriteRecord> = records.iter().filter(|r| r.original_text.is_some()).collect();
    let bleu = if audited.is_empty() {
        log::warn!("no original texts in {}; rerun rewrite with --audit for BLEU", rewritten.display());
        None
    } else {
        let refs: Vec<String> = audited.iter().map(|r| r.original_text.clone().unwrap_or_default()).collect();
        let hyps: Vec<String> = audited.iter().map(|r| r.rewritten_text.clone()).collect();
        Some(text_bleu(&refs, &hyps)?)
    };
    let f1 = match test {
        Some(t) => {
            let docs: Vec<LabeledDocument> = records.iter().map(|r| LabeledDocument::new(r.rewritten_text.clone(), r.label.clone())).collect();
            let (train, val, _) = dprewrite::corpus::split(&docs, (1.0 - val_fraction, val_fraction, 0.0), seed)?;
            let cfg = ClassifierConfig {
                seed,
                ..ClassifierConfig::default()
            };
            Some(downstream_f1(&train, &val, &load_jsonl(t)?, &cfg)?.0)
        }
        None => None,
    };
    print_json(&json!({ "records": records.len(), "bleu": bleu, "macro_f1": f1 }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => training_stage(&c, |v| {
            Ok(if v == Variant::BaselineNormClip { v } else { Variant::Clv })
        }),
        Command::Prune(c) => training_stage(&c, |v| {
            if v == Variant::BaselineNormClip {
                return Err(Error::InvalidArgument("the recurrent baseline has no cross-attention to prune".into()));
            }
            Ok(Variant::Pr)
        }),
        Command::TrainNoisy(c) => training_stage(&c, |v| {
            if v == Variant::BaselineNormClip {
                return Err(Error::InvalidArgument("noisy training applies to the pruned transformer".into()));
            }
            Ok(Variant::PrPlus)
        }),
        Command::Rewrite {
            common,
            input,
            output,
            checkpoint,
            grouping,
        } => rewrite(&common, &input, &output, checkpoint.as_deref(), grouping),
        Command::Evaluate {
            rewritten,
            test,
            val_fraction,
            seed,
        } => evaluate(&rewritten, test.as_deref(), val_fraction, seed),
        Command::Calibrate {
            clip_c,
            dim,
            clip_mode,
            epsilon,
            delta,
            mechanism,
        } => {
            let spec = match clip_mode {
                ClipModeArg::Value => ClipSpec::by_value(clip_c)?,
                ClipModeArg::Norm => ClipSpec::by_norm(clip_c)?,
            };
            let delta = delta.unwrap_or(match mechanism {
                Mechanism::Gaussian => 1e-5,
                Mechanism::Laplace => 0.0,
            });
            let privacy = PrivacyParams {
                epsilon,
                delta,
                mechanism,
            };
            let cal = calibrate(&Sensitivity::for_clip(&spec, dim)?, &privacy)?;
            eprintln!(
                "delta_1 = {:.4}  delta_2 = {:.4}  noise scale = {:.6}",
                cal.sensitivity_l1, cal.sensitivity_l2, cal.noise_scale
            );
            print_json(&serde_json::to_value(cal)?)
        }
        Command::EstimateClip { common, rule } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg)?;
            let p = stages(&cfg, if cfg.variant == Variant::BaselineNormClip { cfg.variant } else { Variant::Clv })?;
            let latents = encode_batch(&data.public_val, &p.checkpoint.params)?;
            let rule = match rule {
                RuleArg::HalfSigma => ClipRule::HalfSigma,
                RuleArg::TwoSigma => ClipRule::TwoSigma,
            };
            print_json(&serde_json::to_value(estimate_clip_constant(&latents, rule)?)?)
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let report = run_experiment(&cfg)?;
            eprintln!(
                "{} at epsilon {}: BLEU {:.2}, macro-F1 {:.3} (originals {:.3}); report in {}",
                cfg.variant,
                cfg.privacy.epsilon,
                report.bleu.score,
                report.downstream.macro_f1,
                report.downstream.original_macro_f1,
                cfg.output_dir.join("report.json").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
