use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dprewrite::clipping::ClipSpec;
use dprewrite::corpus::LabeledDocument;
use dprewrite::mechanisms::{Epsilon, NoiseSpec, PrivacyParams};
use dprewrite::model::decode::{decode, DecodeStrategy};
use dprewrite::model::train::corpus_loss;
use dprewrite::model::{encode, LatentOptions};
use dprewrite::corpus::{detokenize, tokenize};
use dprewrite::pipeline::*;
use dprewrite::pruning::prune;
use dprewrite::rng::stream;
use dprewrite::Error;
use serde_json::Value;

fn tiny(variant: Variant, out: impl AsRef<Path>) -> ExperimentConfig {
    let out = out.as_ref();
    let mut cfg = ExperimentConfig::toy(variant, out);
    cfg.model.d_tok = 16;
    cfg.model.hidden = 32;
    cfg.model.embed_dim = 16;
    cfg.model.max_len = 10;
    cfg.data.public_docs = 200;
    cfg.data.dataset_docs = 40;
    cfg.pretrain.max_epochs = 2;
    cfg.prplus.max_epochs = 3;
    cfg.prplus.steps_per_epoch = 5;
    cfg.beam = 2;
    if let Some(s) = cfg.schedule.as_mut() {
        s.retrain_steps = 5;
    }
    cfg
}

fn read_report(dir: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timings");
    v
}

#[test]
fn run_writes_report_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Variant::Clv, dir.path());
    cfg.privacy.epsilon = Epsilon::Finite(50.0);
    let report = run_experiment(&cfg).unwrap();

    assert_eq!(report.rewritten_documents, report.data.train + report.data.val);
    assert!(report.calibration_check.matches);
    assert!((0.0..=100.0).contains(&report.bleu.score));
    assert!((0.0..=1.0).contains(&report.downstream.macro_f1));
    assert_eq!(report.mask.effective_dimension, report.mask.full_dimension);
    assert_eq!(report.calibration.dimension, 10 * 16);
    for stage in ["load", "pretrain", "rewrite", "evaluate"] {
        assert!(report.timings.contains_key(stage), "{stage}");
    }

    let text = fs::read_to_string(dir.path().join("rewritten.jsonl")).unwrap();
    let records: Vec<RewriteRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), report.rewritten_documents);
    assert!(records.windows(2).all(|w| w[0].doc_id < w[1].doc_id));
    assert!(records.iter().all(|r| r.original_text.is_none() && r.epsilon_charged == Epsilon::Finite(50.0)));
    assert!(!text.contains("original_text"));

    let stored: Report = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(stored, report);
}

#[test]
fn reruns_are_identical_apart_from_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::PrPlus, dir.path());
    run_experiment(&cfg).unwrap();
    let records = fs::read(dir.path().join("rewritten.jsonl")).unwrap();
    let report = read_report(dir.path());

    // Cached stage checkpoints.
    run_experiment(&cfg).unwrap();
    assert_eq!(fs::read(dir.path().join("rewritten.jsonl")).unwrap(), records);
    assert_eq!(read_report(dir.path()), report);

    // From scratch.
    fs::remove_dir_all(cfg.checkpoint_root()).unwrap();
    run_experiment(&cfg).unwrap();
    assert_eq!(fs::read(dir.path().join("rewritten.jsonl")).unwrap(), records);
    assert_eq!(read_report(dir.path()), report);
}

#[test]
fn stages_land_in_named_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::PrPlus, dir.path());
    let data = load_data(&cfg).unwrap();
    let mut timings = BTreeMap::new();
    let p = prepare(&cfg, &data, &mut timings).unwrap();
    let root = cfg.checkpoint_root();
    assert_eq!(p.dir, root.join("pr-plus-eps500"));
    for stage in ["pretrain-transformer", "prune", "pr-plus-eps500"] {
        assert!(root.join(stage).join(VOCAB_FILE).exists(), "{stage}");
    }
    assert_eq!(p.checkpoint.privacy, Some(cfg.privacy));
    assert_eq!(p.prplus_epochs, Some(2));
    assert_eq!(timings.keys().collect::<Vec<_>>(), ["pretrain", "prune", "train-noisy"]);
    let on_disk = dprewrite::model::checkpoint::Checkpoint::load(&p.dir).unwrap();
    assert_eq!(on_disk.privacy, Some(cfg.privacy));
    assert_eq!(on_disk, p.checkpoint);

    let clv = tiny(Variant::Clv, dir.path());
    let unpruned = prepare(&clv, &data, &mut BTreeMap::new()).unwrap().checkpoint;
    let (pruned_cal, full_cal) = (calibration(&p.checkpoint, &cfg.privacy).unwrap(), calibration(&unpruned, &cfg.privacy).unwrap());
    assert!(pruned_cal.dimension < full_cal.dimension);
    assert!(pruned_cal.noise_scale < full_cal.noise_scale);

    let baseline = tiny(Variant::BaselineNormClip, dir.path());
    let p = prepare(&baseline, &load_data(&baseline).unwrap(), &mut BTreeMap::new()).unwrap();
    assert_eq!(p.dir, root.join("pretrain-recurrent"));
    assert!(p.checkpoint.prune_mask.is_none());
}

#[test]
fn infinite_budget_is_the_noiseless_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Pr, dir.path());
    let data = load_data(&cfg).unwrap();
    let ck = prepare(&cfg, &data, &mut BTreeMap::new()).unwrap().checkpoint;
    let privacy = PrivacyParams::gaussian(Epsilon::Infinite, 1e-5).unwrap();
    let strategy = DecodeStrategy::Beam(2);
    let opts = |seed| RewriteOptions {
        seed,
        strategy,
        audit: false,
        grouping: Grouping::PerDocument,
    };
    let a = rewrite_dataset(&data.train, &ck, &data.vocab, &privacy, &opts(0)).unwrap();
    let b = rewrite_dataset(&data.train, &ck, &data.vocab, &privacy, &opts(9)).unwrap();
    assert_eq!(a, b);

    let clip = ck.clip.unwrap();
    for ((_, doc), rec) in data.train.iter().zip(&a) {
        let z = encode(&tokenize(&doc.text, &data.vocab, 10), &ck.params).unwrap();
        let z = clip.apply_latent(&prune(&z, ck.prune_mask.as_ref().unwrap()).unwrap());
        let y = decode(&z, &ck.params, strategy).unwrap();
        assert_eq!(rec.rewritten_text, detokenize(&y.ids, &data.vocab));
    }
}

#[test]
fn noise_depends_only_on_seed_and_document() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Clv, dir.path());
    let data = load_data(&cfg).unwrap();
    let ck = prepare(&cfg, &data, &mut BTreeMap::new()).unwrap().checkpoint;
    let privacy = PrivacyParams::gaussian(Epsilon::Finite(20.0), 1e-5).unwrap();
    let opts = RewriteOptions {
        seed: 4,
        strategy: DecodeStrategy::Greedy,
        audit: true,
        grouping: Grouping::PerDocument,
    };
    let all = rewrite_dataset(&data.train, &ck, &data.vocab, &privacy, &opts).unwrap();
    let odd: Vec<_> = data.train.iter().skip(1).step_by(2).cloned().collect();
    let some = rewrite_dataset(&odd, &ck, &data.vocab, &privacy, &opts).unwrap();
    for r in &some {
        assert_eq!(Some(r), all.iter().find(|a| a.doc_id == r.doc_id));
    }
    let other = rewrite_dataset(&data.train, &ck, &data.vocab, &privacy, &RewriteOptions { seed: 5, ..opts }).unwrap();
    assert_ne!(all, other);
}

#[test]
fn grouping_charges_or_merges_an_individual() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Clv, dir.path());
    let data = load_data(&cfg).unwrap();
    let ck = prepare(&cfg, &data, &mut BTreeMap::new()).unwrap().checkpoint;
    let privacy = PrivacyParams::gaussian(Epsilon::Finite(10.0), 1e-5).unwrap();
    let person = |text: &str, who: Option<&str>| LabeledDocument {
        individual_id: who.map(String::from),
        ..LabeledDocument::new(text, "positive")
    };
    let docs = vec![
        (0, person("the food was great", Some("a"))),
        (1, person("great service", Some("a"))),
        (2, person("i loved it", None)),
        (3, person("the staff was friendly", Some("a"))),
    ];
    let run = |grouping| {
        let opts = RewriteOptions {
            seed: 0,
            strategy: DecodeStrategy::Greedy,
            audit: true,
            grouping,
        };
        rewrite_dataset(&docs, &ck, &data.vocab, &privacy, &opts).unwrap()
    };

    let composed = run(Grouping::ComposeBudget);
    let charged: Vec<Epsilon> = composed.iter().map(|r| r.epsilon_charged).collect();
    let k3 = Epsilon::Finite(30.0);
    assert_eq!(charged, [k3, k3, Epsilon::Finite(10.0), k3]);

    let merged = run(Grouping::Concatenate);
    assert_eq!(merged.len(), 2);
    assert_eq!(merged[0].doc_id, 0);
    assert_eq!(
        merged[0].original_text.as_deref(),
        Some("the food was great great service the staff was friendly")
    );
    assert!(merged.iter().all(|r| r.epsilon_charged == Epsilon::Finite(10.0)));

    let plain = run(Grouping::PerDocument);
    assert_eq!(plain.len(), 4);
    assert!(plain.iter().all(|r| r.epsilon_charged == Epsilon::Finite(10.0)));
}

#[test]
fn empty_dataset_rewrites_to_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Clv, dir.path());
    let data = load_data(&cfg).unwrap();
    let ck = prepare(&cfg, &data, &mut BTreeMap::new()).unwrap().checkpoint;
    let opts = RewriteOptions {
        seed: 0,
        strategy: DecodeStrategy::Greedy,
        audit: false,
        grouping: Grouping::PerDocument,
    };
    assert!(rewrite_dataset(&[], &ck, &data.vocab, &cfg.privacy, &opts).unwrap().is_empty());
}

#[test]
fn unfrozen_or_mismatched_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Clv, dir.path());
    let data = load_data(&cfg).unwrap();
    let ck = prepare(&cfg, &data, &mut BTreeMap::new()).unwrap().checkpoint;
    let opts = RewriteOptions {
        seed: 0,
        strategy: DecodeStrategy::Greedy,
        audit: false,
        grouping: Grouping::PerDocument,
    };
    let mut thawed = ck.clone();
    thawed.params.frozen = false;
    assert!(matches!(
        rewrite_dataset(&data.train, &thawed, &data.vocab, &cfg.privacy, &opts),
        Err(Error::InvalidState(_))
    ));
    let other = dprewrite::corpus::build_vocab(["just a few words"], 100).unwrap();
    assert!(rewrite_dataset(&data.train, &ck, &other, &cfg.privacy, &opts).is_err());
}

#[test]
fn public_and_downstream_data_must_be_disjoint() {
    let shared = "the soup was cold and the staff was rude";
    let downstream = [LabeledDocument::new(shared, "negative")];
    assert!(assert_disjoint(&["something else".into()], &downstream).is_ok());
    let err = assert_disjoint(&["The  soup was cold and the staff was rude".into()], &downstream).unwrap_err();
    assert!(matches!(err, Error::InvalidState(_)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    fs::write(&path, format!("{}\n", serde_json::json!({ "text": shared, "label": "negative" }))).unwrap();
    let mut cfg = tiny(Variant::Clv, dir.path());
    cfg.data.dataset_path = Some(path.clone());
    cfg.data.public_path = Some(path);
    assert!(cfg.validate().is_err());

    // Overlapping public text is filtered out rather than leaking into training.
    let public = dir.path().join("public.txt");
    fs::write(&public, format!("{shared}\nan unrelated public sentence\n")).unwrap();
    let mut cfg = tiny(Variant::Clv, dir.path());
    cfg.data.public_path = Some(public);
    cfg.data.dataset_path = Some(dir.path().join("data.jsonl"));
    let data = load_data(&cfg).unwrap();
    assert_eq!(data.public_filtered, 1);
}

#[test]
fn stage_errors_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Variant::Clv, dir.path());
    cfg.data.dataset_path = Some(dir.path().join("missing.jsonl"));
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "load", .. }), "{err}");
    assert!(err.to_string().contains("missing.jsonl"));
}

#[test]
fn noisy_training_helps_under_its_own_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Variant::PrPlus, dir.path());
    cfg.pretrain.max_epochs = 4;
    cfg.privacy.epsilon = Epsilon::Finite(100.0);
    cfg.prplus_epochs = Some(8);
    cfg.prplus.steps_per_epoch = 20;
    let data = load_data(&cfg).unwrap();
    let plus = prepare(&cfg, &data, &mut BTreeMap::new()).unwrap().checkpoint;
    let pr = prepare(&ExperimentConfig { variant: Variant::Pr, ..cfg.clone() }, &data, &mut BTreeMap::new())
        .unwrap()
        .checkpoint;
    let cal = calibration(&pr, &cfg.privacy).unwrap();
    let options = LatentOptions {
        mask: pr.prune_mask.clone(),
        clip: pr.clip,
        noise: Some(NoiseSpec::new(cfg.privacy.mechanism, cal.noise_scale, cal.dimension).unwrap()),
    };
    let loss = |ck: &dprewrite::model::checkpoint::Checkpoint| {
        corpus_loss(&ck.params, &data.public_val, &options, &mut stream(3, 3)).unwrap()
    };
    let (before, after) = (loss(&pr), loss(&plus));
    assert!(after < before, "noisy validation loss {before} -> {after}");
    assert_eq!(ClipSpec::by_value(0.1).unwrap(), plus.clip.unwrap());
}

#[test]
fn reports_match_the_published_schema() {
    let schema: Value =
        serde_json::from_str(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/report.schema.json")).unwrap())
            .unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::BaselineNormClip, Variant::PrPlus] {
        let mut cfg = tiny(variant, dir.path().join(variant.to_string()));
        cfg.pretrain.max_epochs = 1;
        run_experiment(&cfg).unwrap();
        let report: Value = serde_json::from_str(&fs::read_to_string(cfg.output_dir.join("report.json")).unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&report).map(|e| format!("{} at {}", e, e.instance_path())).collect();
        assert!(errors.is_empty(), "{variant}: {errors:?}");

        let mut broken = report.clone();
        broken["calibration"].as_object_mut().unwrap().remove("sigma_squared");
        assert!(!validator.is_valid(&broken));
        let mut broken = report;
        broken["bleu"]["score"] = serde_json::json!(120.0);
        assert!(!validator.is_valid(&broken));
    }
}
