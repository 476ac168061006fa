use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use ser_core::augment::{materialize, MediaMode};
use ser_core::features::{imbalanced_counts, synth_dataset, ClassCounts, SynthSpec};
use ser_core::labels::{build_samples, class_histogram, parse_annotations, EmotionClass, Split, NUM_CLASSES};
use ser_core::manifest::{read_predictions, write_atomic, write_predictions, Manifest, ManifestEntry, PredictionRecord};
use ser_core::metrics::MetricsReport;
use ser_core::model::{ensemble_predict, load_checkpoint};
use ser_core::trainer::{evaluate, train, TrainConfig, CHECKPOINT_FILE, REPORT_FILE};

use crate::run_manifest::RunManifest;
use crate::{
    AugmentArgs, BuildLabelsArgs, Cli, CliError, Command, EnsembleArgs, EvaluateArgs, Mode, Preset, SynthArgs,
    TrainArgs,
};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let out = cli.out.as_deref().ok_or_else(|| CliError::usage("--out is required"))?;
    match &cli.command {
        Command::BuildLabels(a) => build_labels(cli, a, out),
        Command::Synth(a) => synth(cli, a, out),
        Command::Augment(a) => augment(cli, a, out),
        Command::Train(a) => train_cmd(cli, a, out),
        Command::Evaluate(a) => evaluate_cmd(cli, a, out),
        Command::Ensemble(a) => ensemble(cli, a, out),
    }
}

/// Defaults, then the config file, then the seed flag.
fn load_config(cli: &Cli) -> Result<TrainConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
            toml::from_str::<TrainConfig>(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(CliError::usage)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn build_labels(cli: &Cli, a: &BuildLabelsArgs, out: &Path) -> Result<(), CliError> {
    let mut run = RunManifest::start("build-labels", cli.seed);
    let split = parse_split(&a.split)?;
    let records = parse_annotations(&a.annotations)
        .map_err(|e| CliError::data(format!("{}: {e}", a.annotations.display())))?;
    let samples = build_samples(&records, split).map_err(|e| CliError::data(format!("{}: {e}", a.annotations.display())))?;
    let entries: Vec<ManifestEntry> = samples
        .iter()
        .map(|s| {
            ManifestEntry::from_sample(
                s,
                a.embedding_dir.as_ref().map(|d| format!("{d}/{}.semb", s.sample_id)),
                a.audio_dir.as_ref().map(|d| format!("{d}/{}.wav", s.sample_id)),
            )
        })
        .collect();
    let (counts, none) = class_histogram(entries.iter().map(|e| &e.consensus));
    Manifest::new(entries, ".").write(out)?;
    println!("{} samples from {} annotations", samples.len(), records.len());
    for c in EmotionClass::ALL {
        println!("{:>10} {}", c.name(), counts[c.index()]);
    }
    println!("{:>10} {none}", "no_agreement");
    run.input(&a.annotations);
    run.output(out);
    run.config = serde_json::json!({ "split": a.split, "embedding_dir": a.embedding_dir, "audio_dir": a.audio_dir });
    run.finish(out, false)
}

fn synth(cli: &Cli, a: &SynthArgs, out: &Path) -> Result<(), CliError> {
    let mut run = RunManifest::start("synth", cli.seed);
    let seed = load_config(cli)?.seed;
    let base = match a.preset {
        Preset::Separable => SynthSpec::separable(a.dim, seed),
        Preset::Overlapping => SynthSpec::overlapping(a.dim, seed),
    };
    if a.dim == 0 || a.layers == 0 {
        return Err(CliError::usage("--dim and --layers must be >= 1"));
    }
    let spec = SynthSpec { n_layers: a.layers, with_audio: a.with_audio, with_attributes: a.with_attributes, ..base };
    let mut splits: Vec<(Split, ClassCounts)> =
        vec![(Split::Train, imbalanced_counts(a.train_majority, a.train_minority, a.train_other))];
    let per_class = |n: usize| {
        let mut c = [n; NUM_CLASSES];
        c[EmotionClass::Other.index()] = 0;
        c
    };
    if a.dev_per_class > 0 {
        splits.push((Split::Dev, per_class(a.dev_per_class)));
    }
    if a.test_per_class > 0 {
        splits.push((Split::Test, per_class(a.test_per_class)));
    }
    let m = synth_dataset(&spec, &splits, out)?;
    let manifest_path = out.join("manifest.jsonl");
    m.write(&manifest_path)?;
    println!("wrote {} samples to {}", m.entries.len(), manifest_path.display());
    run.output(&manifest_path);
    run.config = serde_json::json!({
        "preset": format!("{:?}", a.preset).to_lowercase(),
        "dim": a.dim,
        "layers": a.layers,
        "train_majority": a.train_majority,
        "train_minority": a.train_minority,
        "train_other": a.train_other,
        "dev_per_class": a.dev_per_class,
        "test_per_class": a.test_per_class,
        "with_audio": a.with_audio,
        "with_attributes": a.with_attributes,
        "seed": seed,
    });
    run.finish(out, true)
}

fn augment(cli: &Cli, a: &AugmentArgs, out: &Path) -> Result<(), CliError> {
    let mut run = RunManifest::start("augment", cli.seed);
    let cfg = load_config(cli)?;
    let mut aug = cfg.augmentation.clone();
    aug.seed = cfg.seed;
    if let Some(p) = a.p_mix {
        aug.p_mix = p;
    }
    if let Some(r) = a.dropout_rate {
        aug.dropout_rate = r;
    }
    if let Some(g) = a.max_gap_seconds {
        aug.max_gap_seconds = g;
    }
    aug.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let m = Manifest::read(&a.manifest)?;
    let mode = match a.mode {
        Mode::Waveform => MediaMode::Waveform,
        Mode::Embedding => MediaMode::Embedding,
    };
    let out_m = materialize(&m, &aug, mode, a.epoch, out)?;
    let path = out.join("manifest.jsonl");
    out_m.write(&path)?;
    let n_mixed = out_m.entries.iter().filter(|e| e.mix.is_some()).count();
    println!("{} entries, {n_mixed} mixed", out_m.entries.len());
    run.input(&a.manifest);
    run.output(&path);
    run.config = serde_json::json!({ "augmentation": aug, "mode": format!("{:?}", a.mode).to_lowercase(), "epoch": a.epoch });
    run.finish(out, true)
}

fn train_cmd(cli: &Cli, a: &TrainArgs, out: &Path) -> Result<(), CliError> {
    let mut run = RunManifest::start("train", cli.seed);
    let mut cfg = load_config(cli)?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.selection_weight {
        cfg.selection_weight = v;
    }
    if let Some(v) = a.p_mix {
        cfg.augmentation.p_mix = v;
    }
    if let Some(v) = a.dropout_rate {
        cfg.augmentation.dropout_rate = v;
    }
    if a.no_augment {
        cfg.augmentation.p_mix = 0.0;
        cfg.augmentation.dropout_rate = 0.0;
    }
    if a.no_reweight {
        cfg.reweight_targets = false;
    }
    if let Some(v) = a.conv_channels {
        cfg.model.conv_channels = v;
    }
    if let Some(v) = a.mlp_hidden {
        cfg.model.mlp_hidden = v;
    }
    cfg.model.secondary_head |= a.secondary_head;
    cfg.model.attribute_head |= a.attribute_head;
    cfg.model.use_text |= a.use_text;
    cfg.model.last_layer_only |= a.last_layer_only;
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let m = Manifest::read(&a.manifest)?;
    let train_set = m.filtered(Split::Train);
    let dev_set = match &a.dev {
        Some(p) => Manifest::read(p)?.filtered(Split::Dev),
        None => m.filtered(Split::Dev),
    };
    if train_set.entries.is_empty() {
        return Err(CliError::data(format!("{}: no train entries", a.manifest.display())));
    }
    if dev_set.entries.is_empty() {
        return Err(CliError::data("no dev entries (use --dev or add a dev split)"));
    }
    let outcome = train(&train_set, &dev_set, &cfg, Some(out))?;
    let r = &outcome.report;
    for e in &r.epochs {
        println!(
            "epoch {:>2}  loss {:.4}  dev macro-F1 {:.4}  acc {:.2}  min-mAP {}  score {:.4}",
            e.epoch,
            e.train_loss.total,
            e.dev.macro_f1,
            e.dev.accuracy,
            e.dev.minority_map.map_or("-".to_string(), |v| format!("{v:.4}")),
            e.selection_score
        );
    }
    println!("selected epoch {} (score {:.4})", r.selected_epoch, r.selection_score);
    run.input(&a.manifest);
    if let Some(d) = &a.dev {
        run.input(d);
    }
    run.output(&out.join(CHECKPOINT_FILE));
    run.output(&out.join(REPORT_FILE));
    run.config = serde_json::to_value(&cfg).expect("config serializes");
    run.finish(out, true)
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs, out: &Path) -> Result<(), CliError> {
    let mut run = RunManifest::start("evaluate", cli.seed);
    let params = load_checkpoint(&a.checkpoint)?;
    let mut m = Manifest::read(&a.manifest)?;
    if let Some(s) = &a.split {
        m = m.filtered(parse_split(s)?);
    }
    let (report, preds) = evaluate(&params, &m)?;
    let metrics = out.join("metrics.json");
    let predictions = out.join("predictions.jsonl");
    write_json(&metrics, &report)?;
    write_predictions(&predictions, &preds)?;
    run.output(&metrics);
    run.output(&predictions);
    if a.confusion_csv {
        let p = out.join("confusion.csv");
        write_atomic(&p, report.confusion_csv().as_bytes()).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        run.output(&p);
    }
    print_summary(&report);
    run.input(&a.checkpoint);
    run.input(&a.manifest);
    run.config = serde_json::json!({ "split": a.split, "model": params.config() });
    run.finish(out, true)
}

fn print_summary(r: &MetricsReport) {
    println!(
        "n={}  macro-F1 {:.4}  accuracy {:.2}%  minority mAP {}",
        r.n_scored,
        r.macro_f1,
        r.accuracy,
        r.minority_map.map_or("-".to_string(), |v| format!("{v:.4}"))
    );
}

/// Up to five ids, then a count.
fn preview(ids: &BTreeSet<&str>) -> String {
    let shown: Vec<&str> = ids.iter().take(5).copied().collect();
    let more = ids.len().saturating_sub(shown.len());
    if more > 0 {
        format!("{shown:?} and {more} more")
    } else {
        format!("{shown:?}")
    }
}

fn ensemble(cli: &Cli, a: &EnsembleArgs, out: &Path) -> Result<(), CliError> {
    let mut run = RunManifest::start("ensemble", cli.seed);
    let systems: Vec<(PathBuf, Vec<PredictionRecord>)> = a
        .predictions
        .iter()
        .map(|p| Ok((p.clone(), read_predictions(p)?)))
        .collect::<Result<_, CliError>>()?;
    let reference: BTreeSet<&str> = systems[0].1.iter().map(|r| r.sample_id.as_str()).collect();
    for (path, recs) in &systems[1..] {
        let ids: BTreeSet<&str> = recs.iter().map(|r| r.sample_id.as_str()).collect();
        if ids != reference {
            let missing: BTreeSet<&str> = reference.difference(&ids).copied().collect();
            let extra: BTreeSet<&str> = ids.difference(&reference).copied().collect();
            return Err(CliError::data(format!(
                "{} and {} cover different samples: missing {}, extra {}",
                systems[0].0.display(),
                path.display(),
                preview(&missing),
                preview(&extra)
            )));
        }
    }
    let lookup: Vec<HashMap<&str, &[f64; NUM_CLASSES]>> = systems
        .iter()
        .map(|(_, recs)| recs.iter().map(|r| (r.sample_id.as_str(), &r.probs)).collect())
        .collect();

    let m = Manifest::read(&a.manifest)?;
    let known: BTreeSet<&str> = m.entries.iter().map(|e| e.sample_id.as_str()).collect();
    let unknown: BTreeSet<&str> = reference.difference(&known).copied().collect();
    if !unknown.is_empty() {
        return Err(CliError::data(format!("predictions for samples not in {}: {}", a.manifest.display(), preview(&unknown))));
    }
    // manifest order, restricted to the predicted samples
    let mut consensus = Vec::new();
    let mut averaged = Vec::new();
    for e in m.entries.iter().filter(|e| reference.contains(e.sample_id.as_str())) {
        let outputs: Vec<[f64; NUM_CLASSES]> = lookup.iter().map(|l| *l[e.sample_id.as_str()]).collect();
        let probs = ensemble_predict(&outputs)?;
        consensus.push(e.consensus);
        averaged.push(PredictionRecord { sample_id: e.sample_id.clone(), probs });
    }
    let probs: Vec<[f64; NUM_CLASSES]> = averaged.iter().map(|r| r.probs).collect();
    let report = MetricsReport::score(&consensus, &probs)?;
    write_json(out, &report)?;
    run.output(out);
    if let Some(p) = &a.predictions_out {
        write_predictions(p, &averaged)?;
        run.output(p);
    }
    print_summary(&report);
    for p in &a.predictions {
        run.input(p);
    }
    run.input(&a.manifest);
    run.config = serde_json::json!({ "n_systems": systems.len() });
    run.finish(out, false)
}
