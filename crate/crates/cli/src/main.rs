//! `rsnet` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or validation
//! error. Diagnostics go to standard error; standard output carries exactly one
//! JSON status line.

mod config;
mod plot;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::{json, Value};

use rsnet::checkpoint::{load_checkpoint, load_matching, save_checkpoint};
use rsnet::classifier::{confusion_matrix, metrics_from_matrix, train_classifier, ClassifierConfig};
use rsnet::colearn::train_colearn;
use rsnet::data::{
    load_manifest, load_samples, split, synth_generate, write_manifest, Sample, SplitRatios, SynthConfig,
};
use rsnet::head::RsNet;
use rsnet::training::{
    evaluate, evaluate_samples, train_model, write_predictions, EpochRecord, RunInfo, TrainConfig, TrainOutcome,
};
use rsnet::types::{BackboneMode, ModelConfig};

use config::{List, Resolver};

const RESOLVED_CONFIG: &str = "resolved_config.conf";

/// Bad flags, bad config values or a missing required setting.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "rsnet", version, about = "RGB terrain patches to spectral profiles")]
struct Cli {
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (patches, spectra, manifest).
    GenData(GenDataArgs),
    /// Split a dataset and train the spectral model.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest, per class.
    Eval(EvalArgs),
    /// Train and test the material classifier on spectral profiles.
    Classify(ClassifyArgs),
    /// Train the shared backbone with a spectral and a property head.
    Colearn(TrainArgs),
    /// Draw a predicted profile against its ground truth.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long = "per-class")]
    per_class: Option<usize>,
    /// Per-bin noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Brightness range as `lo,hi`.
    #[arg(long)]
    brightness: Option<List<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Patch size as `height,width`.
    #[arg(long)]
    patch: Option<List<usize>>,
    /// Per-pixel texture noise standard deviation.
    #[arg(long)]
    texture: Option<f64>,
    /// Add a held-out class blending two templates, as `a,b`.
    #[arg(long)]
    blend: Option<List<usize>>,
    /// Attach a scalar property (friction) to every sample.
    #[arg(long = "with-property", action = ArgAction::SetTrue)]
    with_property: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `compact` or `pretrained-projected`.
    #[arg(long)]
    mode: Option<String>,
    /// Classes kept out of training and validation, comma separated.
    #[arg(long)]
    holdout: Option<List<String>>,
    /// Split ratios as `train,val,test`.
    #[arg(long)]
    ratios: Option<List<f64>>,
    /// Checkpoint whose tensors initialize matching parameters by name and shape.
    #[arg(long = "init-weights")]
    init_weights: Option<PathBuf>,
    /// Property loss weight (colearn only).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    /// Spectral model checkpoint; its recorded split is reused.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `predicted` (model output) or `ground-truth` profiles.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Legend entries as `pred,gt`.
    #[arg(long)]
    labels: Option<List<String>>,
    /// Output figure, `.png` or `.svg`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let _ = e.print();
            status(json!({"status": "error", "exit_code": 2, "message": e.kind().to_string()}));
            std::process::exit(2);
        }
    };
    let name = command_name(&cli.command);
    match run(cli) {
        Ok(mut summary) => {
            summary.insert("status".into(), json!("ok"));
            summary.insert("command".into(), json!(name));
            status(Value::Object(summary.into_iter().collect()));
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            status(json!({"status": "error", "command": name, "exit_code": code, "message": format!("{e:#}")}));
            std::process::exit(code);
        }
    }
}

fn status(v: Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Classify(_) => "classify",
        Command::Colearn(_) => "colearn",
        Command::Plot(_) => "plot",
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<rsnet::Error>() {
            use rsnet::Error::*;
            return match err {
                ConstraintViolation(_) | RatioError(_) | InvalidArgument(_) | UnknownClass(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

type Summary = BTreeMap<String, Value>;

fn run(cli: Cli) -> anyhow::Result<Summary> {
    let mut r = Resolver::from_file(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&mut r, a),
        Command::Train(a) => train(&mut r, a, false),
        Command::Colearn(a) => train(&mut r, a, true),
        Command::Eval(a) => eval(&mut r, a),
        Command::Classify(a) => classify(&mut r, a),
        Command::Plot(a) => plot_cmd(&mut r, a),
    }
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn pair<T: Copy + fmt::Display>(key: &str, l: &List<T>) -> anyhow::Result<(T, T)> {
    match l.0.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(UsageError(format!("--{key} expects two comma-separated values, got `{l}`")).into()),
    }
}

fn gen_data(r: &mut Resolver, a: GenDataArgs) -> anyhow::Result<Summary> {
    let d = SynthConfig::default();
    let out = r.require_path("out", a.out)?;
    let brightness = r.get(
        "brightness",
        a.brightness,
        List(vec![d.brightness_range.0, d.brightness_range.1]),
    )?;
    let patch = r.get("patch", a.patch, List(vec![d.patch_size.0, d.patch_size.1]))?;
    let blend = r.opt("blend", a.blend)?;
    let config = SynthConfig {
        n_classes: r.get("classes", a.classes, d.n_classes)?,
        samples_per_class: r.get("per-class", a.per_class, d.samples_per_class)?,
        noise_sigma: r.get("noise", a.noise, d.noise_sigma)?,
        brightness_range: pair("brightness", &brightness)?,
        seed: r.get("seed", a.seed, d.seed)?,
        patch_size: pair("patch", &patch)?,
        texture_sigma: r.get("texture", a.texture, d.texture_sigma)?,
        blend: blend.map(|b| pair("blend", &b)).transpose()?,
        with_property: r.get("with-property", a.with_property.then_some(true), false)?,
        ..d
    };
    config.validate()?;
    create_out(&out)?;
    r.write(&out.join(RESOLVED_CONFIG))?;

    let index = synth_generate(config, &out)?;
    eprintln!(
        "wrote {} samples in {} classes to {}",
        index.len(),
        index.classes.len(),
        out.display()
    );
    Ok(BTreeMap::from([
        ("out".into(), json!(out)),
        ("manifest".into(), json!(out.join("manifest.csv"))),
        ("n_samples".into(), json!(index.len())),
        ("n_classes".into(), json!(index.classes.len())),
    ]))
}

fn census_map(classes: &[String], counts: &[usize]) -> BTreeMap<String, usize> {
    classes
        .iter()
        .zip(counts)
        .filter(|(_, &n)| n > 0)
        .map(|(c, &n)| (c.clone(), n))
        .collect()
}

fn train(r: &mut Resolver, a: TrainArgs, colearn: bool) -> anyhow::Result<Summary> {
    let d = TrainConfig::default();
    let data = r.require_path("data", a.data)?;
    let out = r.require_path("out", a.out)?;
    let seed = r.get("seed", a.seed, d.seed)?;
    let tc = TrainConfig {
        epochs: r.get("epochs", a.epochs, d.epochs)?,
        learning_rate: r.get("lr", a.lr, d.learning_rate)?,
        batch_size: r.get("batch", a.batch, d.batch_size)?,
        seed,
    };
    tc.validate()?;
    let mode: BackboneMode = r.get("mode", a.mode, "compact".to_string())?.parse()?;
    let holdout = r.get("holdout", a.holdout, List::default())?.0;
    let dr = SplitRatios::default();
    let ratios = pair3(&r.get("ratios", a.ratios, List(vec![dr.train, dr.val, dr.test]))?)?;
    ratios.validate()?;
    let lambda = if colearn {
        Some(r.get("lambda", a.lambda, 1.0)?)
    } else {
        None
    };
    if lambda.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
        return Err(UsageError("--lambda must be a finite value >= 0".into()).into());
    }
    let init = r.opt_path("init-weights", a.init_weights)?;

    let index = load_manifest(&data)?;
    let mut config = match mode {
        BackboneMode::Compact => ModelConfig::default(),
        BackboneMode::PretrainedProjected => ModelConfig::pretrained_projected(),
    };
    config.n_bins = index.axis.n_bins;
    config.seed = seed;
    config.validate()?;

    let (train_idx, val_idx, test_idx) = split(&index, ratios, seed, &holdout)?;
    create_out(&out.join("splits"))?;
    r.write(&out.join(RESOLVED_CONFIG))?;
    for (name, part) in [("train", &train_idx), ("val", &val_idx), ("test", &test_idx)] {
        write_manifest(&out.join("splits").join(format!("{name}.csv")), part)?;
    }

    let train_s = load_samples(&train_idx)?;
    let val_s = load_samples(&val_idx)?;
    let mut info = RunInfo::of(&index);
    info.provenance.dataset = Some(data.display().to_string());
    info.provenance.holdout = holdout.clone();
    info.provenance.split_seed = Some(seed);
    info.provenance.ratios = Some(ratios);

    let census = census_map(
        &info.classes,
        &index.with_records(train_idx.records.clone()).class_census(),
    );
    let mut log =
        std::io::BufWriter::new(std::fs::File::create(out.join("train_log.txt")).context("creating train_log.txt")?);
    writeln!(log, "class census (training split):")?;
    for (class, n) in &census {
        writeln!(log, "  {class}: {n}")?;
    }
    eprintln!("training on {} samples, validating on {}", train_s.len(), val_s.len());

    let mut on_epoch = |e: &EpochRecord| {
        let val = e.val_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
        let line = format!("epoch {}/{} train {:.6} val {val}", e.epoch, tc.epochs, e.train_loss);
        eprintln!("{line} ({:.1}s)", e.wall_time_s);
        let _ = writeln!(log, "{line}");
    };
    let outcome: TrainOutcome = match lambda {
        Some(lambda) => train_colearn(&config, lambda, &tc, &train_s, &val_s, info, &mut on_epoch)?,
        None => {
            let mut model = RsNet::<f32>::new(&config)?;
            if let Some(path) = &init {
                let source = load_checkpoint(path)?;
                let loaded = load_matching(&mut model, &source.tensors);
                eprintln!("initialized {} tensors from {}", loaded.len(), path.display());
            }
            train_model(model, &tc, &train_s, &val_s, info, &mut on_epoch)?
        }
    };
    log.flush()?;
    drop(log);

    save_checkpoint(&outcome.final_ckpt, &out.join("checkpoint.zip"))?;
    save_checkpoint(&outcome.best_ckpt, &out.join("best.zip"))?;
    outcome.history.write_csv(&out.join("history.csv"))?;

    let test = if test_idx.is_empty() {
        Value::Null
    } else {
        serde_json::to_value(evaluate(&outcome.final_ckpt, &test_idx)?.metrics)?
    };
    let metrics = json!({
        "epochs": outcome.history.len(),
        "final_train_mse": outcome.final_train_mse,
        "final_val_loss": outcome.history.val_losses().last().copied().flatten(),
        "best_epoch": outcome.best_ckpt.provenance.epoch,
        "best_val_loss": outcome.best_ckpt.metrics.get("val_loss"),
        "train_census": census,
        "test": test,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(BTreeMap::from([
        ("out".into(), json!(out)),
        ("epochs".into(), json!(outcome.history.len())),
        ("final_train_mse".into(), json!(outcome.final_train_mse)),
        ("test_mse".into(), metrics["test"]["mse"].clone()),
    ]))
}

fn pair3(l: &List<f64>) -> anyhow::Result<SplitRatios> {
    match l.0.as_slice() {
        &[train, val, test] => Ok(SplitRatios { train, val, test }),
        _ => Err(UsageError(format!("--ratios expects three comma-separated values, got `{l}`")).into()),
    }
}

fn eval(r: &mut Resolver, a: EvalArgs) -> anyhow::Result<Summary> {
    let ckpt_path = r.require_path("checkpoint", a.checkpoint)?;
    let data = r.require_path("data", a.data)?;
    let out = r.require_path("out", a.out)?;
    create_out(&out)?;
    r.write(&out.join(RESOLVED_CONFIG))?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let index = load_manifest(&data)?;
    let result = evaluate(&ckpt, &index)?;
    write_json(&out.join("metrics.json"), &serde_json::to_value(&result.metrics)?)?;
    write_predictions(&out.join("predictions"), &result, &ckpt.axis)?;
    for c in &result.metrics.per_class_mse {
        eprintln!(
            "{:<24} n={:<5} mse {:.6}{}",
            c.class,
            c.n_samples,
            c.mse,
            if c.unseen { "  (unseen)" } else { "" }
        );
    }
    Ok(BTreeMap::from([
        ("out".into(), json!(out)),
        ("mse".into(), json!(result.metrics.mse)),
        ("n_samples".into(), json!(result.metrics.n_samples)),
    ]))
}

fn classify(r: &mut Resolver, a: ClassifyArgs) -> anyhow::Result<Summary> {
    let d = ClassifierConfig::default();
    let ckpt_path = r.require_path("checkpoint", a.checkpoint)?;
    let data = r.require_path("data", a.data)?;
    let out = r.require_path("out", a.out)?;
    let source = r.get("source", a.source, "predicted".to_string())?;
    if source != "predicted" && source != "ground-truth" {
        return Err(UsageError(format!("--source must be predicted or ground-truth, got `{source}`")).into());
    }
    let epochs = r.get("epochs", a.epochs, d.epochs)?;
    let learning_rate = r.get("lr", a.lr, d.learning_rate)?;
    let batch_size = r.get("batch", a.batch, d.batch_size)?;
    let seed = r.get("seed", a.seed, d.seed)?;
    TrainConfig {
        epochs,
        learning_rate,
        batch_size,
        seed,
    }
    .validate()?;
    create_out(&out)?;
    r.write(&out.join(RESOLVED_CONFIG))?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let index = load_manifest(&data)?;
    let p = &ckpt.provenance;
    let (train_idx, _, test_idx) = split(
        &index,
        p.ratios.unwrap_or_default(),
        p.split_seed.unwrap_or(0),
        &p.holdout,
    )?;
    let classes = RunInfo::of(&index).classes;
    let held: Vec<usize> = p
        .holdout
        .iter()
        .filter_map(|h| index.class_by_name(h))
        .map(|c| c.id)
        .collect();
    let test_s: Vec<Sample> = load_samples(&test_idx)?
        .into_iter()
        .filter(|s| !held.contains(&s.label))
        .collect();
    let train_s = load_samples(&train_idx)?;

    let profiles = |samples: &[Sample]| -> anyhow::Result<Vec<Vec<f32>>> {
        if source == "ground-truth" {
            return Ok(samples.iter().map(|s| s.profile.values().to_vec()).collect());
        }
        Ok(evaluate_samples(&ckpt, samples, &classes)?
            .predictions
            .into_iter()
            .map(|p| p.profile.into_values())
            .collect())
    };
    let train_p = profiles(&train_s)?;
    let test_p = profiles(&test_s)?;
    let config = ClassifierConfig {
        n_bins: index.axis.n_bins,
        n_classes: classes.len(),
        epochs,
        learning_rate,
        batch_size,
        seed,
        ..d
    };
    let labels: Vec<usize> = train_s.iter().map(|s| s.label).collect();
    let refs: Vec<&[f32]> = train_p.iter().map(Vec::as_slice).collect();
    let clf = train_classifier(&refs, &labels, &config)?;

    let refs: Vec<&[f32]> = test_p.iter().map(Vec::as_slice).collect();
    let pred = clf.predict(&refs)?;
    let truth: Vec<usize> = test_s.iter().map(|s| s.label).collect();
    let cm = confusion_matrix(&pred, &truth, classes.len())?;
    let m = metrics_from_matrix(&cm)?;
    cm.write_csv(&out.join("confusion.csv"), &classes)?;
    save_checkpoint(&clf.to_checkpoint(&classes, index.axis), &out.join("classifier.zip"))?;
    let mut metrics = serde_json::to_value(&m)?;
    metrics["classes"] = json!(classes);
    metrics["source"] = json!(source);
    metrics["n_test"] = json!(truth.len());
    write_json(&out.join("metrics.json"), &metrics)?;
    eprintln!(
        "macro F1 {:.4}, accuracy {:.4} on {} test samples",
        m.macro_f1,
        m.accuracy,
        truth.len()
    );
    Ok(BTreeMap::from([
        ("out".into(), json!(out)),
        ("macro_f1".into(), json!(m.macro_f1)),
        ("accuracy".into(), json!(m.accuracy)),
    ]))
}

fn plot_cmd(r: &mut Resolver, a: PlotArgs) -> anyhow::Result<Summary> {
    let pred_path = r.require_path("pred", a.pred)?;
    let gt_path = r.require_path("gt", a.gt)?;
    let out = r.require_path("out", a.out)?;
    let labels = r.get(
        "labels",
        a.labels,
        List(vec!["predicted".into(), "ground truth".into()]),
    )?;
    let [pred_label, gt_label] = labels.0.as_slice() else {
        return Err(UsageError(format!("--labels expects two comma-separated names, got `{labels}`")).into());
    };

    let pred = plot::read_curve(&pred_path)?;
    let gt = plot::read_curve(&gt_path)?;
    if pred.values.len() != gt.values.len() {
        return Err(rsnet::Error::LengthMismatch {
            expected: gt.values.len(),
            found: pred.values.len(),
        }
        .into());
    }
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_out(&dir)?;
    plot::render(&out, &pred, &gt, (pred_label, gt_label))?;
    let mse = plot::mse(&pred.values, &gt.values);
    let sidecar = out.with_extension("json");
    write_json(
        &sidecar,
        &json!({"pred": pred_path, "gt": gt_path, "n_bins": gt.values.len(), "mse": mse}),
    )?;
    let stem = out
        .file_stem()
        .map_or("plot".into(), |s| s.to_string_lossy().into_owned());
    r.write(&dir.join(format!("{stem}.{RESOLVED_CONFIG}")))?;
    Ok(BTreeMap::from([
        ("out".into(), json!(out)),
        ("sidecar".into(), json!(sidecar)),
        ("mse".into(), json!(mse)),
    ]))
}
