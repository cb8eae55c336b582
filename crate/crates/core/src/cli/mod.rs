//! The `medlitenet` command line: synth, train, infer, eval, gradcheck and
//! params. Exit codes: 0 success, 2 usage, config or input error, 3
//! numerical failure.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    load_dataset_dir, load_image_ppm, load_mask_pgm, make_split, normalize_imagenet, save_image_ppm, save_mask_pgm,
    save_prob_pgm, synth_sample, synth_set, tagged_seeds, DifficultyMix, SegmentationSample,
};
use crate::error::Error;
use crate::gradsuite::{run_scope, Scope, SuiteOptions};
use crate::metrics::{confusion_metrics, mean_std, EvalRecord};
use crate::model::{predict_mask, write_atomic, Checkpoint, MedLiteNet, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{ensemble_combine, fit, tta_predict_model, FitOptions};

pub use config::{DataConfig, PathsConfig, RunConfigFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::GradCheck(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "medlitenet", version, about = "Lightweight CNN-Transformer skin-lesion segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset of image/mask pairs.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Predict masks for PPM images.
    Infer(InferArgs),
    /// Score predictions or checkpoints against ground-truth masks.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Per-module trainable parameter counts.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Side length in pixels (a multiple of 32).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Seed of the first sample; later samples use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Feed NaN inputs at the given micro-step so the loss becomes non-finite.
    NanLoss,
    /// Scale analytic gradients by 1.1 before comparison.
    CorruptGrad,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (TOML) [default: none, built-in defaults apply].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset (default, small, micro); overrides `model.preset` [default: default].
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides `train.seed` [default: from config, 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs` [default: from config, 300].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `paths.out_dir` [default: from config, runs/medlitenet].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `paths.dataset_dir` [default: from config, synthetic data].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: Option<Fault>,
}

fn parse_threshold(s: &str) -> std::result::Result<f32, String> {
    let t: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("threshold must lie in [0, 1], got {t}"))
    }
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A PPM image or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Foreground threshold in [0, 1].
    #[arg(long, default_value_t = 0.5, value_parser = parse_threshold)]
    pub threshold: f32,
    /// Six-fold test-time augmentation [default: off].
    #[arg(long, default_value_t = false)]
    pub tta: bool,
    /// Also write the 8-bit probability map `<name>_prob.pgm` [default: off].
    #[arg(long, default_value_t = false)]
    pub prob: bool,
    /// Use the raw weights instead of the EMA shadow [default: off].
    #[arg(long, default_value_t = false)]
    pub raw_weights: bool,
    /// Run configuration whose model section must match the checkpoint [default: none].
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted masks (`<name>_pred.pgm` or `<name>.pgm`) [default: none].
    #[arg(long, requires = "gt_dir", conflicts_with_all = ["ckpt", "ensemble"])]
    pub pred_dir: Option<PathBuf>,
    /// Directory of ground-truth masks (`<name>_mask.pgm` or `<name>.pgm`) [default: none].
    #[arg(long)]
    pub gt_dir: Option<PathBuf>,
    /// Checkpoint to evaluate on `--dataset` [default: none].
    #[arg(long, conflicts_with = "ensemble", requires = "dataset")]
    pub ckpt: Option<PathBuf>,
    /// Comma-separated checkpoints fused with weights from their stored best validation Dice [default: none].
    #[arg(long, value_delimiter = ',', requires = "dataset")]
    pub ensemble: Option<Vec<PathBuf>>,
    /// Dataset directory of `<name>.ppm` / `<name>_mask.pgm` pairs [default: none].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Six-fold test-time augmentation for checkpoint evaluation [default: off].
    #[arg(long, default_value_t = false)]
    pub tta: bool,
    /// Foreground threshold in [0, 1].
    #[arg(long, default_value_t = 0.5, value_parser = parse_threshold)]
    pub threshold: f32,
    /// Write the per-image CSV here [default: standard output].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Blocks,
    Model,
    All,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Which suite to run.
    #[arg(long, value_enum, default_value_t = ScopeArg::All)]
    pub scope: ScopeArg,
    /// Maximum relative error [default: 1e-3 for ops and blocks, 2e-3 for model].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Seed of the random inputs and probed coordinates.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<Fault>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Run configuration whose model section is counted [default: none].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset (default, small, micro); overrides `model.preset` [default: default].
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides `model.width_multiplier` [default: from config, 1.0].
    #[arg(long)]
    pub width_multiplier: Option<f64>,
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out`. Returns the process exit code.
pub fn run_with_output<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let mut buf = String::new();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a, &mut buf),
        Command::Train(a) => cmd_train(&a, &mut buf, out),
        Command::Infer(a) => cmd_infer(&a, &mut buf),
        Command::Eval(a) => cmd_eval(&a, &mut buf),
        Command::Gradcheck(a) => cmd_gradcheck(&a, &mut buf),
        Command::Params(a) => cmd_params(&a, &mut buf),
    };
    let _ = out.write_all(buf.as_bytes());
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_output(args, &mut std::io::stdout(), &mut std::io::stderr())
}

fn read_config(path: Option<&Path>, preset: Option<&str>) -> CliResult<RunConfigFile> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::from(Error::Io { path: p.into(), source: e }))?,
        None => String::new(),
    };
    RunConfigFile::resolve(&text, preset).map_err(|e| match path {
        Some(p) => CliError::usage(format!("{}: {e}", p.display())),
        None => e.into(),
    })
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::from(Error::Io { path: dir.into(), source: e }))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut String) -> CliResult<i32> {
    crate::data::check_size(a.size).map_err(|_| {
        CliError::usage(format!("--size {} is invalid: the size must be a positive multiple of 32", a.size))
    })?;
    create_dir(&a.out)?;
    for (i, (seed, difficulty)) in tagged_seeds(a.count, a.seed, &DifficultyMix::default())?.into_iter().enumerate() {
        let s = synth_sample(seed, a.size, difficulty)?;
        let image = format!("sample_{i:05}.ppm");
        let mask = format!("sample_{i:05}_mask.pgm");
        save_image_ppm(&a.out.join(&image), &s.image)?;
        save_mask_pgm(&a.out.join(&mask), &s.mask)?;
        let _ = writeln!(out, "{image} {mask} seed={seed} difficulty={}", difficulty.name());
    }
    Ok(EXIT_OK)
}

type TrainData = (Vec<SegmentationSample>, Vec<SegmentationSample>);

fn training_data(cfg: &RunConfigFile) -> CliResult<TrainData> {
    match &cfg.paths.dataset_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::usage(format!("dataset directory {} does not exist", dir.display())));
            }
            let mut all: Vec<SegmentationSample> = load_dataset_dir(dir)?.into_iter().map(|(_, s)| s).collect();
            if all.len() < 2 {
                return Err(CliError::usage("a dataset directory needs at least two pairs"));
            }
            let n_val = cfg.data.n_val.min(all.len() - 1);
            let val = all.split_off(all.len() - n_val);
            Ok((all, val))
        }
        None => {
            let d = &cfg.data;
            let split = make_split(d.n_train, d.n_val, d.n_test, d.base_seed, &d.mix())?;
            Ok((synth_set(&split.train, d.size)?, synth_set(&split.val, d.size)?))
        }
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut String, live: &mut dyn std::io::Write) -> CliResult<i32> {
    let mut cfg = read_config(a.config.as_deref(), a.preset.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &a.out {
        cfg.paths.out_dir = o.clone();
    }
    if let Some(d) = &a.dataset {
        cfg.paths.dataset_dir = Some(d.clone());
    }
    cfg.validate()?;
    let (train, val) = training_data(&cfg)?;
    let dir = cfg.paths.out_dir.clone();
    create_dir(&dir)?;
    write_atomic(&dir.join(RESOLVED_CONFIG), cfg.to_toml()?.as_bytes())?;

    let model = MedLiteNet::build(&cfg.model, cfg.train.seed)?;
    let _ = writeln!(
        live,
        "training {} parameters on {} samples, validating on {}",
        model.count_parameters().total,
        train.len(),
        val.len()
    );
    let epochs = cfg.train.epochs;
    let mut report = |r: &crate::train::EpochRecord| {
        let _ = writeln!(
            live,
            "epoch {:>3}/{epochs} lr {:.3e} | train loss {:.4} dice {:.4} iou {:.4} | val loss {:.4} dice {:.4} iou {:.4}",
            r.epoch + 1,
            r.lr,
            r.train.loss,
            r.train.dice,
            r.train.iou,
            r.val.loss,
            r.val.dice,
            r.val.iou
        );
    };
    let opts = FitOptions {
        augment: cfg.data.augmenting().then_some(&cfg.data.augment),
        inject_nan_at: (a.inject_fault == Some(Fault::NanLoss)).then_some(0),
        on_epoch: Some(&mut report),
    };
    let outcome = fit(model, &train, &val, &cfg.train, opts)?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    outcome.last.save(&dir.join("last.ckpt"))?;
    write_atomic(&dir.join("metrics.csv"), outcome.csv().as_bytes())?;
    let _ = writeln!(
        out,
        "best val dice {:.4} at epoch {}; wrote {}",
        outcome.best.meta.best_val_dice.unwrap_or(f64::NAN),
        outcome.best.meta.epoch.map_or(0, |e| e + 1),
        dir.display()
    );
    Ok(EXIT_OK)
}

fn load_model(ckpt: &Path, config: Option<&Path>, raw: bool) -> CliResult<(Checkpoint, MedLiteNet<f32>)> {
    let ck = Checkpoint::load(ckpt)?;
    let requested = match config {
        Some(p) => Some(read_config(Some(p), None)?.model),
        None => None,
    };
    let model = ck.to_model(requested.as_ref(), !raw)?;
    Ok((ck, model))
}

/// Probability map `[1, 1, H, W]` for an unnormalized `[3, H, W]` image.
fn predict_image(model: &MedLiteNet<f32>, image: &Tensor<f32>, tta: bool) -> CliResult<Tensor<f32>> {
    let x = Tensor::stack(&[normalize_imagenet(image)?])?;
    Ok(if tta { tta_predict_model(model, &model.store, &x)? } else { model.predict(&x)? })
}

fn ppm_inputs(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| CliError::from(Error::Io { path: input.into(), source: e }))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::usage(format!("no .ppm files in {}", input.display())));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(CliError::usage(format!("input {} does not exist", input.display())))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn cmd_infer(a: &InferArgs, out: &mut String) -> CliResult<i32> {
    let (_, model) = load_model(&a.ckpt, a.config.as_deref(), a.raw_weights)?;
    let inputs = ppm_inputs(&a.input)?;
    create_dir(&a.out)?;
    for path in inputs {
        let name = stem(&path);
        let image = load_image_ppm(&path)?;
        let t0 = Instant::now();
        let prob = predict_image(&model, &image, a.tta)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let hw = prob.shape()[2..].to_vec();
        let prob = prob.reshape(vec![1, hw[0], hw[1]])?;
        save_mask_pgm(&a.out.join(format!("{name}_pred.pgm")), &predict_mask(&prob, a.threshold))?;
        if a.prob {
            save_prob_pgm(&a.out.join(format!("{name}_prob.pgm")), &prob)?;
        }
        let _ = writeln!(out, "{name}: {ms:.1} ms{}", if a.tta { " (tta)" } else { "" });
    }
    Ok(EXIT_OK)
}

/// `name -> path` for mask files. A stem may carry a `_pred` or `_mask`
/// suffix; the preferred suffix wins over a bare name, which wins over the
/// other suffix. Probability maps are skipped.
fn mask_files(dir: &Path, preferred: &str) -> CliResult<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::from(Error::Io { path: dir.into(), source: e }))?;
    let mut ranked: BTreeMap<String, (u8, PathBuf)> = BTreeMap::new();
    for e in entries.filter_map(|e| e.ok()) {
        let path = e.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()).map(str::to_string) else {
            continue;
        };
        let Some(s) = file.strip_suffix(".pgm") else {
            continue;
        };
        if s.ends_with("_prob") {
            continue;
        }
        let (name, rank) = match ["_pred", "_mask"].into_iter().find_map(|t| s.strip_suffix(t).map(|n| (n, t))) {
            Some((n, t)) if t == preferred => (n, 0),
            Some((n, _)) => (n, 2),
            None => (s, 1),
        };
        match ranked.get(name) {
            Some((r, _)) if *r <= rank => {}
            _ => {
                ranked.insert(name.to_string(), (rank, path));
            }
        }
    }
    Ok(ranked.into_iter().map(|(k, (_, p))| (k, p)).collect())
}

fn report(records: &[(String, EvalRecord)], out: &mut String, csv_path: Option<&Path>) -> CliResult {
    let mut csv = String::from("name,dice,iou,accuracy,sensitivity,specificity\n");
    for (name, r) in records {
        let _ = writeln!(
            csv,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.dice, r.iou, r.accuracy, r.sensitivity, r.specificity
        );
    }
    match csv_path {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => out.push_str(&csv),
    }
    let col = |f: fn(&EvalRecord) -> f64| mean_std(&records.iter().map(|(_, r)| f(r)).collect::<Vec<_>>());
    let parts: Vec<String> = [
        ("dice", col(|r| r.dice)),
        ("iou", col(|r| r.iou)),
        ("accuracy", col(|r| r.accuracy)),
        ("sensitivity", col(|r| r.sensitivity)),
        ("specificity", col(|r| r.specificity)),
    ]
    .iter()
    .map(|(n, (m, s))| format!("{n} {m:.4} ± {s:.4}"))
    .collect();
    let _ = writeln!(out, "aggregate over {} images: {}", records.len(), parts.join(", "));
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut String) -> CliResult<i32> {
    let mut records = Vec::new();
    if let (Some(pred_dir), Some(gt_dir)) = (&a.pred_dir, &a.gt_dir) {
        let preds = mask_files(pred_dir, "_pred")?;
        let gts = mask_files(gt_dir, "_mask")?;
        let unmatched: Vec<String> = preds
            .keys()
            .filter(|k| !gts.contains_key(*k))
            .map(|k| format!("prediction {k}"))
            .chain(gts.keys().filter(|k| !preds.contains_key(*k)).map(|k| format!("ground truth {k}")))
            .collect();
        if !unmatched.is_empty() {
            return Err(CliError::usage(format!("unmatched files: {}", unmatched.join(", "))));
        }
        if preds.is_empty() {
            return Err(CliError::usage("no masks to evaluate"));
        }
        for (name, p) in &preds {
            let (pm, gm) = (load_mask_pgm(p)?, load_mask_pgm(&gts[name])?);
            if pm.shape() != gm.shape() {
                return Err(CliError::usage(format!("{name}: prediction and ground truth sizes differ")));
            }
            records.push((name.clone(), confusion_metrics(pm.data(), gm.data())?));
        }
    } else {
        let dataset = a
            .dataset
            .as_deref()
            .ok_or_else(|| CliError::usage("either --pred-dir/--gt-dir or --ckpt/--ensemble with --dataset is required"))?;
        let ckpts: Vec<PathBuf> = match (&a.ckpt, &a.ensemble) {
            (Some(c), _) => vec![c.clone()],
            (None, Some(list)) if !list.is_empty() => list.clone(),
            _ => return Err(CliError::usage("--dataset needs --ckpt or --ensemble")),
        };
        let mut members = Vec::new();
        let mut scores = Vec::new();
        for c in &ckpts {
            let (ck, model) = load_model(c, None, false)?;
            if a.ensemble.is_some() {
                let d = ck.meta.best_val_dice.ok_or_else(|| {
                    CliError::usage(format!("{} stores no best validation Dice", c.display()))
                })?;
                scores.push(d);
            } else {
                scores.push(1.0);
            }
            members.push(model);
        }
        for (name, sample) in load_dataset_dir(dataset)? {
            let probs = members
                .iter()
                .map(|m| predict_image(m, &sample.image, a.tta))
                .collect::<CliResult<Vec<_>>>()?;
            let prob = ensemble_combine(&probs, &scores)?;
            let pred = predict_mask(&prob, a.threshold);
            records.push((name, confusion_metrics(pred.data(), sample.mask.data())?));
        }
    }
    report(&records, out, a.out.as_deref())?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut String) -> CliResult<i32> {
    let scopes: Vec<Scope> = match a.scope {
        ScopeArg::Ops => vec![Scope::Ops],
        ScopeArg::Blocks => vec![Scope::Blocks],
        ScopeArg::Model => vec![Scope::Model],
        ScopeArg::All => Scope::ALL.to_vec(),
    };
    if let Some(t) = a.tol {
        if !(t.is_finite() && t > 0.0) {
            return Err(CliError::usage(format!("--tol must be positive, got {t}")));
        }
    }
    let mut all_pass = true;
    let _ = writeln!(out, "{:<7} {:<40} {:>12} {:>8}  result", "scope", "item", "max_rel_err", "coords");
    for scope in scopes {
        let opts = SuiteOptions {
            tol: a.tol.unwrap_or(scope.default_tol()),
            corrupt: a.inject_fault == Some(Fault::CorruptGrad),
            seed: a.seed,
        };
        for item in run_scope(scope, &opts)? {
            all_pass &= item.pass;
            let _ = writeln!(
                out,
                "{:<7} {:<40} {:>12.3e} {:>8}  {}",
                scope.to_string(),
                item.name,
                item.max_rel_err,
                item.checked,
                if item.pass { "PASS" } else { "FAIL" }
            );
        }
    }
    let _ = writeln!(out, "{}", if all_pass { "all checks passed" } else { "gradient check FAILED" });
    Ok(if all_pass { EXIT_OK } else { EXIT_NUMERIC })
}

pub fn cmd_params(a: &ParamsArgs, out: &mut String) -> CliResult<i32> {
    let mut model_cfg: ModelConfig = read_config(a.config.as_deref(), a.preset.as_deref())?.model;
    if let Some(m) = a.width_multiplier {
        model_cfg.width_multiplier = m;
    }
    let model = MedLiteNet::<f32>::build(&model_cfg, 0)?;
    let counted = model.count_parameters();
    let analytic = model.analytic_parameters();
    let _ = writeln!(out, "{:<12} {:>12}", "module", "params");
    for ((name, c), (_, f)) in counted.modules.iter().zip(&analytic.modules) {
        let note = if c == f { String::new() } else { format!("  (closed form {f})") };
        let _ = writeln!(out, "{name:<12} {c:>12}{note}");
    }
    let _ = writeln!(out, "{:<12} {:>12}", "total", counted.total);
    let _ = writeln!(out, "{:<12} {:>12}", "encoder", counted.encoder());
    if counted != analytic {
        return Err(CliError {
            code: EXIT_NUMERIC,
            message: "stored parameter counts disagree with the closed forms".into(),
        });
    }
    Ok(EXIT_OK)
}
