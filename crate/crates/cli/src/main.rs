//! `ctformer` command-line tool: prepare datasets, train, evaluate and run
//! the interpolation spectral analysis.

mod svg;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ctformer::data::{AsyncDataset, MissingProtocol, Split, SplitFractions};
use ctformer::error::CtfError;
use ctformer::eval::{
    default_bands, evaluate, frequency_bias_report, scenario_forecasts, EvalOptions, EvalReport, Scenario,
};
use ctformer::io::{
    load_manifest_dataset, load_run, manifest_for, read_manifest, save_run, write_dataset_csv, write_json,
    RunRecord, CHECKPOINT_FILE,
};
use ctformer::model::{ablate, Ablation, ModelConfig};
use ctformer::patching::PatchPlan;
use ctformer::spectral::{interp_distortion_report, zero_centered};
use ctformer::train::{fit, plan_for, TrainConfig};

use svg::{LineChart, Series};

const SEED_ENV: &str = "CTF_SEED";
const DATA_CSV: &str = "data.csv";
const MANIFEST_JSON: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "ctformer", version, about = "Forecasting for asynchronously sampled multivariate series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample a manifest's data onto the fine grid and write a dataset directory.
    Prepare(PrepareArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a run on the test split, clean or with block-missing inputs.
    Eval(EvalArgs),
    /// Per-bin attenuation and phase delay of linear interpolation on one channel.
    Spectral(SpectralArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset manifest (JSON).
    manifest: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Run config used for the patch plan preview.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `prepare`, or a manifest file.
    dataset: PathBuf,
    /// New run directory.
    #[arg(long)]
    run_dir: PathBuf,
    /// Run config (JSON with `model` and `train` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mask_strategy: Option<String>,
    #[arg(long)]
    channel_tokens: Option<usize>,
    #[arg(long)]
    dropout_ratio: Option<f64>,
    /// Ablation toggle; repeatable.
    #[arg(long)]
    ablate: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides both the config and CTF_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    run_dir: PathBuf,
    /// Missing ratio; repeatable. 0 is the clean scenario.
    #[arg(long)]
    missing_ratio: Vec<f64>,
    #[arg(long, default_value = "patch_aligned")]
    protocol: String,
    /// Keep only the newest N fine steps of each test input.
    #[arg(long)]
    input_length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report metrics in standardized units.
    #[arg(long)]
    normalized: bool,
    /// Output directory (default: a new directory inside the run).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpectralArgs {
    /// Dataset directory written by `prepare`, or a manifest file.
    dataset: PathBuf,
    /// Channel name or index.
    #[arg(long)]
    channel: String,
    #[arg(long)]
    factor: usize,
    /// Samples analyzed (rounded down to a multiple of the factor).
    #[arg(long, default_value_t = 1024)]
    length: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run config file: both sections are optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    /// Sampling factors the config was written for; checked against the data.
    #[serde(skip_serializing_if = "Option::is_none")]
    factors: Option<Vec<usize>>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<CtfError> for Failure {
    fn from(e: CtfError) -> Self {
        let code = match e {
            CtfError::Numerical(_) => 3,
            CtfError::Shape { .. } | CtfError::Contract(_) => 1,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Spectral(a) => cmd_spectral(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_JSON)
    } else {
        p.to_path_buf()
    }
}

fn dataset_dir(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    }
}

fn read_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        Failure::usage(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// Every sampling factor must divide both the input length and the horizon.
fn check_compat(ds: &AsyncDataset, cfg: &RunConfig) -> CliResult {
    let factors = ds.factors();
    if let Some(expected) = &cfg.factors {
        if *expected != factors {
            return Err(Failure::usage(format!(
                "config expects sampling factors {expected:?}, dataset has {factors:?}"
            )));
        }
    }
    for (c, &r) in ds.channels.iter().zip(&factors) {
        if !cfg.model.input_len.is_multiple_of(r) || !cfg.model.horizon.is_multiple_of(r) {
            return Err(Failure::usage(format!(
                "channel `{}` has sampling factor {r}, which does not divide input_len {} and horizon {}",
                c.name, cfg.model.input_len, cfg.model.horizon
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SplitsFile {
    base_len: usize,
    max_factor: usize,
    fractions: SplitFractions,
    train: [usize; 2],
    val: [usize; 2],
    test: [usize; 2],
}

#[derive(Serialize)]
struct ChannelStats {
    name: String,
    factor: usize,
    samples: usize,
    observed: usize,
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct PlanChannel {
    name: String,
    factor: usize,
    input_len: usize,
    patch_len: usize,
    patches: usize,
    dropped: usize,
}

#[derive(Serialize)]
struct PlanPreview {
    input_len: usize,
    kappa: f64,
    base_patch_len: usize,
    dynamic_patching: bool,
    channels: Vec<PlanChannel>,
}

fn plan_preview(ds: &AsyncDataset, cfg: &ModelConfig, plan: &PatchPlan) -> PlanPreview {
    PlanPreview {
        input_len: cfg.input_len,
        kappa: cfg.kappa,
        base_patch_len: cfg.base_patch_len,
        dynamic_patching: cfg.dynamic_patching,
        channels: ds
            .channels
            .iter()
            .enumerate()
            .map(|(i, c)| PlanChannel {
                name: c.name.clone(),
                factor: c.factor,
                input_len: plan.input_lens[i],
                patch_len: plan.lens[i],
                patches: plan.counts[i],
                dropped: plan.dropped[i],
            })
            .collect(),
    }
}

fn cmd_prepare(a: PrepareArgs) -> CliResult {
    let manifest = read_manifest(&a.manifest)?;
    let ds = load_manifest_dataset(&a.manifest)?;
    let cfg = read_run_config(a.config.as_deref())?;
    let plan = check_compat(&ds, &cfg).and_then(|()| Ok(plan_for(&ds.normalized(), &cfg.model)?));
    // Without an explicit config the preview is best effort.
    let plan = match plan {
        Ok(p) => Some(p),
        Err(f) if a.config.is_none() => {
            eprintln!("note: no patch plan preview for the default config: {f}");
            None
        }
        Err(f) => return Err(f),
    };

    fs::create_dir_all(&a.out)?;
    write_dataset_csv(&ds, &a.out.join(DATA_CSV), None)?;
    let out_manifest = manifest_for(&ds, &manifest.name, manifest.base_period_seconds, manifest.splits, DATA_CSV);
    write_json(&a.out.join(MANIFEST_JSON), &out_manifest)?;
    let range = |s: Split| {
        let r = ds.split_range(s);
        [r.start, r.end]
    };
    write_json(
        &a.out.join("splits.json"),
        &SplitsFile {
            base_len: ds.base_len,
            max_factor: ds.max_factor(),
            fractions: manifest.splits,
            train: range(Split::Train),
            val: range(Split::Val),
            test: range(Split::Test),
        },
    )?;
    let stats: Vec<ChannelStats> = ds
        .channels
        .iter()
        .enumerate()
        .map(|(i, c)| ChannelStats {
            name: c.name.clone(),
            factor: c.factor,
            samples: ds.values[i].len(),
            observed: ds.observed[i].iter().filter(|&&o| o).count(),
            mean: ds.stats.mean[i],
            std: ds.stats.std[i],
        })
        .collect();
    write_json(&a.out.join("stats.json"), &serde_json::json!({ "channels": stats }))?;
    println!("dataset `{}`: {} fine steps, {} channels", manifest.name, ds.base_len, ds.n_channels());
    if let Some(plan) = plan {
        let preview = plan_preview(&ds, &cfg.model, &plan);
        write_json(&a.out.join("patch_plan.json"), &preview)?;
        println!("{:<16} {:>6} {:>9} {:>9} {:>8}", "channel", "factor", "input_len", "patch_len", "patches");
        for c in &preview.channels {
            println!(
                "{:<16} {:>6} {:>9} {:>9} {:>8}",
                c.name, c.factor, c.input_len, c.patch_len, c.patches
            );
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mpath = manifest_path(&a.dataset);
    if a.run_dir.join(CHECKPOINT_FILE).exists() {
        return Err(Failure::usage(format!(
            "{} already holds a run; choose a new run directory",
            a.run_dir.display()
        )));
    }
    let ds = load_manifest_dataset(&mpath)?;
    let mut cfg = read_run_config(a.config.as_deref())?;
    if let Some(s) = &a.mask_strategy {
        cfg.model.mask_strategy = s.parse()?;
    }
    if let Some(c) = a.channel_tokens {
        cfg.model.channel_tokens = c;
    }
    if let Some(d) = a.dropout_ratio {
        cfg.model.dropout_ratio = d;
    }
    for name in &a.ablate {
        let toggle: Ablation = name.parse()?;
        cfg.model = ablate(&cfg.model, toggle);
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(seed) = a.seed.or(env_seed()?) {
        cfg.train.seed = seed;
    }
    check_compat(&ds, &cfg)?;

    let res = fit(&ds, &cfg.model, &cfg.train)?;
    println!("{:>5} {:>12} {:>12}", "epoch", "train_cmse", "val_cmse");
    for h in &res.history {
        let mark = if Some(h.epoch) == res.best_epoch { " *" } else { "" };
        println!("{:>5} {:>12.6} {:>12.6}{mark}", h.epoch, h.train_cmse, h.val_cmse);
    }
    let dataset = fs::canonicalize(&mpath).unwrap_or(mpath);
    let record = RunRecord {
        dataset,
        model: res.model.config.clone(),
        train: cfg.train.clone(),
        factors: ds.factors(),
        channel_names: ds.channels.iter().map(|c| c.name.clone()).collect(),
        plan: res.model.plan.clone(),
        best_epoch: res.best_epoch,
        best_val_cmse: res.best_val_cmse.is_finite().then_some(res.best_val_cmse),
        diverged: res.diverged.clone(),
    };
    save_run(&a.run_dir, &record, &res.model, &res.history)?;
    println!("wrote {}", a.run_dir.display());
    if let Some(msg) = res.diverged {
        return Err(Failure { code: 3, message: format!("training diverged: {msg}") });
    }
    Ok(())
}

fn ratio_tag(ratio: f64) -> String {
    format!("m{ratio:.3}")
}

fn write_window_csv(path: &Path, report: &EvalReport) -> CliResult {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["origin", "cmse", "cmae"])?;
    for m in &report.per_window {
        w.write_record([m.origin.to_string(), m.cmse.to_string(), m.cmae.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalSettings {
    run: PathBuf,
    protocol: MissingProtocol,
    seed: u64,
    input_len: usize,
    missing_ratios: Vec<f64>,
    units: String,
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (record, model) = load_run(&a.run_dir)?;
    let ds = load_manifest_dataset(&record.dataset)?;
    if ds.factors() != record.factors {
        return Err(Failure::usage(format!(
            "run was trained on factors {:?}, dataset now has {:?}",
            record.factors,
            ds.factors()
        )));
    }
    let protocol: MissingProtocol = a.protocol.parse()?;
    let seed = a.seed.or(env_seed()?).unwrap_or(record.train.seed);
    let ratios = if a.missing_ratio.is_empty() { vec![0.0] } else { a.missing_ratio.clone() };
    if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Failure::usage(format!("missing ratio {r} must lie in [0, 1)")));
    }
    let opts = EvalOptions {
        input_len: a.input_length,
        normalized: a.normalized,
    };
    let used_len = a.input_length.unwrap_or(model.config.input_len);
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.run_dir.join(format!("eval_L{used_len}_{}_s{seed}", a.protocol)));
    if out.exists() && fs::read_dir(&out)?.next().is_some() {
        return Err(Failure::usage(format!("{} is not empty; choose a new output directory", out.display())));
    }

    let mut reports = Vec::with_capacity(ratios.len());
    for &ratio in &ratios {
        let scenario = if ratio == 0.0 {
            Scenario::Clean
        } else {
            Scenario::Missing { protocol, ratio }
        };
        let report = evaluate(&model, &ds, scenario, seed, opts)?;
        let (preds, targets) = scenario_forecasts(&model, &ds, scenario, seed, a.input_length)?;
        reports.push((ratio, report, preds, targets));
    }

    fs::create_dir_all(&out)?;
    write_json(
        &out.join("eval.json"),
        &EvalSettings {
            run: a.run_dir.clone(),
            protocol,
            seed,
            input_len: used_len,
            missing_ratios: ratios.clone(),
            units: if a.normalized { "normalized" } else { "data" }.into(),
        },
    )?;
    println!("{:>7} {:>8} {:>12} {:>12}", "ratio", "windows", "cmse", "cmae");
    for (ratio, report, preds, targets) in &reports {
        let tag = ratio_tag(*ratio);
        write_json(&out.join(format!("report_{tag}.json")), report)?;
        write_window_csv(&out.join(format!("windows_{tag}.csv")), report)?;
        match frequency_bias_report(preds, targets, &default_bands()) {
            Ok(bias) => write_json(&out.join(format!("freq_bias_{tag}.json")), &bias)?,
            Err(e) => eprintln!("warning: frequency bias skipped: {e}"),
        }
        for (c, spec) in ds.channels.iter().enumerate() {
            let points = |v: &[f64]| -> Vec<(f64, f64)> {
                v.iter()
                    .enumerate()
                    .map(|(k, &y)| (((k + 1) * spec.factor) as f64, y))
                    .collect()
            };
            let chart = LineChart {
                title: format!("{} (first test window, {tag})", spec.name),
                x_label: "fine steps ahead".into(),
                y_label: spec.name.clone(),
                series: vec![
                    Series { name: "truth".into(), points: points(&targets[0][c]) },
                    Series { name: "forecast".into(), points: points(&preds[0][c]) },
                ],
            };
            fs::write(out.join(format!("forecast_{tag}_{}.svg", spec.name)), chart.render())?;
        }
        println!("{:>7.3} {:>8} {:>12.6} {:>12.6}", ratio, report.windows, report.cmse, report.cmae);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn resolve_channel(ds: &AsyncDataset, key: &str) -> CliResult<usize> {
    if let Some(i) = ds.channels.iter().position(|c| c.name == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < ds.n_channels() => Ok(i),
        _ => Err(Failure::usage(format!(
            "unknown channel `{key}`; available: {}",
            ds.channels.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// First fully observed run of `n` channel samples inside the training split.
fn observed_segment(ds: &AsyncDataset, ch: usize, n: usize) -> Option<Vec<f64>> {
    let end = ds.split_range(Split::Train).end / ds.channels[ch].factor;
    let obs = &ds.observed[ch][..end.min(ds.observed[ch].len())];
    let mut run = 0;
    for (i, &o) in obs.iter().enumerate() {
        run = if o { run + 1 } else { 0 };
        if run == n {
            return Some(ds.values[ch][i + 1 - n..=i].to_vec());
        }
    }
    None
}

fn cmd_spectral(a: SpectralArgs) -> CliResult {
    let mpath = manifest_path(&a.dataset);
    let ds = load_manifest_dataset(&mpath)?;
    let ch = resolve_channel(&ds, &a.channel)?;
    let r = a.factor;
    if r == 0 {
        return Err(Failure::usage("--factor must be at least 1"));
    }
    let n = a.length - a.length % r;
    if n < 2 * r {
        return Err(Failure::usage(format!("--length {} leaves fewer than two coarse samples at factor {r}", a.length)));
    }
    let name = ds.channels[ch].name.clone();
    let x = observed_segment(&ds, ch, n).ok_or_else(|| {
        Failure::usage(format!("channel `{name}` has no fully observed run of {n} samples in the training split"))
    })?;
    let report = interp_distortion_report(&zero_centered(&x), r)?;

    let out = a.out.clone().unwrap_or_else(|| dataset_dir(&a.dataset).join("spectral"));
    fs::create_dir_all(&out)?;
    let stem = format!("spectral_{name}_r{r}");
    let freq = |k: usize| k as f64 / n as f64;
    let mut w = csv::Writer::from_path(out.join(format!("{stem}.csv")))?;
    w.write_record(["bin", "frequency", "attenuation", "phase_delay", "reference"])?;
    for k in 0..report.attenuation.len() {
        w.write_record([
            k.to_string(),
            freq(k).to_string(),
            report.attenuation[k].to_string(),
            report.phase_delay[k].to_string(),
            report.reference[k].to_string(),
        ])?;
    }
    w.flush()?;

    let curve = |v: &[f64]| -> Vec<(f64, f64)> { v.iter().enumerate().map(|(k, &y)| (freq(k), y)).collect() };
    let amp = LineChart {
        title: format!("{name}: amplitude ratio after r={r} linear interpolation"),
        x_label: "frequency (cycles per sample)".into(),
        y_label: "|interpolated| / |original|".into(),
        series: vec![
            Series { name: "measured".into(), points: curve(&report.attenuation) },
            Series { name: "sinc^2".into(), points: curve(&report.reference) },
        ],
    };
    fs::write(out.join(format!("{stem}.svg")), amp.render())?;
    let phase = LineChart {
        title: format!("{name}: phase delay after r={r} linear interpolation"),
        x_label: "frequency (cycles per sample)".into(),
        y_label: "phase difference (rad)".into(),
        series: vec![Series { name: "measured".into(), points: curve(&report.phase_delay) }],
    };
    fs::write(out.join(format!("{stem}_phase.svg")), phase.render())?;

    println!("channel `{name}`, n = {n}, factor {r}");
    println!("{:<6} {:>16}", "band", "mean attenuation");
    for band in default_bands() {
        let vals: Vec<f64> = (0..report.attenuation.len())
            .filter(|&k| freq(k) >= band.lo && freq(k) < band.hi)
            .map(|k| report.attenuation[k])
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            println!("{:<6} {:>16}", band.name, "-");
        } else {
            println!("{:<6} {:>16.4}", band.name, vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    println!("wrote {}", out.join(format!("{stem}.csv")).display());
    Ok(())
}
