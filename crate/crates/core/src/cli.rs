//! The `mossl` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::data::{self, Dataset, DatasetDescriptor, Split};
use crate::error::{Error, Result};
use crate::model::{
    self, config_hash, evaluate, load_checkpoint, persistence_metrics, save_checkpoint, Ablation,
    EpochRecord, History, Metrics, Model, ModelVars, TrainConfig,
};
use crate::numerics::{container, grad_check, ParamStore, Tape, Tensor};
use crate::seed::{derive_seed, stream};

#[derive(Debug, Parser)]
#[command(
    name = "mossl",
    version,
    about = "Multi-modality spatio-temporal forecasting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Compute device; only `cpu` exists.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (CSV plus descriptor).
    Synth(RunArgs),
    /// Validate a CSV dataset and store it in binary form.
    Prepare(RunArgs),
    /// Train a model into a new run directory.
    Train(RunArgs),
    /// Evaluate a trained run on one split.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Dump representations and mixture states of a trained run.
    ExportRepr(EvalArgs),
    /// Train the full model and the four single-switch ablations.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (the run root for `train` and `ablate`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Training windows in the checked batch.
    #[arg(long, default_value_t = 2)]
    pub windows: usize,
}

/// What a run directory records besides the verbatim config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub config_hash: String,
    pub dataset: String,
    /// Directory relative data paths in `config.json` are resolved against.
    pub config_dir: PathBuf,
    pub created: String,
}

/// Parse `args` and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::Config(format!(
            "unsupported device `{}` (only cpu)",
            cli.device
        )));
    }
    match &cli.command {
        Command::Synth(a) => synth(a, cli.quiet),
        Command::Prepare(a) => prepare(a, cli.quiet),
        Command::Train(a) => {
            let (cfg, text, seed) = load_config(a)?;
            let dir = new_run_dir(&run_root(a.out.as_deref(), &cfg), "train", seed)?;
            train_into(&dir, &cfg, &text, &a.config, seed, cli.quiet)?;
            say(cli.quiet, &format!("run directory: {}", dir.display()));
            Ok(())
        }
        Command::Eval(a) => eval(a, cli.quiet),
        Command::Gradcheck(a) => gradcheck(a, cli.quiet),
        Command::ExportRepr(a) => export_repr(a, cli.quiet),
        Command::Ablate(a) => ablate(a, cli.quiet),
    }
}

fn say(quiet: bool, line: &str) {
    if !quiet {
        println!("{line}");
    }
}

fn load_config(a: &RunArgs) -> Result<(RunConfig, String, u64)> {
    let (cfg, text) = RunConfig::load(&a.config)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    Ok((cfg, text, seed))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_root(out: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os("MOSSL_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<UTC timestamp>-<label>-seed<seed>`, suffixed if taken.
fn new_run_dir(root: &Path, label: &str, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{label}-seed{seed}");
    let mut dir = root.join(&base);
    let mut n = 2;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn synth(a: &RunArgs, quiet: bool) -> Result<()> {
    let (cfg, _, seed) = load_config(a)?;
    let DataSource::Synthetic {
        spec,
        seed: data_seed,
    } = &cfg.data
    else {
        return Err(Error::Config(
            "`synth` needs a config with a synthetic data source".into(),
        ));
    };
    let series = data::synth_generate(spec, data_seed.unwrap_or(seed))?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    series.write_csv(&out.join("series.csv"))?;
    let mut d = DatasetDescriptor::describe("synthetic", &series, cfg.split.unwrap_or_default());
    d.csv = Some(PathBuf::from("series.csv"));
    write(
        &out.join("descriptor.json"),
        &serde_json::to_string_pretty(&d)?,
    )?;
    say(
        quiet,
        &format!(
            "wrote {} steps x {} nodes x {} modalities to {}",
            series.steps(),
            series.nodes(),
            series.modalities(),
            out.display()
        ),
    );
    Ok(())
}

fn prepare(a: &RunArgs, quiet: bool) -> Result<()> {
    let (cfg, _, _) = load_config(a)?;
    let (series, split, name) = cfg.series()?;
    let descriptor = DatasetDescriptor::describe(&name, &series, split);
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("prepared"));
    let stats = data::write_prepared(&out, &descriptor, &series)?;
    say(quiet, &format!("prepared `{name}` in {}", out.display()));
    for (m, mod_name) in series.modality_names().iter().enumerate() {
        say(
            quiet,
            &format!(
                "  {mod_name}: mean {:.4} std {:.4}",
                stats.mean[m], stats.std[m]
            ),
        );
    }
    Ok(())
}

fn epoch_line(e: &EpochRecord, epochs: usize) -> String {
    let mut line = format!(
        "epoch {}/{epochs} total {:.4} forecast {:.4}",
        e.epoch, e.train.total, e.train.forecast
    );
    if let Some(g) = e.train.global {
        line += &format!(" global {g:.4}");
    }
    if let Some(c) = e.train.modality {
        line += &format!(" modality {c:.4}");
    }
    if let Some(v) = e.val_rmse {
        line += &format!(" val_rmse {v:.4}");
    }
    line
}

/// Train and write config, run info, checkpoint, history and validation
/// metrics into `dir`.
fn train_into(
    dir: &Path,
    cfg: &RunConfig,
    config_text: &str,
    config_path: &Path,
    seed: u64,
    quiet: bool,
) -> Result<(Dataset, Model, ParamStore, History)> {
    let (ds, model) = cfg.dataset()?;
    let (_, _, name) = cfg.series()?;
    write(&dir.join("config.json"), config_text)?;
    let config_dir = config_path
        .parent()
        .map(|p| {
            if p.as_os_str().is_empty() {
                Path::new(".")
            } else {
                p
            }
        })
        .unwrap_or(Path::new("."));
    let info = RunInfo {
        seed,
        config_hash: config_hash(&model),
        dataset: name,
        config_dir: fs::canonicalize(config_dir).map_err(|e| Error::io(config_dir, e))?,
        created: chrono::Utc::now().to_rfc3339(),
    };
    write(&dir.join("run.json"), &serde_json::to_string_pretty(&info)?)?;
    let epochs = cfg.train.epochs;
    let outcome = model::train(&model, &ds, &cfg.train, seed, &mut |e| {
        if !quiet {
            eprintln!("{}", epoch_line(e, epochs));
        }
    })?;
    save_checkpoint(&dir.join("checkpoint"), &model, &outcome.params)?;
    outcome.history.write(dir)?;
    if let Some(m) = &outcome.val_metrics {
        m.write(dir)?;
        say(
            quiet,
            &format!(
                "validation MAE {:.4} RMSE {:.4}",
                m.overall_mae, m.overall_rmse
            ),
        );
    }
    Ok((ds, model, outcome.params, outcome.history))
}

/// Reload a run directory: config, dataset, model and trained parameters.
pub fn open_run(dir: &Path) -> Result<(RunConfig, RunInfo, Dataset, Model, ParamStore)> {
    let info_path = dir.join("run.json");
    let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
    let info: RunInfo = serde_json::from_str(&text)?;
    let cfg_path = dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.resolve_paths(&info.config_dir);
    cfg.seed = info.seed;
    let (ds, model) = cfg.dataset()?;
    let (_, params) = load_checkpoint(&dir.join("checkpoint"), Some(&model))?;
    Ok((cfg, info, ds, model, params))
}

fn print_metrics(quiet: bool, label: &str, m: &Metrics) {
    say(
        quiet,
        &format!(
            "{label}: MAE {:.4} RMSE {:.4} over {} windows",
            m.overall_mae, m.overall_rmse, m.windows
        ),
    );
    for r in &m.rows {
        say(
            quiet,
            &format!(
                "  {:<16} h{} MAE {:.4} RMSE {:.4}",
                r.modality, r.horizon, r.mae, r.rmse
            ),
        );
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn eval(a: &EvalArgs, quiet: bool) -> Result<()> {
    let (_, _, ds, model, params) = open_run(&a.run)?;
    let windows = ds.windows(a.split);
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "the {} split has no windows",
            split_name(a.split)
        )));
    }
    let names = ds.series.modality_names();
    let metrics = evaluate(&params, &model, windows, names, &ds.stats)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.run.join(format!("eval-{}", split_name(a.split))));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    metrics.write(&out)?;
    let baseline = persistence_metrics(windows, names, &ds.stats)?;
    let path = out.join("persistence.json");
    write(&path, &serde_json::to_string_pretty(&baseline)?)?;
    print_metrics(quiet, split_name(a.split), &metrics);
    print_metrics(quiet, "persistence", &baseline);
    Ok(())
}

/// Parameters with every bias nudged off zero, so no ReLU input sits
/// exactly on its kink.
pub fn gradcheck_point(params: &ParamStore, seed: u64) -> ParamStore {
    let mut p = params.clone();
    let names: Vec<String> = p.names().cloned().collect();
    for name in names {
        let tail = name.rsplit('.').next().unwrap_or("");
        if tail == "b" || tail.starts_with("b_") {
            let mut rng = stream(seed, "gradcheck-offset", &[]);
            let mut rng = stream(rng.gen(), &name, &[]);
            for v in p.get_mut(&name).expect("listed").data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    p
}

fn gradcheck(a: &GradcheckArgs, quiet: bool) -> Result<()> {
    let (cfg, _) = RunConfig::load(&a.config)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let (ds, model) = RunConfig {
        seed,
        ..cfg.clone()
    }
    .dataset()?;
    let params = gradcheck_point(&model.init_params(seed), seed);
    let count = a.windows.clamp(1, ds.train.len());
    let windows = ds.train[..count].to_vec();
    let seeds: Vec<u64> = (0..count as u64)
        .map(|i| derive_seed(seed, "gradcheck-mask", &[i]))
        .collect();
    let masks = model::draw_masks(&params, &model, &cfg.train, &windows, &seeds)?;
    let report = grad_check(&params, a.eps, |tape, vars| {
        let vars = ModelVars::bind(vars, &model)?;
        model::batch_objective(tape, &vars, &model, &cfg.train, &windows, &masks)
    })?;
    let failing = report.failures(a.tolerance).count();
    say(
        quiet,
        &format!(
            "checked {} coordinates over {} parameters; max relative error {:.3e}; {failing} at or above {:.0e}",
            report.coordinates,
            report.per_param.len(),
            report.max_relative_error,
            a.tolerance
        ),
    );
    if let Some(w) = &report.worst {
        say(
            quiet,
            &format!(
                "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            ),
        );
    }
    if report.passes(a.tolerance) {
        say(quiet, "gradient check passed");
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} >= {:.0e}",
            report.max_relative_error, a.tolerance
        )))
    }
}

fn export_repr(a: &EvalArgs, quiet: bool) -> Result<()> {
    let (cfg, info, ds, model, params) = open_run(&a.run)?;
    let windows = ds.windows(a.split);
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.run.join(format!("repr-{}", split_name(a.split))));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let full = TrainConfig {
        ablation: Ablation::default(),
        ..cfg.train.clone()
    };
    let mut stacks: [Vec<Tensor>; 6] = Default::default();
    let mut index = String::from("window,anchor,masked_fraction\n");
    for (i, w) in windows.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let vars = ModelVars::bind(&bound, &model)?;
        let seed = derive_seed(info.seed, "export-mask", &[i as u64]);
        let f = model::forward_train(
            &mut tape,
            &vars,
            &model,
            &full,
            w,
            model::MaskSource::Sampled(seed),
        )?;
        let mix = f
            .mixture
            .expect("full model computes the mixture")
            .state(&tape);
        let h_aug = f.h_aug.expect("full model computes the augmented view");
        for (slot, t) in stacks.iter_mut().zip([
            tape.value(f.h).clone(),
            tape.value(h_aug).clone(),
            mix.gamma,
            mix.mu,
            mix.sigma2,
            tape.value(f.prediction).clone(),
        ]) {
            slot.push(t);
        }
        let masked = f.mask.as_ref().map_or(0.0, |m| m.masked_fraction());
        index += &format!("{i},{},{masked}\n", w.anchor);
    }
    for (name, tensors) in ["h", "h_aug", "gamma", "mu", "sigma2", "prediction"]
        .iter()
        .zip(&stacks)
    {
        let refs: Vec<&Tensor> = tensors.iter().collect();
        container::save_tensors(&out.join(format!("{name}.most")), &refs)?;
    }
    write(&out.join("windows.csv"), &index)?;
    say(
        quiet,
        &format!("exported {} windows to {}", windows.len(), out.display()),
    );
    Ok(())
}

/// Directory-safe variant label.
fn variant_slug(label: &str) -> String {
    label.to_lowercase().replace("w/o ", "wo-")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub epochs: usize,
    pub final_forecast: f64,
    pub final_global: Option<f64>,
    pub final_modality: Option<f64>,
    pub val_rmse: Option<f64>,
    pub test_mae: Option<f64>,
    pub test_rmse: Option<f64>,
}

fn ablate(a: &RunArgs, quiet: bool) -> Result<()> {
    let (cfg, _, seed) = load_config(a)?;
    let root = new_run_dir(&run_root(a.out.as_deref(), &cfg), "ablate", seed)?;
    let mut rows = Vec::new();
    for (label, flags) in Ablation::variants() {
        let mut variant = cfg.clone();
        variant.train.ablation = flags;
        variant.seed = seed;
        let dir = root.join(variant_slug(label));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        say(quiet, &format!("== {label}"));
        let text = serde_json::to_string_pretty(&variant)?;
        let (ds, model, params, history) =
            train_into(&dir, &variant, &text, &a.config, seed, quiet)?;
        let test = if ds.test.is_empty() {
            None
        } else {
            let m = evaluate(
                &params,
                &model,
                &ds.test,
                ds.series.modality_names(),
                &ds.stats,
            )?;
            let test_dir = dir.join("eval-test");
            fs::create_dir_all(&test_dir).map_err(|e| Error::io(&test_dir, e))?;
            m.write(&test_dir)?;
            Some(m)
        };
        let last = history.epochs.last().expect("at least one epoch");
        rows.push(AblationRow {
            variant: label.to_string(),
            epochs: history.epochs.len(),
            final_forecast: last.train.forecast,
            final_global: last.train.global,
            final_modality: last.train.modality,
            val_rmse: last.val_rmse,
            test_mae: test.as_ref().map(|m| m.overall_mae),
            test_rmse: test.as_ref().map(|m| m.overall_rmse),
        });
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut table = String::from(
        "variant,epochs,final_forecast,final_global,final_modality,val_rmse,test_mae,test_rmse\n",
    );
    for r in &rows {
        table += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.epochs,
            r.final_forecast,
            opt(r.final_global),
            opt(r.final_modality),
            opt(r.val_rmse),
            opt(r.test_mae),
            opt(r.test_rmse)
        );
    }
    write(&root.join("ablation.csv"), &table)?;
    write(
        &root.join("ablation.json"),
        &serde_json::to_string_pretty(&rows)?,
    )?;
    say(quiet, &table);
    say(quiet, &format!("ablation directory: {}", root.display()));
    Ok(())
}
