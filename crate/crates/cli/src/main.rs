//! `grnet` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! divergence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grnet::ablation::{canonical_preset, preset, run_ablation_suite, PRESET_NAMES};
use grnet::checkpoint::Checkpoint;
use grnet::config::{fingerprint, RunConfig, RunManifest};
use grnet::datamodel::{
    generate_synthetic, list_stems, load_dataset_resized, load_input, to_gray_image, to_rgb_image, SamplePair,
    SynthSpec,
};
use grnet::metrics::MetricReport;
use grnet::model::Grnet;
use grnet::trainer::{evaluate_with_maps, gate_stats, loss_log_csv, train};
use grnet::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "grnet", version, about = "Gated recoding network for RGB-D salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset in the rgb/ depth/ gt/ layout.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, loss log and manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        run_dir: PathBuf,
        /// Also write prediction maps to <run_dir>/maps.
        #[arg(long)]
        maps: bool,
        /// Dataset label used in the metric CSV.
        #[arg(long, default_value = "data")]
        name: String,
    },
    /// Write one 8-bit saliency map per rgb/depth pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with rgb/ and depth/ subdirectories.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Mean gate values per dataset.
    GateStats {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `NAME=DIR` dataset; repeatable.
        #[arg(long = "dataset", value_parser = parse_named)]
        datasets: Vec<(String, PathBuf)>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Gate CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a list of ablation rows with a shared seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Rows by name or 1-based number, comma separated (default: all).
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// List the ablation presets.
    PresetList,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML config file, or a run manifest (.json) to repeat a run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper, desk or tiny.
    #[arg(long)]
    profile: Option<String>,
    /// Ablation preset name or row number.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimiser steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads (1 = strict single-threaded mode).
    #[arg(long)]
    threads: Option<usize>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Dataset directory; synthetic data from the [synth] section when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation dataset directory (train and ablate).
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    parse_kv(s).map(|(k, v)| (k, PathBuf::from(v)))
}

/// CLI failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::UnknownPreset { .. } | Error::InvalidArgument(_) | Error::GatingDisabled => 2,
            Error::CheckpointMismatch(_) | Error::CheckpointFormat(_) | Error::Json(_) => 2,
            Error::Diverged { .. } => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = &args.profile {
        overrides.push(("profile".to_string(), p.clone()));
    }
    if let Some(p) = &args.preset {
        overrides.push(("preset".to_string(), p.clone()));
    }
    if let Some(s) = args.seed {
        overrides.push(("train.seed".to_string(), s.to_string()));
        overrides.push(("synth.seed".to_string(), s.to_string()));
    }
    if let Some(s) = args.steps {
        overrides.push(("train.max_steps".to_string(), s.to_string()));
    }
    if let Some(t) = args.threads {
        overrides.push(("train.threads".to_string(), t.to_string()));
    }
    overrides.extend(args.set.iter().cloned());

    let text = match &args.config {
        Some(path) => fs::read_to_string(path).map_err(|e| Failure {
            code: 2,
            message: format!("config {}: {e}", path.display()),
        })?,
        None => String::new(),
    };
    let is_manifest = args.config.as_ref().is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
    if is_manifest {
        let manifest = RunManifest::from_json(&text).map_err(|e| Failure {
            code: 2,
            message: format!("manifest: {e}"),
        })?;
        let base = manifest.config.to_toml()?;
        return Ok(RunConfig::from_toml(&base, &overrides)?);
    }
    Ok(RunConfig::from_toml(&text, &overrides)?)
}

fn load_data(dir: Option<&Path>, cfg: &RunConfig) -> CliResult<(Vec<SamplePair>, String)> {
    match dir {
        Some(d) => Ok((load_dataset_resized(d, cfg.model.input_size)?, d.display().to_string())),
        None => {
            let spec = SynthSpec {
                image_size: cfg.model.input_size,
                ..cfg.synth
            };
            Ok((generate_synthetic(&spec)?, format!("synthetic:{spec:?}")))
        }
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> CliResult<()> {
    write(&dir.join("manifest.json"), manifest.to_json()?)
}

fn save_gray(t: &Tensor, path: &Path) -> CliResult<()> {
    to_gray_image(t).save(path).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_dataset(root: &Path, samples: &[SamplePair]) -> CliResult<()> {
    for sub in ["rgb", "depth", "gt"] {
        ensure_dir(&root.join(sub))?;
    }
    for s in samples {
        let name = format!("{}.png", s.id);
        let rgb_path = root.join("rgb").join(&name);
        to_rgb_image(&s.rgb).save(&rgb_path).map_err(|e| Failure {
            code: 3,
            message: format!("{}: {e}", rgb_path.display()),
        })?;
        save_gray(&s.depth, &root.join("depth").join(&name))?;
        save_gray(&s.gt, &root.join("gt").join(&name))?;
    }
    Ok(())
}

fn metric_outputs(dir: &Path, report: &MetricReport, dataset: &str, model: &str) -> CliResult<()> {
    write(&dir.join("metrics.txt"), report.to_key_value())?;
    let csv = format!("{}\n{}", MetricReport::CSV_HEADER, report.to_csv_rows(dataset, model));
    write(&dir.join("metrics.csv"), csv)
}

fn cmd_synth(cfg: &ConfigArgs, out: &Path) -> CliResult<()> {
    let cfg = load_config(cfg)?;
    let samples = generate_synthetic(&cfg.synth)?;
    write_dataset(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_train(args: &ConfigArgs, data: &DataArgs, run_dir: &Path) -> CliResult<()> {
    let cfg = load_config(args)?;
    let (train_set, source) = load_data(data.data.as_deref(), &cfg)?;
    ensure_dir(run_dir)?;
    let mut manifest = RunManifest::new("train", &cfg);
    manifest.datasets.push(fingerprint("train", &source, &train_set));
    let ckpt_path = run_dir.join("checkpoint.grnet");
    let outcome = match train(&cfg.model, &cfg.train, &train_set) {
        Ok(o) => o,
        Err(Error::Diverged { step, last }) => {
            let path = run_dir.join("last_finite.grnet");
            last.save(&path)?;
            return Err(Failure {
                code: 4,
                message: format!(
                    "training diverged at step {step}; last finite checkpoint saved to {}",
                    path.display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    outcome.checkpoint.save(&ckpt_path)?;
    write(&run_dir.join("loss.csv"), loss_log_csv(&outcome.log))?;
    manifest.outputs.insert("checkpoint".into(), "checkpoint.grnet".into());
    manifest.outputs.insert("loss_log".into(), "loss.csv".into());
    if let Some(eval_dir) = &data.eval_data {
        let eval_set = load_dataset_resized(eval_dir, cfg.model.input_size)?;
        manifest
            .datasets
            .push(fingerprint("eval", &eval_dir.display().to_string(), &eval_set));
        let (report, _) = evaluate_with_maps(&outcome.checkpoint, &eval_set)?;
        metric_outputs(run_dir, &report, "eval", "grnet")?;
        manifest.outputs.insert("metrics".into(), "metrics.csv".into());
    }
    write_manifest(run_dir, &manifest)?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.loss.total);
    println!("trained {} steps, final loss {last}", outcome.log.len());
    Ok(())
}

fn cmd_eval(ckpt: &Path, args: &ConfigArgs, data: &DataArgs, run_dir: &Path, maps: bool, name: &str) -> CliResult<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let mut cfg = load_config(args)?;
    cfg.model = checkpoint.model.clone();
    let (set, source) = load_data(data.data.as_deref(), &cfg)?;
    let (report, probs) = evaluate_with_maps(&checkpoint, &set)?;
    ensure_dir(run_dir)?;
    metric_outputs(run_dir, &report, name, &ckpt.display().to_string())?;
    let mut manifest = RunManifest::new("eval", &cfg);
    manifest.datasets.push(fingerprint(name, &source, &set));
    manifest.outputs.insert("metrics".into(), "metrics.csv".into());
    if maps {
        let dir = run_dir.join("maps");
        ensure_dir(&dir)?;
        for (s, p) in set.iter().zip(&probs) {
            save_gray(p, &dir.join(format!("{}.png", s.id)))?;
        }
        manifest.outputs.insert("maps".into(), "maps/".into());
    }
    write_manifest(run_dir, &manifest)?;
    print!("{}", report.to_csv_rows(name, "grnet"));
    Ok(())
}

fn cmd_predict(ckpt: &Path, input: &Path, output: &Path) -> CliResult<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let net = Grnet::new(&checkpoint.model).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    net.validate_params(&checkpoint.params)?;
    let stems = list_stems(input, false)?;
    ensure_dir(output)?;
    let size = checkpoint.model.input_size;
    let (mut written, mut failed) = (0usize, 0usize);
    for files in &stems {
        let result = load_input(files, size)
            .and_then(|(rgb, depth)| net.predict(&checkpoint.params, &rgb, &depth))
            .map_err(Failure::from)
            .and_then(|pred| save_gray(&pred.probs, &output.join(format!("{}.png", files.stem))));
        match result {
            Ok(()) => written += 1,
            Err(f) => {
                failed += 1;
                eprintln!("warning: {}: {}", files.stem, f.message);
            }
        }
    }
    println!("wrote {written} maps to {}", output.display());
    if written == 0 && failed > 0 {
        return Err(Failure {
            code: 3,
            message: format!("all {failed} inputs failed"),
        });
    }
    Ok(())
}

fn cmd_gate_stats(ckpt: &Path, datasets: &[(String, PathBuf)], args: &ConfigArgs, out: &Path) -> CliResult<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let mut cfg = load_config(args)?;
    cfg.model = checkpoint.model.clone();
    let mut named = Vec::new();
    if datasets.is_empty() {
        named.push(("synthetic".to_string(), load_data(None, &cfg)?.0));
    }
    for (name, dir) in datasets {
        named.push((name.clone(), load_dataset_resized(dir, cfg.model.input_size)?));
    }
    let report = gate_stats(&checkpoint, &named)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let csv = report.to_csv();
    write(out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, data: &DataArgs, rows: &[String], run_dir: &Path) -> CliResult<()> {
    let cfg = load_config(args)?;
    let rows: Vec<String> = if rows.is_empty() {
        PRESET_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        rows.to_vec()
    };
    for r in &rows {
        canonical_preset(r)?;
    }
    let (train_set, source) = load_data(data.data.as_deref(), &cfg)?;
    let eval_set = match &data.eval_data {
        Some(d) => load_dataset_resized(d, cfg.model.input_size)?,
        None => train_set.clone(),
    };
    let table = run_ablation_suite(&cfg.model, &cfg.train, &train_set, &eval_set, &rows)?;
    ensure_dir(run_dir)?;
    let csv = table.to_csv();
    write(&run_dir.join("ablation.csv"), &csv)?;
    let mut manifest = RunManifest::new("ablate", &cfg);
    manifest.datasets.push(fingerprint("train", &source, &train_set));
    if let Some(d) = &data.eval_data {
        manifest
            .datasets
            .push(fingerprint("eval", &d.display().to_string(), &eval_set));
    }
    manifest.outputs.insert("ablation".into(), "ablation.csv".into());
    write_manifest(run_dir, &manifest)?;
    print!("{csv}");
    Ok(())
}

fn cmd_preset_list() -> CliResult<()> {
    for (i, name) in PRESET_NAMES.iter().enumerate() {
        let f = preset(name)?;
        let fields: BTreeMap<&str, String> = [
            ("use_depth", f.use_depth.to_string()),
            ("use_mixer", f.use_mixer.to_string()),
            ("mgu_gating", f.mgu_gating.to_string()),
            ("decoder_mode", format!("{:?}", f.decoder_mode).to_lowercase()),
            ("oegs_gating", f.oegs_gating.to_string()),
            ("wam_variant", format!("{:?}", f.wam_variant).to_lowercase()),
            ("loss_mode", format!("{:?}", f.loss_mode).to_lowercase()),
        ]
        .into();
        let desc: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{} {name}: {}", i + 1, desc.join(" "));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { cfg, out } => cmd_synth(&cfg, &out),
        Command::Train { cfg, data, run_dir } => cmd_train(&cfg, &data, &run_dir),
        Command::Eval {
            checkpoint,
            cfg,
            data,
            run_dir,
            maps,
            name,
        } => cmd_eval(&checkpoint, &cfg, &data, &run_dir, maps, &name),
        Command::Predict {
            checkpoint,
            input,
            output,
        } => cmd_predict(&checkpoint, &input, &output),
        Command::GateStats {
            checkpoint,
            datasets,
            cfg,
            out,
        } => cmd_gate_stats(&checkpoint, &datasets, &cfg, &out),
        Command::Ablate {
            cfg,
            data,
            rows,
            run_dir,
        } => cmd_ablate(&cfg, &data, &rows, &run_dir),
        Command::PresetList => cmd_preset_list(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
