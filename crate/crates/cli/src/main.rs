use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use dca_core::config::RunConfig;
use dca_core::data::{write_features, write_features_binary};
use dca_core::eval::{evaluate_model, pr_curve, pr_curve_csv, pr_curve_svg, QueryEmbedding};
use dca_core::gradcheck::{run_gradcheck, GradcheckConfig};
use dca_core::trainer::{load_checkpoint, loss_csv_row, save_checkpoint, TrainState, Trainer, LOSS_CSV_HEADER};
use dca_core::DcaError;

#[derive(Parser)]
#[command(name = "dca", version, about = "Cross-modal sketch to 3D shape retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr_init=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Sets both `train.seed` and `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryArg {
    Encoder,
    Transformed,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as a feature file.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Write the binary format instead of text.
        #[arg(long)]
        binary: bool,
    },
    /// Pretrain and train, writing checkpoints and the loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Feature file to train on (sets `data.features`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Drop the class-mean alignment term.
        #[arg(long)]
        disable_cmd: bool,
        /// Drop the semantic-preservation term.
        #[arg(long)]
        disable_sep: bool,
        /// Train only the two encoders.
        #[arg(long)]
        encoders_only: bool,
        /// Also write `checkpoint-<step>.dca` every this many steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Continue from a checkpoint; its config is used as is.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint and write the metric CSV.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature file; defaults to the data the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Query embedding; defaults to `encoder` for encoder-only runs.
        #[arg(long, value_enum)]
        query: Option<QueryArg>,
    },
    /// Write the interpolated precision-recall curve as CSV and SVG.
    ExportPr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        query: Option<QueryArg>,
    },
    /// Compare every loss gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

type CliResult<T> = Result<T, DcaError>;

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn io_err(path: &Path, e: std::io::Error) -> DcaError {
    DcaError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Run manifest: command, config, seeds, input and artifact checksums and
/// the only timestamp a run produces.
struct Manifest {
    command: &'static str,
    inputs: Map<String, Value>,
    artifacts: Vec<PathBuf>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Manifest {
            command,
            inputs: Map::new(),
            artifacts: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs
            .insert(path.display().to_string(), Value::String(sha256_file(path)?));
        Ok(())
    }

    fn write(self, out: &Path, config: Option<&RunConfig>) -> CliResult<()> {
        let mut artifacts = Map::new();
        for a in &self.artifacts {
            let name = a.file_name().map_or_else(|| a.display().to_string(), |n| n.to_string_lossy().into());
            artifacts.insert(name, Value::String(sha256_file(a)?));
        }
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config.map(|c| serde_json::to_value(c).expect("config serializes")),
            "seeds": config.map(|c| json!({"train": c.train.seed, "data": c.data.seed})),
            "inputs": self.inputs,
            "artifacts": artifacts,
            "created_unix": created,
        });
        let path = out.join("run-manifest.json");
        write_file(&path, serde_json::to_string_pretty(&manifest).expect("json") + "\n")
    }
}

fn load_config(common: &Common, extra: &[String]) -> CliResult<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("data.seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn generate_data(common: &Common, binary: bool) -> CliResult<()> {
    let cfg = load_config(common, &[])?;
    let dataset = RunConfig {
        data: Default::default(),
        ..cfg.clone()
    }
    .dataset()?;
    prepare_out(&common.out)?;
    let path = if binary {
        let p = common.out.join("features.bin");
        write_file(&p, write_features_binary(&dataset))?;
        p
    } else {
        let p = common.out.join("features.txt");
        write_file(&p, write_features(&dataset))?;
        p
    };
    println!("wrote {} ({dataset})", path.display());
    let mut manifest = Manifest::new("generate-data");
    manifest.artifacts.push(path);
    manifest.write(&common.out, Some(&cfg))
}

struct TrainArgs<'a> {
    common: &'a Common,
    data: Option<&'a Path>,
    disable_cmd: bool,
    disable_sep: bool,
    encoders_only: bool,
    checkpoint_every: Option<u64>,
    resume: Option<&'a Path>,
}

fn train(args: TrainArgs<'_>) -> CliResult<()> {
    let common = args.common;
    let mut manifest = Manifest::new("train");
    let mut state = match args.resume {
        Some(path) => {
            manifest.input(path)?;
            load_checkpoint(path)?
        }
        None => {
            let mut extra = Vec::new();
            if let Some(d) = args.data {
                extra.push(format!("data.features={}", d.display()));
            }
            if args.disable_cmd {
                extra.push("train.loss.enable_cmd=false".into());
            }
            if args.disable_sep {
                extra.push("train.loss.enable_sep=false".into());
            }
            if args.encoders_only {
                extra.push("train.encoders_only=true".into());
            }
            let cfg = load_config(common, &extra)?;
            let input_dim = cfg.dataset()?.input_dim;
            TrainState::new(&cfg, input_dim)?
        }
    };
    let cfg = state.config.clone();
    if let Some(f) = &cfg.data.features {
        manifest.input(f)?;
    }
    let dataset = cfg.dataset()?;
    prepare_out(&common.out)?;
    let trainer = Trainer::new(&dataset, &state)?;
    println!("training on {dataset}");

    let out = common.out.clone();
    let every = args.checkpoint_every.filter(|&n| n > 0);
    let mut written = Vec::new();
    trainer.run(&mut state, |s| {
        if let Some(n) = every {
            if s.step % n == 0 {
                let p = out.join(format!("checkpoint-{}.dca", s.step));
                save_checkpoint(s, &p)?;
                written.push(p);
            }
        }
        if s.step % 100 == 0 || s.step == s.config.train.iter_max {
            if let Some(rec) = s.history.last() {
                println!("step {:>6}  L_T {:?}  L1 {:?}", s.step, rec.report.transform, rec.report.iaml_sketch);
            }
        }
        Ok(())
    })?;

    let ckpt = out.join("checkpoint.dca");
    save_checkpoint(&state, &ckpt)?;
    let mut log = String::from(LOSS_CSV_HEADER);
    log.push('\n');
    for rec in state.train_records() {
        log.push_str(&loss_csv_row(rec));
        log.push('\n');
    }
    let log_path = out.join("loss.csv");
    write_file(&log_path, log)?;
    let cfg_path = out.join("config.json");
    write_file(&cfg_path, cfg.to_json() + "\n")?;
    println!("wrote {} and {}", ckpt.display(), log_path.display());

    manifest.artifacts.extend(written);
    manifest.artifacts.extend([ckpt, log_path, cfg_path]);
    manifest.write(&out, Some(&cfg))
}

/// Loads a checkpoint and its dataset, verifying the checkpoint file is
/// not modified while in use.
fn score(
    checkpoint: &Path,
    data: Option<&Path>,
    query: Option<QueryArg>,
    manifest: &mut Manifest,
) -> CliResult<(RunConfig, dca_core::eval::RetrievalEval)> {
    let before = sha256_file(checkpoint)?;
    let state = load_checkpoint(checkpoint)?;
    let mut cfg = state.config.clone();
    if let Some(d) = data {
        cfg.data.features = Some(d.to_path_buf());
    }
    if let Some(f) = &cfg.data.features {
        manifest.input(f)?;
    }
    let dataset = cfg.dataset()?;
    let query = match query {
        Some(QueryArg::Encoder) => QueryEmbedding::Encoder,
        Some(QueryArg::Transformed) => QueryEmbedding::Transformed,
        None if cfg.train.encoders_only => QueryEmbedding::Encoder,
        None => QueryEmbedding::Transformed,
    };
    let result = evaluate_model(&state.model, &dataset, cfg.eval.gallery, query, cfg.eval.e_cutoff)?;
    if sha256_file(checkpoint)? != before {
        return Err(DcaError::Integrity(format!("{} changed during evaluation", checkpoint.display())));
    }
    manifest.inputs.insert(checkpoint.display().to_string(), Value::String(before));
    Ok((cfg, result))
}

fn evaluate(common: &Common, checkpoint: &Path, data: Option<&Path>, query: Option<QueryArg>) -> CliResult<()> {
    let mut manifest = Manifest::new("evaluate");
    let (cfg, result) = score(checkpoint, data, query, &mut manifest)?;
    prepare_out(&common.out)?;
    let path = common.out.join("metrics.csv");
    let csv = result.summary.to_csv();
    write_file(&path, &csv)?;
    print!("{csv}");
    println!("{} queries, {} skipped", result.summary.queries, result.summary.skipped);
    manifest.artifacts.push(path);
    manifest.write(&common.out, Some(&cfg))
}

fn export_pr(common: &Common, checkpoint: &Path, data: Option<&Path>, query: Option<QueryArg>) -> CliResult<()> {
    let mut manifest = Manifest::new("export-pr");
    let (cfg, result) = score(checkpoint, data, query, &mut manifest)?;
    prepare_out(&common.out)?;
    let curve = pr_curve(&result.rankings);
    let csv_path = common.out.join("pr.csv");
    write_file(&csv_path, pr_curve_csv(&curve))?;
    let svg_path = common.out.join("pr.svg");
    let title = format!("precision-recall, mAP {:.3}", result.summary.map);
    write_file(&svg_path, pr_curve_svg(&curve, &title))?;
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    manifest.artifacts.extend([csv_path, svg_path]);
    manifest.write(&common.out, Some(&cfg))
}

fn gradcheck(seed: u64, trials: usize) -> CliResult<()> {
    let cfg = GradcheckConfig {
        seed,
        trials,
        ..GradcheckConfig::default()
    };
    let results = run_gradcheck(&cfg)?;
    println!("{:<8} {:>7} {:>9} {:>14}  status", "loss", "trials", "rejected", "max rel err");
    for r in &results {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!(
            "{:<8} {:>7} {:>9} {:>14.3e}  {status}",
            r.loss, r.trials, r.rejected, r.max_rel_error
        );
    }
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(DcaError::Contract(format!(
            "gradient check failed for {} (max relative error {:.3e}, tolerance {:.0e})",
            r.loss, r.max_rel_error, cfg.tolerance
        ))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenerateData { common, binary } => generate_data(common, *binary),
        Command::Train {
            common,
            data,
            disable_cmd,
            disable_sep,
            encoders_only,
            checkpoint_every,
            resume,
        } => train(TrainArgs {
            common,
            data: data.as_deref(),
            disable_cmd: *disable_cmd,
            disable_sep: *disable_sep,
            encoders_only: *encoders_only,
            checkpoint_every: *checkpoint_every,
            resume: resume.as_deref(),
        }),
        Command::Evaluate {
            common,
            checkpoint,
            data,
            query,
        } => evaluate(common, checkpoint, data.as_deref(), *query),
        Command::ExportPr {
            common,
            checkpoint,
            data,
            query,
        } => export_pr(common, checkpoint, data.as_deref(), *query),
        Command::Gradcheck { seed, trials } => gradcheck(*seed, *trials),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
