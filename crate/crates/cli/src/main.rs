mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ccvae::checkpoint::{write_atomic, Checkpoint};
use ccvae::config::TrainConfig;
use ccvae::trainer::{self, EpochMetrics, Evaluation, Source, SUMMARY_HEADER};
use ccvae::{figures, ErrorKind};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use manifest::{dataset_fingerprint, Manifest};

#[derive(Parser, Debug)]
#[command(name = "ccvae", version = manifest::BUILD_ID, about = "Class-conditional-prior VAE: train, evaluate, sample")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed (figure verbs: the sampling seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides run.out_dir
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides train.alpha
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Overrides any config field, e.g. `--set train.epochs=5`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics, checkpoints and a manifest
    Train,
    /// Score a checkpoint on the configured validation and test sets
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decoded means of samples from each class prior, as a PGM grid
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 25)]
        per_class: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decoded means along lines between consecutive class prior means
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Class-prior mixture density of a 2-dimensional latent space, as CSV
    LatentMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        /// Half-width of the grid in prior standard deviations
        #[arg(long, default_value_t = 5.0)]
        width: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Repeated runs over the configured label fractions and heads
    Replicate {
        #[arg(long)]
        n_runs: Option<usize>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<ccvae::Error>())
        .map(ccvae::Error::kind);
    match kind {
        Some(ErrorKind::Data) => 2,
        Some(ErrorKind::Numerical) => 3,
        Some(ErrorKind::Internal) => 4,
        Some(ErrorKind::Config) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mut manifest = Manifest::new(verb_name(&cli.command));
    let result = run(&cli, &mut manifest);
    match &result {
        Ok(()) => manifest.set("status", "ok"),
        Err(e) => {
            manifest.set("status", "failed");
            manifest.set("error", format!("{e:#}"));
        }
    }
    let written = manifest.finish();
    let result = result.and(written.map(|p| {
        if let Some(p) = p {
            eprintln!("manifest: {}", p.display());
        }
    }));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn verb_name(c: &Command) -> &'static str {
    match c {
        Command::Train => "train",
        Command::Eval { .. } => "eval",
        Command::Sample { .. } => "sample",
        Command::Interpolate { .. } => "interpolate",
        Command::LatentMap { .. } => "latent-map",
        Command::Replicate { .. } => "replicate",
    }
}

fn run(cli: &Cli, manifest: &mut Manifest) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train => cmd_train(g, manifest),
        Command::Eval { checkpoint } => cmd_eval(g, checkpoint, manifest),
        Command::Sample {
            checkpoint,
            per_class,
            output,
        } => {
            let m = load_checkpoint(checkpoint, output, manifest)?;
            let seed = g.seed.unwrap_or(0);
            manifest.set("seed", seed);
            manifest.set("per_class", per_class);
            let img = figures::sample_grid(&m.model, *per_class, &mut ChaCha8Rng::seed_from_u64(seed))?;
            write_output(output, &img.to_pgm(), manifest)
        }
        Command::Interpolate {
            checkpoint,
            steps,
            output,
        } => {
            let m = load_checkpoint(checkpoint, output, manifest)?;
            manifest.set("steps", steps);
            let img = figures::interpolation_grid(&m.model, *steps)?;
            write_output(output, &img.to_pgm(), manifest)
        }
        Command::LatentMap {
            checkpoint,
            resolution,
            width,
            output,
        } => {
            let m = load_checkpoint(checkpoint, output, manifest)?;
            manifest.set("resolution", resolution);
            manifest.set("width", width);
            let map = figures::latent_map(&m.model, *resolution, *width)?;
            write_output(output, map.to_csv().as_bytes(), manifest)?;
            let priors = output.with_extension("priors.csv");
            write_atomic(&priors, map.priors_csv().as_bytes())?;
            manifest.set("output.priors", priors.display());
            manifest.set("mixture_mass", map.mass());
            Ok(())
        }
        Command::Replicate { n_runs } => cmd_replicate(g, *n_runs, manifest),
    }
}

fn load_config(g: &Global) -> Result<TrainConfig> {
    let Some(path) = &g.config else {
        return Err(ccvae::Error::Config("--config is required for this verb".into()).into());
    };
    let mut overrides = g.set.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("run.seed={s}"));
    }
    if let Some(a) = g.alpha {
        overrides.push(format!("train.alpha={a:?}"));
    }
    if let Some(d) = &g.out_dir {
        overrides.push(format!("run.out_dir={:?}", d.display().to_string()));
    }
    Ok(TrainConfig::load(path, &overrides)?)
}

fn out_dir(cfg: &TrainConfig, default: &str) -> PathBuf {
    cfg.run.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

/// Shared start of every data-driven verb: config, output directory and
/// the manifest fields that identify the run.
fn start(g: &Global, default_dir: &str, manifest: &mut Manifest) -> Result<(TrainConfig, PathBuf, Source)> {
    let cfg = load_config(g)?;
    let dir = out_dir(&cfg, default_dir);
    fs::create_dir_all(&dir).map_err(|e| ccvae::Error::io(&dir, e))?;
    manifest.target(dir.join("manifest.txt"));
    manifest.set("seed", cfg.run.seed);
    manifest.set("out_dir", dir.display());
    manifest.config(&cfg)?;
    manifest.set("dataset_sha256", dataset_fingerprint(&cfg)?);
    let src = Source::load(&cfg)?;
    for w in &src.warnings {
        eprintln!("warning: {w}");
    }
    Ok((cfg, dir, src))
}

fn print_progress(m: &EpochMetrics) {
    let err = |e: Option<Evaluation>| e.map_or("-".to_string(), |e| format!("{:.4}", e.error));
    eprintln!(
        "epoch {:>4}  -S {:>12.4}  train {}  val {}  test {}",
        m.epoch,
        m.neg_total,
        err(m.train),
        err(m.validation),
        err(m.test)
    );
}

fn record_eval(manifest: &mut Manifest, prefix: &str, e: Option<Evaluation>) {
    if let Some(e) = e {
        manifest.set(&format!("{prefix}_error"), e.error);
        manifest.set(&format!("{prefix}_mae"), e.mae);
        manifest.set(&format!("{prefix}_n"), e.n);
    }
}

fn cmd_train(g: &Global, manifest: &mut Manifest) -> Result<()> {
    let (cfg, dir, src) = start(g, "train", manifest)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| ccvae::Error::io(dir.join("config.toml"), e))?;
    let prep = trainer::prepare(&cfg, &src, 0)?;
    for name in ["metrics.csv", "timing.csv", "best.ckpt", "last.ckpt", "config.toml"] {
        manifest.set(&format!("output.{}", name.replace('.', "_")), dir.join(name).display());
    }
    let out = trainer::train(&cfg, &prep, Some(&dir), &mut print_progress)?;
    manifest.set("steps", out.steps);
    manifest.set("epochs_run", out.history.last().map_or(0, |m| m.epoch));
    if let Some(b) = out.best_epoch {
        manifest.set("best_epoch", b);
    }
    record_eval(manifest, "final_validation", out.final_validation);
    record_eval(manifest, "final_test", out.final_test);
    if let Some(t) = out.final_test {
        println!("test error {:.4}  mae {:.4}  (n = {})", t.error, t.mae, t.n);
    }
    Ok(())
}

fn cmd_eval(g: &Global, checkpoint: &Path, manifest: &mut Manifest) -> Result<()> {
    let (cfg, dir, src) = start(g, "eval", manifest)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    manifest.set("checkpoint", checkpoint.display());
    let prep = trainer::prepare(&cfg, &src, 0)?;
    if prep.data_dim != ckpt.model.arch.data_dim {
        bail!(ccvae::Error::Architecture(format!(
            "checkpoint expects {} features, data has {}",
            ckpt.model.arch.data_dim, prep.data_dim
        )));
    }
    let mut csv = String::from("split,error,mae,n\n");
    for (name, d) in [("validation", &prep.validation), ("test", &prep.test)] {
        if let Some(d) = d {
            let e = trainer::evaluate(&ckpt.model, d)?;
            csv.push_str(&format!("{name},{},{},{}\n", e.error, e.mae, e.n));
            record_eval(manifest, name, Some(e));
        }
    }
    print!("{csv}");
    let path = dir.join("eval.csv");
    write_atomic(&path, csv.as_bytes())?;
    manifest.set("output.eval_csv", path.display());
    Ok(())
}

fn cmd_replicate(g: &Global, n_runs: Option<usize>, manifest: &mut Manifest) -> Result<()> {
    let (mut cfg, dir, src) = start(g, "replicate", manifest)?;
    if let Some(n) = n_runs {
        cfg.replicate.n_runs = n;
        cfg.validate()?;
        manifest.set("config.replicate.n_runs", n);
    }
    let rows = trainer::run_grid(&cfg, &src, Some(&dir), &mut |row| {
        eprintln!(
            "{} fraction {}: mean error {:.4} ± {:.4}",
            row.head.name(),
            row.fraction.map_or("-".into(), |f| f.to_string()),
            row.summary.mean_error,
            row.summary.std_error
        );
    })?;
    let mut csv = format!("{SUMMARY_HEADER}\n");
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
        let key = match row.fraction {
            Some(f) => format!("summary.{}.{f}", row.head.name()),
            None => format!("summary.{}", row.head.name()),
        };
        manifest.set(&format!("{key}.mean_error"), row.summary.mean_error);
        manifest.set(&format!("{key}.std_error"), row.summary.std_error);
    }
    print!("{csv}");
    let path = dir.join("summary.csv");
    write_atomic(&path, csv.as_bytes())?;
    manifest.set("output.summary_csv", path.display());
    Ok(())
}

fn load_checkpoint(path: &Path, output: &Path, manifest: &mut Manifest) -> Result<Checkpoint> {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    manifest.target(output.with_file_name(name));
    manifest.set("checkpoint", path.display());
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    for (k, v) in &ckpt.meta {
        manifest.set(&format!("checkpoint.{k}"), v);
    }
    Ok(ckpt)
}

fn write_output(path: &Path, bytes: &[u8], manifest: &mut Manifest) -> Result<()> {
    write_atomic(path, bytes)?;
    manifest.set("output", path.display());
    eprintln!("wrote {}", path.display());
    Ok(())
}
