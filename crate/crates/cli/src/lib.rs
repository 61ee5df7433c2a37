//! `lcs`: train compressible subspaces and fixed-target baselines, sweep
//! them across compression levels, and analyze BatchNorm drift.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lcs_core::checkpoint::{Checkpoint, MAGIC};
use lcs_core::compression::{compression_cost, Level};
use lcs_core::config::{BaselineChoice, RunConfig};
use lcs_core::eval::{alpha_grid, analyze_bn_drift, default_grid, DriftReport, DriftStat, Evaluator};
use lcs_core::run::{init_run, sample_shape, train_run, TrainedRun};

#[derive(Debug, Parser)]
#[command(name = "lcs", version, about = "Compressible subspace training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides `run.seed` (all randomness derives from it).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides a config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a subspace described by a config file.
    Train(TrainArgs),
    /// Train a fixed-target baseline (a single network).
    Baseline(BaselineArgs),
    /// Evaluate a checkpoint across compression levels.
    Sweep(SweepArgs),
    /// Evaluate with each end of the line paired with the other end's level.
    ReversedSweep(SweepArgs),
    /// Measure BatchNorm statistic drift of BN checkpoints under TopK.
    Drift(DriftArgs),
    /// Report compute and storage costs across compression levels.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    config: PathBuf,
    /// Output directory (defaults to `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    config: PathBuf,
    /// fixed_topk, fixed_bits, ns, us or dense.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    bits: Option<u32>,
    /// Comma-separated widths for `ns`.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    width_min: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    checkpoint: PathBuf,
    /// Grid size (quantization always uses the trained bit widths).
    #[arg(long)]
    points: Option<usize>,
    /// Lowest α of the grid.
    #[arg(long)]
    alpha_min: Option<f64>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DriftArgs {
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Comma-separated evaluation sparsities.
    #[arg(long, default_value = "0,0.25,0.5,0.75,0.9,0.95")]
    sparsities: String,
    /// Measure drift of the running variance instead of the mean.
    #[arg(long)]
    variance: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// A checkpoint or a config file.
    input: PathBuf,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        sets: &cli.sets,
    };
    match cli.command {
        Command::Train(a) => train(&a, &overrides),
        Command::Baseline(a) => baseline(&a, &overrides),
        Command::Sweep(a) => sweep(&a, &overrides, false),
        Command::ReversedSweep(a) => sweep(&a, &overrides, true),
        Command::Drift(a) => drift(&a, &overrides),
        Command::Cost(a) => cost(&a, &overrides),
    }
}

struct Overrides<'a> {
    seed: Option<u64>,
    sets: &'a [String],
}

impl Overrides<'_> {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        for s in self.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("--set {s}"))?;
        }
        if let Some(seed) = self.seed {
            cfg.set("run.seed", &seed.to_string())?;
        }
        Ok(())
    }
}

fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path).with_context(|| format!("loading config {}", path.display()))?;
    o.apply(&mut cfg)?;
    Ok(cfg)
}

fn load_run(path: &Path, o: &Overrides) -> Result<TrainedRun> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut run = TrainedRun::from_checkpoint(&ckpt).with_context(|| format!("restoring {}", path.display()))?;
    o.apply(&mut run.config)?;
    Ok(run)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn train_and_save(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let splits = cfg.load_data()?;
    eprintln!(
        "training {} on {} samples ({} test), {} epochs",
        cfg.name,
        splits.train.len(),
        splits.test.len(),
        cfg.train.epochs
    );
    let every = cfg.checkpoint_every;
    let (run, history) = train_run(cfg, &splits, |r| {
        if every > 0 && r.epochs_done % every == 0 && r.epochs_done < cfg.train.epochs {
            let p = dir.join(format!("{}.epoch{}.lcss", cfg.name, r.epochs_done));
            r.to_checkpoint().save(&p)?;
        }
        Ok(())
    })?;
    let log = dir.join(format!("{}.log.csv", cfg.name));
    fs::write(&log, history.to_csv()).with_context(|| format!("writing {}", log.display()))?;
    let ckpt = dir.join(format!("{}.lcss", cfg.name));
    run.to_checkpoint().save(&ckpt)?;
    if let Some(loss) = history.final_epoch_loss() {
        eprintln!("final epoch mean loss {loss:.4}");
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn train(a: &TrainArgs, o: &Overrides) -> Result<()> {
    let cfg = load_config(&a.config, o)?;
    if cfg.is_baseline() {
        bail!("config sets baseline.kind; use `lcs baseline` for fixed-target baselines");
    }
    train_and_save(&cfg, a.out.as_deref())
}

fn baseline(a: &BaselineArgs, o: &Overrides) -> Result<()> {
    let mut cfg = load_config(&a.config, o)?;
    cfg.set("baseline.kind", &a.kind)?;
    if cfg.baseline == BaselineChoice::None {
        bail!("--kind must name a baseline");
    }
    cfg.set("subspace.kind", "point")?;
    if let Some(s) = a.sparsity {
        cfg.baseline_sparsity = s;
    }
    if let Some(b) = a.bits {
        cfg.baseline_bits = b;
    }
    if let Some(w) = &a.widths {
        cfg.set("baseline.widths", w)?;
    }
    if let Some(w) = a.width_min {
        cfg.baseline_width_min = w;
    }
    train_and_save(&cfg, a.out.as_deref())
}

fn sweep(a: &SweepArgs, o: &Overrides, reversed: bool) -> Result<()> {
    let run = load_run(&a.checkpoint, o)?;
    let cfg = &run.config;
    let spec = run.eval_spec()?;
    let splits = cfg.load_data()?;
    let points = a.points.unwrap_or(cfg.grid_points);
    let alpha_min = a.alpha_min.unwrap_or_else(|| cfg.grid_alpha_min());
    let grid = match spec.kind {
        lcs_core::compression::CompressionKind::Quantization => default_grid(spec.kind, alpha_min),
        _ => alpha_grid(alpha_min, 1.0, points),
    };
    let ev = Evaluator {
        model: &run.model,
        subspace: &run.subspace,
        spec: &spec,
        data: &splits.test,
        batch_size: cfg.eval_batch_size,
        quantize_activations: cfg.quantize_activations,
    };
    let result = if reversed { ev.reversed_sweep(&grid)? } else { ev.sweep(&grid)? };
    eprintln!("mean accuracy {:.4} over {} points", result.mean_accuracy(), result.rows.len());
    emit(a.out.as_deref(), &result.to_csv())
}

fn drift(a: &DriftArgs, o: &Overrides) -> Result<()> {
    let levels: Vec<Level> = a
        .sparsities
        .split(',')
        .map(|s| {
            let v: f64 = s.trim().parse().with_context(|| format!("bad sparsity `{s}`"))?;
            if !(0.0..1.0).contains(&v) {
                bail!("sparsity {v} outside [0, 1)");
            }
            Ok(Level::Sparsity(v))
        })
        .collect::<Result<_>>()?;
    let stat = if a.variance { DriftStat::Variance } else { DriftStat::Mean };
    let mut combined = DriftReport {
        settings: Vec::new(),
        pearson_r: None,
    };
    for path in &a.checkpoints {
        let run = load_run(path, o)?;
        let cfg = &run.config;
        let splits = cfg.load_data()?;
        let weights = run.subspace.materialize(1.0)?;
        let mut report = analyze_bn_drift(
            &run.model,
            &weights,
            &splits.test,
            cfg.eval_batch_size,
            &levels,
            cfg.quantize_first_last,
            stat,
        )
        .with_context(|| format!("analyzing {}", path.display()))?;
        match report.pearson_r {
            Some(r) => eprintln!("{}: pearson r(drift, error) = {r:.4}", cfg.name),
            None => eprintln!("{}: pearson r undefined (constant drift or error)", cfg.name),
        }
        for s in &mut report.settings {
            s.label = format!("{}:{}", cfg.name, s.label);
        }
        combined.settings.extend(report.settings);
    }
    emit(a.out.as_deref(), &combined.to_csv())
}

fn cost(a: &CostArgs, o: &Overrides) -> Result<()> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let run = if bytes.starts_with(MAGIC) {
        load_run(&a.input, o)?
    } else {
        let cfg = load_config(&a.input, o)?;
        init_run(&cfg, &sample_shape(&cfg)?)?
    };
    let spec = run.eval_spec()?;
    let cfg = &run.config;
    let grid = match spec.kind {
        lcs_core::compression::CompressionKind::Quantization => default_grid(spec.kind, 0.0),
        _ => alpha_grid(cfg.grid_alpha_min(), 1.0, a.points.unwrap_or(cfg.grid_points)),
    };
    let mut csv = String::from("alpha,gamma,dense_flops,compressed_flops,forward_flops,overhead_flops,overhead_ratio,nonzero,bits\n");
    for alpha in grid {
        let level = spec.level(alpha)?;
        let c = compression_cost(&run.model, run.kind(), level, spec.quantize_first_last)?;
        csv.push_str(&format!(
            "{alpha},{},{},{},{},{},{},{},{}\n",
            level.value(),
            c.dense_flops,
            c.compressed_flops,
            c.forward_flops,
            c.overhead_flops,
            c.overhead_ratio(),
            c.nonzero_params,
            c.storage_bits
        ));
    }
    emit(a.out.as_deref(), &csv)
}
