//! `cellmorph` command-line interface.
//!
//! Every flag is an override of a field of the experiment config. Precedence,
//! lowest first: built-in defaults, `--config` file, `CELLMORPH__*`
//! environment variables, `--set key=value`, dedicated flags.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cellmorph::data::{dataset_stats, generate_synthetic, LabelColorMap, SynthSpec};
use cellmorph::experiment::{
    self, env_overrides, load_dataset, load_or_make_folds, parse_override, string_override, ExperimentConfig,
};
use cellmorph::nn::gradcheck;
use cellmorph::split::fold_split;
use cellmorph::ErrorKind;

#[derive(Parser, Debug)]
#[command(
    name = "cellmorph",
    version,
    about = "Cervical cell classification from appearance and morphology"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; sub-seeds follow it unless set explicitly.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset manifest CSV.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Fold plan JSON; created when missing.
    #[arg(long, global = true)]
    fold_plan: Option<PathBuf>,
    /// Input channels, 3 or 5.
    #[arg(long, global = true)]
    channels: Option<usize>,
    /// `2class` or `7class`.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Worker threads (0 = all cores, 1 = deterministic single thread).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Treat each cell as its own patient. Cross-validation is then cell-level.
    #[arg(long, global = true)]
    cell_as_patient: bool,
    /// Override any config field, e.g. `--set train.base_lr=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and decode every cell; optionally export the augmented set.
    Ingest {
        /// Write all augmented samples of the dataset to this directory.
        #[arg(long, value_name = "DIR")]
        materialize: Option<PathBuf>,
    },
    /// Print per-class and per-category counts.
    Stats,
    /// Build the patient-level fold plan.
    Split,
    /// Train and evaluate one fold.
    Train {
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Evaluate a checkpoint on one fold's validation cells.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Full k-fold cross-validation with aggregated report.
    Crossval,
    /// Compare analytic and finite-difference gradients for every layer kind.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f32,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
        tolerance: f64,
    },
    /// Generate a synthetic morphology-dominant dataset.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n_cells: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
}

fn overrides(g: &Global) -> Result<Vec<(String, String)>> {
    let mut out = env_overrides(std::env::vars());
    for s in &g.set {
        out.push(parse_override(s)?);
    }
    if let Some(seed) = g.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(p) = &g.out {
        out.push(string_override("output", &p.to_string_lossy()));
    }
    if let Some(p) = &g.manifest {
        out.push(string_override("manifest", &p.to_string_lossy()));
    }
    if let Some(p) = &g.fold_plan {
        out.push(string_override("fold_plan", &p.to_string_lossy()));
    }
    if let Some(c) = g.channels {
        out.push(("channels".into(), c.to_string()));
    }
    if let Some(t) = &g.task {
        out.push(string_override("task", t));
    }
    if let Some(t) = g.threads {
        out.push(("threads".into(), t.to_string()));
    }
    if g.cell_as_patient {
        out.push(("cell_as_patient".into(), "true".into()));
    }
    Ok(out)
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(g.config.as_deref(), &overrides(g)?)?;
    if cfg.cell_as_patient {
        log::warn!("cell_as_patient is set: folds are cell-level and may leak patient identity");
        eprintln!("warning: cell_as_patient is set; cross-validation is cell-level, not patient-level");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth { n_cells, size, classes } => {
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
            let mut spec = SynthSpec {
                n_cells,
                image_size: size,
                n_classes: classes,
                seed: g.seed.unwrap_or(SynthSpec::default().seed),
                ..Default::default()
            };
            if classes != 2 {
                let (lo, hi) = spec.ratio_range;
                spec.thresholds = (1..classes)
                    .map(|i| lo + (hi - lo) * i as f64 / classes as f64)
                    .collect();
            }
            let (manifest, _) = generate_synthetic(&spec, &LabelColorMap::default(), &out)?;
            println!(
                "wrote {} cells to {}",
                manifest.len(),
                out.join("manifest.csv").display()
            );
        }
        Command::Gradcheck {
            configs,
            eps,
            tolerance,
        } => {
            let report = gradcheck::run(configs, g.seed.unwrap_or(0), eps, tolerance)?;
            println!(
                "{:<16} {:>8} {:>10} {:>12} {:>12}  result",
                "kind", "configs", "entries", "max_rel_err", "max_abs_err"
            );
            for k in &report.kinds {
                println!(
                    "{:<16} {:>8} {:>10} {:>12.3e} {:>12.3e}  {}",
                    k.kind,
                    k.configs,
                    k.checked_entries,
                    k.max_rel_err,
                    k.max_abs_err,
                    if k.passed { "ok" } else { "FAIL" }
                );
            }
            if !report.passed() {
                return Err(cellmorph::Error::Numeric(format!("gradient check exceeded tolerance {tolerance}")).into());
            }
        }
        Command::Stats => {
            let cfg = load_config(g)?;
            let manifest = cellmorph::data::load_manifest_with(&cfg.manifest, cfg.manifest_options())?;
            print!("{}", dataset_stats(&manifest));
        }
        Command::Ingest { materialize } => {
            let cfg = load_config(g)?;
            let ds = load_dataset(&cfg)?;
            println!("decoded {} cells from {}", ds.records.len(), cfg.manifest.display());
            if let Some(dir) = materialize {
                let n = experiment::materialize_dataset(&cfg, &ds, &dir)?;
                println!("materialized {n} samples to {}", dir.display());
            }
        }
        Command::Split => {
            let cfg = load_config(g)?;
            let manifest = cellmorph::data::load_manifest_with(&cfg.manifest, cfg.manifest_options())?;
            let plan = load_or_make_folds(&cfg, &manifest)?;
            let path = cfg.fold_plan.clone().unwrap_or_else(|| cfg.output.join("folds.json"));
            write_plan(&plan, &path)?;
            for f in 0..plan.k {
                let (_, val) = fold_split(&plan, &manifest, f)?;
                println!("fold {f}: {} cells", val.len());
            }
            println!("fold plan written to {}", path.display());
        }
        Command::Train { fold } => {
            let cfg = load_config(g)?;
            if fold >= cfg.k {
                return Err(cellmorph::Error::FoldOutOfRange { index: fold, k: cfg.k }.into());
            }
            let run = experiment::run_train(&cfg, fold)?;
            let last = run.history.last().context("empty training history")?;
            println!(
                "fold {fold}: best epoch {} of {}, train acc {:.4}, validation acc {:.4}",
                run.best_epoch,
                last.epoch + 1,
                last.train_acc,
                run.eval.accuracy
            );
            println!("artifacts in {}", cfg.output.join(format!("fold_{fold}")).display());
        }
        Command::Eval { checkpoint, fold } => {
            let cfg = load_config(g)?;
            let out = cfg.output.join(format!("eval_fold_{fold}"));
            let report = experiment::run_eval(&cfg, &checkpoint, fold, &out)?;
            print!("{report}");
            println!("report written to {}", out.display());
        }
        Command::Crossval => {
            let cfg = load_config(g)?;
            let res = experiment::run_crossval(&cfg)?;
            print!("{}", res.report);
            println!("report written to {}", cfg.output.display());
        }
    }
    Ok(())
}

fn write_plan(plan: &cellmorph::split::FoldPlan, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    plan.save(path)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cellmorph::Error>().map(cellmorph::Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numeric) => 4,
        Some(ErrorKind::Data) | None => 3,
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out = format!("{out}: {c}");
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
