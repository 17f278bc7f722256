//! `gems`: mine sparse subnetworks, finetune them, and run sanity checks.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rare_gems::experiment::{
    apply_sanity, checkpoint_path, load_task, mine, parse_summary, run_experiment, sanity_verdicts,
    write_report, ORIGINAL,
};
use rare_gems::{
    finetune, layerwise_report, ExperimentConfig, MaskCheckpoint, SanityKind, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "gems",
    version,
    about = "Mine and evaluate sparse subnetworks at initialization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat key = value).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Root for run directories.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Mine a subnetwork and save its checkpoint and mining report.
    Mine(Common),
    /// Finetune the subnetwork stored in a checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Derive a sanity-check variant of a checkpoint.
    Sanity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// shuffle, reinit or invert
        #[arg(long)]
        variant: String,
    },
    /// Print the layerwise table of a checkpoint or the sanity verdicts of a
    /// run summary.
    Report {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Config whose `sanity.margin` applies to summary verdicts.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Full matrix: mine, finetune, every sanity variant, summary.
    Run(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn run_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = common.out_dir.join(cfg.run_id());
    for sub in ["masks", "reports"] {
        std::fs::create_dir_all(dir.join(sub))
            .with_context(|| format!("creating {}", dir.join(sub).display()))?;
    }
    std::fs::write(dir.join("config.snapshot"), cfg.snapshot())?;
    Ok(dir)
}

fn seed_of(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".into(), |v| format!("{:.2}%", 100.0 * v))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_mine(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let dir = run_dir(common, &cfg)?;
    let data = load_task(&cfg)?;
    let seed = seed_of(&cfg);
    let mined = mine(&cfg, &data, seed)?;
    let ckpt = checkpoint_path(&dir, seed, ORIGINAL);
    MaskCheckpoint::from_mined(&mined)?.save(&ckpt)?;
    write_report(&dir, seed, "mine", &mined.report, &mined.mask)?;
    println!(
        "{} seed {seed}: sparsity {:.6}, pre-finetune accuracy {}",
        cfg.algorithm.name(),
        mined.mask.sparsity(),
        fmt_acc(mined.report.pre_finetune_accuracy)
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_finetune(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load(common)?;
    let dir = run_dir(common, &cfg)?;
    let data = load_task(&cfg)?;
    let seed = seed_of(&cfg);
    let ckpt = MaskCheckpoint::load(checkpoint)?;
    let mask = ckpt.mask();
    let ft = TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let (_, report) = finetune(&ckpt.weights(), &mask, &data, &ft)?;
    let name = format!("finetune-{}", stem(checkpoint));
    write_report(&dir, seed, &name, &report, &mask)?;
    println!(
        "sparsity {:.6}: accuracy {} before, {} after finetuning",
        mask.sparsity(),
        fmt_acc(report.pre_finetune_accuracy),
        fmt_acc(report.post_finetune_accuracy)
    );
    Ok(())
}

fn cmd_sanity(common: &Common, checkpoint: &Path, variant: &str) -> Result<()> {
    let Some(kind) = SanityKind::parse(variant) else {
        bail!("unknown sanity variant `{variant}` (expected shuffle, reinit or invert)");
    };
    let cfg = load(common)?;
    let dir = run_dir(common, &cfg)?;
    let seed = seed_of(&cfg);
    let ckpt = MaskCheckpoint::load(checkpoint)?;
    let v = apply_sanity(
        &ckpt.mask(),
        &ckpt.weights(),
        &ckpt.scores(),
        cfg.init_scheme(),
        kind,
        seed,
    )?;
    for w in &v.warnings {
        log::warn!("{w}");
    }
    let out = checkpoint_path(&dir, seed, kind.name());
    MaskCheckpoint::new(&v.mask, &v.scores, &v.weights)?.save(&out)?;
    print!("{}", layerwise_report(&v.mask).to_csv());
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn cmd_report(
    checkpoint: Option<&Path>,
    summary: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    if checkpoint.is_none() && summary.is_none() {
        bail!("pass --checkpoint and/or --summary");
    }
    if let Some(path) = checkpoint {
        let table = layerwise_report(&MaskCheckpoint::load(path)?.mask());
        print!("{}", table.to_csv());
        for l in &table.collapsed {
            println!("# layer {l} collapsed");
        }
    }
    if let Some(path) = summary {
        let margin = match config {
            Some(c) => ExperimentConfig::load(c)?.sanity_margin,
            None => 0.02,
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_summary(&text)?;
        for v in sanity_verdicts(&rows, margin) {
            println!(
                "{:<8} {:>7.2}% vs original {:>7.2}%: {}",
                v.variant,
                100.0 * v.accuracy,
                100.0 * v.original,
                if v.passed { "pass" } else { "FAIL" }
            );
        }
    }
    Ok(())
}

fn cmd_run(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let outcome = run_experiment(&cfg, &common.out_dir)?;
    for r in &outcome.rows {
        println!(
            "{:<12} {:<8} seed {:<4} sparsity {:.6}  pre {:>8}  post {:>8}",
            r.algorithm,
            r.variant,
            r.seed,
            r.sparsity,
            fmt_acc(r.pre_acc),
            fmt_acc(r.post_acc)
        );
    }
    for v in sanity_verdicts(&outcome.rows, cfg.sanity_margin) {
        println!(
            "sanity {}: {}",
            v.variant,
            if v.passed { "pass" } else { "FAIL" }
        );
    }
    println!("results: {}", outcome.dir.join("summary.csv").display());
    if !outcome.failures.is_empty() {
        bail!(
            "{} seed(s) failed; see failures.txt",
            outcome.failures.len()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Mine(c) => cmd_mine(&c),
        Command::Finetune { common, checkpoint } => cmd_finetune(&common, &checkpoint),
        Command::Sanity {
            common,
            checkpoint,
            variant,
        } => cmd_sanity(&common, &checkpoint, &variant),
        Command::Report {
            checkpoint,
            summary,
            config,
        } => cmd_report(checkpoint.as_deref(), summary.as_deref(), config.as_deref()),
        Command::Run(c) => cmd_run(&c),
    }
}
