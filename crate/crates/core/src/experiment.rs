//! Experiment orchestration: mine, checkpoint, finetune, apply sanity
//! variants and finetune those, then write a summary table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::checkpoint::MaskCheckpoint;
use crate::config::{ExperimentConfig, TaskConfig};
use crate::data::{gen_synthetic, load_idx, DatasetSplit, IdxOptions};
use crate::error::{Error, Result};
use crate::masked::{InitScheme, Mask};
use crate::miners::{
    edge_popup, gem_mine, imp, smart_ratio, Algorithm, EdgePopupConfig, ImpConfig, MinedSubnetwork,
    MinerConfig, SmartRatioConfig, SrVariant, TuneConfig,
};
use crate::network::evaluate_effective;
use crate::report::RunReport;
use crate::sanity::{invert_scores, layerwise_report, reinit_weights, shuffle_mask, SanityKind};
use crate::tensor::Tensor;
use crate::trainer::{accuracy_or_none, finetune, TrainConfig};

pub const SUMMARY_HEADER: &str = "algorithm,variant,seed,sparsity,pre_acc,post_acc";
pub const ORIGINAL: &str = "original";

pub fn load_task(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    match &cfg.task {
        TaskConfig::Synthetic { kind, n, noise } => gen_synthetic(*kind, *n, *noise, cfg.task_seed),
        TaskConfig::Idx {
            path,
            train_limit,
            val_fraction,
            num_classes,
        } => load_idx(
            path,
            &IdxOptions {
                train_limit: *train_limit,
                val_fraction: *val_fraction,
                num_classes: *num_classes,
                seed: cfg.task_seed,
            },
        ),
    }
}

fn miner_config(cfg: &ExperimentConfig, seed: u64) -> MinerConfig {
    MinerConfig {
        init: cfg.init_scheme(),
        seed,
        ..cfg.miner.clone()
    }
}

fn imp_config(cfg: &ExperimentConfig, seed: u64) -> ImpConfig {
    ImpConfig {
        rounds: cfg.imp.rounds_for(cfg.schedule.target),
        prune_rate: cfg.imp.prune_rate,
        rewind: cfg.imp.rewind,
        train: TrainConfig {
            epochs: cfg.imp.epochs_per_round,
            seed,
            ..cfg.finetune.clone()
        },
        init: cfg.init_scheme(),
    }
}

/// Runs the configured miner for one seed.
///
/// Smart-Ratio variants that need a reference profile and have none
/// configured derive it from a Gem-Miner (v2, v5) or IMP (v4, v6) run with
/// the same seed.
pub fn mine(cfg: &ExperimentConfig, data: &DatasetSplit, seed: u64) -> Result<MinedSubnetwork> {
    match cfg.algorithm {
        Algorithm::Gem => gem_mine(data, &cfg.spec, &cfg.schedule, &miner_config(cfg, seed)),
        Algorithm::EdgePopup => {
            let ep = EdgePopupConfig {
                keep: cfg.schedule.target,
                epochs: cfg.schedule.epochs,
                period: cfg.schedule.period,
                scope: cfg.ep_scope,
                schedule: cfg.ep_schedule,
            };
            edge_popup(data, &cfg.spec, &ep, &miner_config(cfg, seed))
        }
        Algorithm::Imp => imp(data, &cfg.spec, &imp_config(cfg, seed)),
        Algorithm::SmartRatio => {
            let mut notes = Vec::new();
            let reference = match (&cfg.sr.reference, cfg.sr.variant) {
                (Some(r), _) => Some(r.clone()),
                (None, SrVariant::V2 | SrVariant::V5) => {
                    notes.push("reference profile derived from a Gem-Miner run".to_string());
                    let mut gm = miner_config(cfg, seed);
                    gm.init = InitScheme::SignedConstant;
                    Some(gem_mine(data, &cfg.spec, &cfg.schedule, &gm)?.ratios)
                }
                (None, SrVariant::V4 | SrVariant::V6) => {
                    notes.push("reference profile derived from an IMP run".to_string());
                    Some(imp(data, &cfg.spec, &imp_config(cfg, seed))?.ratios)
                }
                (None, _) => None,
            };
            let sr = SmartRatioConfig {
                target: cfg.schedule.target,
                variant: cfg.sr.variant,
                last_layer_keep: cfg.sr.last_layer_keep,
                reference,
                tune: TuneConfig {
                    steps: cfg.sr.tune_steps,
                    lr: cfg.sr.tune_lr,
                    batch_size: cfg.miner.batch_size,
                    seed,
                },
                candidate_samples: cfg.sr.candidate_samples,
                init: cfg.init_scheme(),
                seed,
            };
            let mut mined = smart_ratio(&cfg.spec, &sr, Some(data))?;
            for n in notes {
                log::info!("{n}");
                mined.report.warnings.insert(0, n);
            }
            Ok(mined)
        }
    }
}

/// A mask/weights pair derived from a mined subnetwork by a sanity check.
#[derive(Debug, Clone, PartialEq)]
pub struct SanitySubnetwork {
    pub mask: Mask,
    pub weights: Vec<Tensor>,
    pub scores: Vec<Tensor>,
    pub warnings: Vec<String>,
}

/// Applies one sanity transformation to a mined mask, its weights and its
/// ranking scores. `init` must be the scheme the weights were drawn from.
pub fn apply_sanity(
    mask: &Mask,
    weights: &[Tensor],
    scores: &[Tensor],
    init: InitScheme,
    kind: SanityKind,
    seed: u64,
) -> Result<SanitySubnetwork> {
    mask.check_against(weights)?;
    let mut out = SanitySubnetwork {
        mask: mask.clone(),
        weights: weights.to_vec(),
        scores: scores.to_vec(),
        warnings: Vec::new(),
    };
    match kind {
        SanityKind::Shuffle => out.mask = shuffle_mask(mask, seed),
        SanityKind::Reinit => out.weights = reinit_weights(weights, init, seed)?,
        SanityKind::Invert => {
            let (inverted, warnings) = invert_scores(scores, mask)?;
            out.mask = inverted;
            out.warnings = warnings;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub variant: String,
    pub seed: u64,
    pub sparsity: f64,
    pub pre_acc: Option<f64>,
    pub post_acc: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

impl SummaryRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.algorithm,
            self.variant,
            self.seed,
            self.sparsity,
            fmt_opt(self.pre_acc),
            fmt_opt(self.post_acc)
        )
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_line());
    }
    out
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SUMMARY_HEADER => {}
        _ => {
            return Err(Error::Config {
                line: 1,
                message: format!("summary header must be `{SUMMARY_HEADER}`"),
            })
        }
    }
    let opt = |s: &str| -> Option<Option<f64>> {
        if s.is_empty() {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    };
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Config {
                line: i + 1,
                message: format!("malformed summary row `{l}`"),
            };
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(SummaryRow {
                algorithm: f[0].to_string(),
                variant: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad())?,
                sparsity: f[3].parse().map_err(|_| bad())?,
                pre_acc: opt(f[4]).ok_or_else(bad)?,
                post_acc: opt(f[5]).ok_or_else(bad)?,
            })
        })
        .collect()
}

/// Mean post-finetune accuracy of each sanity variant against the original.
#[derive(Debug, Clone, PartialEq)]
pub struct SanityVerdict {
    pub variant: String,
    pub original: f64,
    pub accuracy: f64,
    pub passed: bool,
}

/// A variant passes when the original's mean post-finetune accuracy exceeds
/// the variant's by at least `margin`.
pub fn sanity_verdicts(rows: &[SummaryRow], margin: f64) -> Vec<SanityVerdict> {
    let mean = |variant: &str| -> Option<f64> {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.post_acc)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let Some(original) = mean(ORIGINAL) else {
        return Vec::new();
    };
    let mut variants: Vec<&str> = rows
        .iter()
        .map(|r| r.variant.as_str())
        .filter(|v| *v != ORIGINAL)
        .collect();
    variants.dedup();
    variants.sort_unstable();
    variants.dedup();
    variants
        .into_iter()
        .filter_map(|v| {
            mean(v).map(|accuracy| SanityVerdict {
                variant: v.to_string(),
                original,
                accuracy,
                passed: original - accuracy >= margin,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub rows: Vec<SummaryRow>,
    /// `(seed, error message)` for seeds that did not complete.
    pub failures: Vec<(u64, String)>,
}

pub fn checkpoint_path(dir: &Path, seed: u64, variant: &str) -> PathBuf {
    dir.join("masks")
        .join(format!("seed-{seed}-{variant}.tfmc"))
}

fn report_stem(dir: &Path, seed: u64, variant: &str) -> PathBuf {
    dir.join("reports").join(format!("seed-{seed}-{variant}"))
}

fn with_ext(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_report(
    dir: &Path,
    seed: u64,
    variant: &str,
    report: &RunReport,
    mask: &Mask,
) -> Result<()> {
    let stem = report_stem(dir, seed, variant);
    report.save(&with_ext(&stem, ".json"), &with_ext(&stem, ".csv"))?;
    let layerwise = with_ext(&stem, "-layerwise.csv");
    fs::write(&layerwise, layerwise_report(mask).to_csv()).map_err(|e| Error::io(&layerwise, e))
}

fn pre_accuracy(weights: &[Tensor], mask: &Mask, data: &DatasetSplit) -> Result<Option<f64>> {
    let mut eff = weights.to_vec();
    mask.apply(&mut eff);
    Ok(accuracy_or_none(
        evaluate_effective(&eff, data.eval_split())?.1,
    ))
}

/// Runs every stage for one seed, writing its artifacts under `dir`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &DatasetSplit,
    seed: u64,
    dir: &Path,
) -> Result<Vec<SummaryRow>> {
    let algorithm = cfg.algorithm.name().to_string();
    let ft = TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let mined = mine(cfg, data, seed)?;
    MaskCheckpoint::from_mined(&mined)?.save(&checkpoint_path(dir, seed, ORIGINAL))?;
    let mut rows = Vec::with_capacity(1 + cfg.sanity.len());
    let (_, ft_report) = finetune(&mined.weights, &mined.mask, data, &ft)?;
    let mut report = mined.report.clone();
    report.extend(ft_report);
    write_report(dir, seed, ORIGINAL, &report, &mined.mask)?;
    rows.push(SummaryRow {
        algorithm: algorithm.clone(),
        variant: ORIGINAL.into(),
        seed,
        sparsity: mined.mask.sparsity(),
        pre_acc: mined.report.pre_finetune_accuracy,
        post_acc: report.post_finetune_accuracy,
    });
    for &kind in &cfg.sanity {
        let v = apply_sanity(
            &mined.mask,
            &mined.weights,
            &mined.scores,
            mined.init,
            kind,
            seed,
        )?;
        MaskCheckpoint::new(&v.mask, &v.scores, &v.weights)?.save(&checkpoint_path(
            dir,
            seed,
            kind.name(),
        ))?;
        let pre = pre_accuracy(&v.weights, &v.mask, data)?;
        let (_, mut r) = finetune(&v.weights, &v.mask, data, &ft)?;
        for w in v.warnings {
            r.warn(w);
        }
        r.pre_finetune_accuracy = pre;
        write_report(dir, seed, kind.name(), &r, &v.mask)?;
        rows.push(SummaryRow {
            algorithm: algorithm.clone(),
            variant: kind.name().into(),
            seed,
            sparsity: v.mask.sparsity(),
            pre_acc: pre,
            post_acc: r.post_finetune_accuracy,
        });
    }
    Ok(rows)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Full matrix for every configured seed under `out_root/<run-id>/`.
///
/// Seeds run on up to `available_parallelism` worker threads; a failing
/// seed is logged and recorded while the others continue.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<ExperimentOutcome> {
    let dir = out_root.join(cfg.run_id());
    create_dir(&dir.join("masks"))?;
    create_dir(&dir.join("reports"))?;
    let snapshot = dir.join("config.snapshot");
    fs::write(&snapshot, cfg.snapshot()).map_err(|e| Error::io(&snapshot, e))?;
    let data = load_task(cfg)?;

    let results: Mutex<Vec<Option<Result<Vec<SummaryRow>>>>> =
        Mutex::new((0..cfg.seeds.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(cfg.seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let r = run_seed(cfg, &data, seed, &dir);
                results
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in cfg
        .seeds
        .iter()
        .zip(results.into_inner().expect("workers joined"))
    {
        match r.expect("every seed was claimed") {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push((*seed, e.to_string()));
            }
        }
    }
    let summary = dir.join("summary.csv");
    fs::write(&summary, summary_csv(&rows)).map_err(|e| Error::io(&summary, e))?;
    let failure_log = dir.join("failures.txt");
    if failures.is_empty() {
        let _ = fs::remove_file(&failure_log);
    } else {
        let text: String = failures
            .iter()
            .map(|(s, e)| format!("seed {s}: {e}\n"))
            .collect();
        fs::write(&failure_log, text).map_err(|e| Error::io(&failure_log, e))?;
    }
    Ok(ExperimentOutcome {
        dir,
        rows,
        failures,
    })
}
