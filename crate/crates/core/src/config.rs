//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are dotted
//! (`miner.lambda = 1e-4`); list values are comma separated. Unknown or
//! repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::masked::{InitScheme, NetworkSpec};
use crate::miners::{
    Algorithm, EpSchedule, EpScope, LayerRatios, MinerConfig, Rewind, SparsitySchedule, SrVariant,
};
use crate::network::Regularizer;
use crate::optim::OptimizerKind;
use crate::sanity::SanityKind;
use crate::trainer::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum TaskConfig {
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        noise: f64,
    },
    Idx {
        path: PathBuf,
        train_limit: Option<usize>,
        val_fraction: f64,
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpSettings {
    /// `None` derives the round count from the target sparsity.
    pub rounds: Option<usize>,
    pub prune_rate: f64,
    pub rewind: Rewind,
    pub epochs_per_round: usize,
}

impl ImpSettings {
    /// Rounds needed for `(1−ρ)^n` to reach `target`, at least one.
    pub fn rounds_for(&self, target: f64) -> usize {
        self.rounds.unwrap_or_else(|| {
            ((target.ln() / (1.0 - self.prune_rate).ln()).round() as usize).max(1)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrSettings {
    pub variant: SrVariant,
    pub tune_steps: usize,
    pub tune_lr: f64,
    pub reference: Option<LayerRatios>,
    pub last_layer_keep: f64,
    pub candidate_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    /// Seed of the dataset split / synthetic draw, shared by all run seeds.
    pub task_seed: u64,
    pub spec: NetworkSpec,
    pub algorithm: Algorithm,
    /// Defaults to signed-constant for score-based miners and scaled-normal
    /// for IMP and Smart-Ratio.
    pub init: InitScheme,
    pub miner: MinerConfig,
    pub schedule: SparsitySchedule,
    pub ep_scope: EpScope,
    pub ep_schedule: EpSchedule,
    pub imp: ImpSettings,
    pub sr: SrSettings,
    pub finetune: TrainConfig,
    pub sanity: Vec<SanityKind>,
    /// Required post-finetune lead over every sanity variant.
    pub sanity_margin: f64,
    pub seeds: Vec<u64>,
    pub run_id: Option<String>,
}

const KEYS: &[&str] = &[
    "task.kind",
    "task.n",
    "task.noise",
    "task.seed",
    "task.path",
    "task.train_limit",
    "task.val_fraction",
    "task.classes",
    "net.widths",
    "init.scheme",
    "miner.algorithm",
    "miner.lambda",
    "miner.lr",
    "miner.lr_schedule",
    "miner.optimizer",
    "miner.momentum",
    "miner.regularizer",
    "miner.batch_size",
    "schedule.sparsity",
    "schedule.epochs",
    "schedule.period",
    "ep.scope",
    "ep.schedule",
    "imp.rounds",
    "imp.prune_rate",
    "imp.rewind",
    "imp.warm_epoch",
    "imp.epochs_per_round",
    "sr.variant",
    "sr.tune_steps",
    "sr.tune_lr",
    "sr.reference",
    "sr.last_layer_keep",
    "sr.candidate_samples",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.optimizer",
    "finetune.momentum",
    "finetune.lr",
    "finetune.schedule",
    "finetune.milestones",
    "finetune.gamma",
    "sanity.variants",
    "sanity.margin",
    "seeds",
    "run.id",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("unknown key `{key}`"),
                });
            }
            if map
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Entries { map })
    }

    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn get<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => parse(v).ok_or_else(|| Error::Config {
                line,
                message: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        self.get(key, default, |v| v.parse().ok())
    }

    fn opt_num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key, None, |v| v.parse().ok().map(Some))
    }

    fn list<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        self.get(key, default, parse_list)
    }

    fn line(&self, key: &str) -> usize {
        self.raw(key).map_or(0, |(l, _)| l)
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn parse_init(v: &str) -> Option<InitScheme> {
    match v {
        "signed_constant" | "signed-constant" => Some(InitScheme::SignedConstant),
        "scaled_normal" | "scaled-normal" => Some(InitScheme::ScaledNormal),
        _ => None,
    }
}

fn default_init(algorithm: Algorithm) -> InitScheme {
    match algorithm {
        Algorithm::Gem | Algorithm::EdgePopup => InitScheme::SignedConstant,
        Algorithm::Imp | Algorithm::SmartRatio => InitScheme::ScaledNormal,
    }
}

fn init_name(s: InitScheme) -> &'static str {
    match s {
        InitScheme::SignedConstant => "signed_constant",
        InitScheme::ScaledNormal => "scaled_normal",
    }
}

fn parse_regularizer(v: &str) -> Option<Regularizer> {
    match v {
        "squared-l2" => Some(Regularizer::SquaredL2),
        "l2" => Some(Regularizer::L2),
        "l1" => Some(Regularizer::L1),
        _ => None,
    }
}

fn regularizer_name(r: Regularizer) -> &'static str {
    match r {
        Regularizer::SquaredL2 => "squared-l2",
        Regularizer::L2 => "l2",
        Regularizer::L1 => "l1",
    }
}

fn optimizer(e: &Entries, prefix: &str, default: &str) -> Result<OptimizerKind> {
    let momentum = e.num(&format!("{prefix}.momentum"), 0.9)?;
    e.get(&format!("{prefix}.optimizer"), default.to_string(), |v| {
        Some(v.to_string())
    })
    .and_then(|name| match name.as_str() {
        "sgd" => Ok(OptimizerKind::sgd(momentum)),
        "adam" => Ok(OptimizerKind::adam()),
        other => Err(Error::Config {
            line: e.line(&format!("{prefix}.optimizer")),
            message: format!("unknown optimizer `{other}` (expected sgd or adam)"),
        }),
    })
}

fn write_optimizer(out: &mut String, prefix: &str, kind: OptimizerKind) {
    match kind {
        OptimizerKind::SgdMomentum { momentum } => {
            let _ = writeln!(out, "{prefix}.optimizer = sgd");
            let _ = writeln!(out, "{prefix}.momentum = {momentum}");
        }
        OptimizerKind::Adam { .. } => {
            let _ = writeln!(out, "{prefix}.optimizer = adam");
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text; relative dataset paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let e = Entries::parse(text)?;
        let task_kind = e.get("task.kind", "blobs".to_string(), |v| Some(v.to_string()))?;
        let task = match task_kind.as_str() {
            "blobs" | "two-moons" => TaskConfig::Synthetic {
                kind: if task_kind == "blobs" {
                    SyntheticKind::Blobs
                } else {
                    SyntheticKind::TwoMoons
                },
                n: e.num("task.n", 400)?,
                noise: e.num("task.noise", 0.5)?,
            },
            "idx" => {
                let (line, raw) = e.raw("task.path").ok_or(Error::Config {
                    line: e.line("task.kind"),
                    message: "task.kind = idx needs task.path".into(),
                })?;
                let path = base_dir.join(raw);
                if !path.is_dir() {
                    return Err(Error::Config {
                        line,
                        message: format!("dataset directory {} does not exist", path.display()),
                    });
                }
                TaskConfig::Idx {
                    path,
                    train_limit: e.opt_num("task.train_limit")?,
                    val_fraction: e.num("task.val_fraction", 0.1)?,
                    num_classes: e.num("task.classes", 10)?,
                }
            }
            other => {
                return Err(Error::Config {
                    line: e.line("task.kind"),
                    message: format!("unknown task kind `{other}`"),
                })
            }
        };
        let widths = e.list("net.widths", vec![2, 64, 2])?;
        let spec = NetworkSpec::new(widths).map_err(|err| Error::Config {
            line: e.line("net.widths"),
            message: err.to_string(),
        })?;
        let algorithm = e.get("miner.algorithm", Algorithm::Gem, Algorithm::parse)?;
        let init = e.get("init.scheme", default_init(algorithm), parse_init)?;
        let miner = MinerConfig {
            lambda: e.num("miner.lambda", 0.0)?,
            lr: e.num("miner.lr", 0.01)?,
            lr_schedule: e.get("miner.lr_schedule", LrSchedule::Constant, |v| match v {
                "constant" => Some(LrSchedule::Constant),
                "cosine" => Some(LrSchedule::Cosine),
                _ => None,
            })?,
            optimizer: optimizer(&e, "miner", "adam")?,
            regularizer: e.get(
                "miner.regularizer",
                Regularizer::SquaredL2,
                parse_regularizer,
            )?,
            batch_size: e.num("miner.batch_size", 64)?,
            init: InitScheme::SignedConstant,
            seed: 0,
        };
        let schedule = SparsitySchedule {
            target: e.num("schedule.sparsity", 0.05)?,
            epochs: e.num("schedule.epochs", 30)?,
            period: e.num("schedule.period", 5)?,
        };
        let ep_scope = e.get("ep.scope", EpScope::Layerwise, |v| match v {
            "layerwise" => Some(EpScope::Layerwise),
            "global" => Some(EpScope::Global),
            _ => None,
        })?;
        let ep_schedule = e.get("ep.schedule", EpSchedule::Fixed, |v| match v {
            "fixed" => Some(EpSchedule::Fixed),
            "gradual" => Some(EpSchedule::Gradual),
            _ => None,
        })?;
        let warm_epoch = e.num("imp.warm_epoch", 1)?;
        let imp = ImpSettings {
            rounds: e.opt_num("imp.rounds")?,
            prune_rate: e.num("imp.prune_rate", 0.2)?,
            rewind: e.get("imp.rewind", Rewind::Cold, |v| match v {
                "cold" => Some(Rewind::Cold),
                "warm" => Some(Rewind::Warm { epoch: warm_epoch }),
                "lr-rewind" => Some(Rewind::LrRewind),
                _ => None,
            })?,
            epochs_per_round: e.num("imp.epochs_per_round", 20)?,
        };
        let reference = match e.raw("sr.reference") {
            None => None,
            Some((line, v)) => {
                let values: Vec<f64> = parse_list(v).ok_or(Error::Config {
                    line,
                    message: format!("invalid ratio list `{v}`"),
                })?;
                Some(LayerRatios::new(values).map_err(|err| Error::Config {
                    line,
                    message: err.to_string(),
                })?)
            }
        };
        let sr = SrSettings {
            variant: e.get("sr.variant", SrVariant::V1, SrVariant::parse)?,
            tune_steps: e.num("sr.tune_steps", 50)?,
            tune_lr: e.num("sr.tune_lr", 1e-3)?,
            reference,
            last_layer_keep: e.num("sr.last_layer_keep", 0.3)?,
            candidate_samples: e.num("sr.candidate_samples", 4)?,
        };
        let ft_schedule = e.get("finetune.schedule", "cosine".to_string(), |v| {
            Some(v.to_string())
        })?;
        let finetune = TrainConfig {
            epochs: e.num("finetune.epochs", 20)?,
            batch_size: e.num("finetune.batch_size", 64)?,
            optimizer: optimizer(&e, "finetune", "sgd")?,
            lr: e.num("finetune.lr", 0.01)?,
            schedule: match ft_schedule.as_str() {
                "cosine" => LrSchedule::Cosine,
                "constant" => LrSchedule::Constant,
                "multistep" => LrSchedule::MultiStep {
                    milestones: e.list("finetune.milestones", Vec::new())?,
                    gamma: e.num("finetune.gamma", 0.1)?,
                },
                other => {
                    return Err(Error::Config {
                        line: e.line("finetune.schedule"),
                        message: format!("unknown schedule `{other}`"),
                    })
                }
            },
            seed: 0,
        };
        let sanity = e.get(
            "sanity.variants",
            SanityKind::ALL.to_vec(),
            |v| -> Option<Vec<SanityKind>> {
                if v.trim().is_empty() {
                    return Some(Vec::new());
                }
                v.split(',').map(|s| SanityKind::parse(s.trim())).collect()
            },
        )?;
        let cfg = ExperimentConfig {
            task,
            task_seed: e.num("task.seed", 0)?,
            spec,
            algorithm,
            init,
            miner,
            schedule,
            ep_scope,
            ep_schedule,
            imp,
            sr,
            finetune,
            sanity,
            sanity_margin: e.num("sanity.margin", 0.02)?,
            seeds: e.list("seeds", vec![0])?,
            run_id: e.raw("run.id").map(|(_, v)| v.to_string()),
        };
        cfg.validate(&e)?;
        Ok(cfg)
    }

    fn validate(&self, e: &Entries) -> Result<()> {
        // Report the first related key that appears in the file.
        let at = |keys: &[&str], err: Error| Error::Config {
            line: keys.iter().map(|k| e.line(k)).find(|&l| l > 0).unwrap_or(0),
            message: err.to_string(),
        };
        self.schedule.validate().map_err(|err| {
            at(
                &["schedule.sparsity", "schedule.epochs", "schedule.period"],
                err,
            )
        })?;
        self.miner
            .validate()
            .map_err(|err| at(&["miner.lambda", "miner.lr", "miner.batch_size"], err))?;
        self.finetune.validate().map_err(|err| {
            at(
                &[
                    "finetune.milestones",
                    "finetune.epochs",
                    "finetune.lr",
                    "finetune.batch_size",
                ],
                err,
            )
        })?;
        if self.seeds.is_empty() {
            return Err(Error::Config {
                line: e.line("seeds"),
                message: "at least one seed is required".into(),
            });
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(Error::Config {
                    line: e.line("run.id"),
                    message: format!("run id `{id}` must be a plain directory name"),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|err| Error::io(path, err))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.init
    }

    /// Every setting with defaults filled in, one `key = value` per line.
    /// Parsing the snapshot yields the same configuration.
    pub fn snapshot(&self) -> String {
        let mut o = String::new();
        let w = &mut o;
        match &self.task {
            TaskConfig::Synthetic { kind, n, noise } => {
                let kind = match kind {
                    SyntheticKind::Blobs => "blobs",
                    SyntheticKind::TwoMoons => "two-moons",
                };
                let _ = writeln!(w, "task.kind = {kind}\ntask.n = {n}\ntask.noise = {noise}");
            }
            TaskConfig::Idx {
                path,
                train_limit,
                val_fraction,
                num_classes,
            } => {
                let _ = writeln!(w, "task.kind = idx\ntask.path = {}", path.display());
                if let Some(limit) = train_limit {
                    let _ = writeln!(w, "task.train_limit = {limit}");
                }
                let _ = writeln!(
                    w,
                    "task.val_fraction = {val_fraction}\ntask.classes = {num_classes}"
                );
            }
        }
        let _ = writeln!(w, "task.seed = {}", self.task_seed);
        let _ = writeln!(w, "net.widths = {}", join(self.spec.widths()));
        let _ = writeln!(w, "init.scheme = {}", init_name(self.init_scheme()));
        let m = &self.miner;
        let _ = writeln!(w, "miner.algorithm = {}", self.algorithm.name());
        let _ = writeln!(w, "miner.lambda = {}\nminer.lr = {}", m.lambda, m.lr);
        let sched = match m.lr_schedule {
            LrSchedule::Cosine => "cosine",
            _ => "constant",
        };
        let _ = writeln!(w, "miner.lr_schedule = {sched}");
        write_optimizer(w, "miner", m.optimizer);
        let _ = writeln!(w, "miner.regularizer = {}", regularizer_name(m.regularizer));
        let _ = writeln!(w, "miner.batch_size = {}", m.batch_size);
        let s = &self.schedule;
        let _ = writeln!(
            w,
            "schedule.sparsity = {}\nschedule.epochs = {}\nschedule.period = {}",
            s.target, s.epochs, s.period
        );
        let scope = match self.ep_scope {
            EpScope::Layerwise => "layerwise",
            EpScope::Global => "global",
        };
        let ep_sched = match self.ep_schedule {
            EpSchedule::Fixed => "fixed",
            EpSchedule::Gradual => "gradual",
        };
        let _ = writeln!(w, "ep.scope = {scope}\nep.schedule = {ep_sched}");
        if let Some(r) = self.imp.rounds {
            let _ = writeln!(w, "imp.rounds = {r}");
        }
        let _ = writeln!(w, "imp.prune_rate = {}", self.imp.prune_rate);
        match self.imp.rewind {
            Rewind::Cold => {
                let _ = writeln!(w, "imp.rewind = cold");
            }
            Rewind::Warm { epoch } => {
                let _ = writeln!(w, "imp.rewind = warm\nimp.warm_epoch = {epoch}");
            }
            Rewind::LrRewind => {
                let _ = writeln!(w, "imp.rewind = lr-rewind");
            }
        }
        let _ = writeln!(w, "imp.epochs_per_round = {}", self.imp.epochs_per_round);
        let sr = &self.sr;
        let _ = writeln!(w, "sr.variant = {}", sr.variant.name());
        let _ = writeln!(
            w,
            "sr.tune_steps = {}\nsr.tune_lr = {}",
            sr.tune_steps, sr.tune_lr
        );
        if let Some(r) = &sr.reference {
            let _ = writeln!(w, "sr.reference = {}", join(r.as_slice()));
        }
        let _ = writeln!(
            w,
            "sr.last_layer_keep = {}\nsr.candidate_samples = {}",
            sr.last_layer_keep, sr.candidate_samples
        );
        let f = &self.finetune;
        let _ = writeln!(
            w,
            "finetune.epochs = {}\nfinetune.batch_size = {}",
            f.epochs, f.batch_size
        );
        write_optimizer(w, "finetune", f.optimizer);
        let _ = writeln!(w, "finetune.lr = {}", f.lr);
        match &f.schedule {
            LrSchedule::Cosine => {
                let _ = writeln!(w, "finetune.schedule = cosine");
            }
            LrSchedule::Constant => {
                let _ = writeln!(w, "finetune.schedule = constant");
            }
            LrSchedule::MultiStep { milestones, gamma } => {
                let _ = writeln!(
                    w,
                    "finetune.schedule = multistep\nfinetune.milestones = {}\nfinetune.gamma = {gamma}",
                    join(milestones)
                );
            }
        }
        let names: Vec<&str> = self.sanity.iter().map(|k| k.name()).collect();
        let _ = writeln!(w, "sanity.variants = {}", names.join(","));
        let _ = writeln!(w, "sanity.margin = {}", self.sanity_margin);
        let _ = writeln!(w, "seeds = {}", join(&self.seeds));
        if let Some(id) = &self.run_id {
            let _ = writeln!(w, "run.id = {id}");
        }
        o
    }

    /// `run.id` if set, else the first 12 hex digits of the snapshot's SHA-256.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let digest = Sha256::digest(self.snapshot().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
