//! Acceptance checks, one line per criterion.
//!
//! Exits with status 1 if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{ste_probe, toy, toy_objective, RandomGraph, FD_TOLERANCE};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rare_gems::experiment::apply_sanity;
use rare_gems::{
    edge_popup, finetune, freeze_step, gem_mine, gen_synthetic, imp, init_scores, init_weights,
    load_idx, smart_ratio, tune_ratios, DatasetSplit, EdgePopupConfig, EpSchedule, EpScope,
    IdxOptions, ImpConfig, InitScheme, LayerMask, LayerRatios, LrSchedule, Mask, MaskCheckpoint,
    MaskedLayer, MinedSubnetwork, MinerConfig, NetworkSpec, OptimizerKind, Rewind, SanityKind,
    SmartRatioConfig, SparsitySchedule, SrVariant, SyntheticKind, Tensor, TrainConfig, TuneConfig,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const CHANCE: f64 = 0.1;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn mnist() -> DatasetSplit {
    let dir: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    let opts = IdxOptions {
        train_limit: Some(1000),
        val_fraction: 1.0 / 6.0,
        num_classes: 10,
        seed: 0,
    };
    load_idx(&dir, &opts).expect("MNIST subset under data/mnist-subset")
}

fn mnist_spec() -> NetworkSpec {
    NetworkSpec::new(vec![784, 128, 10]).unwrap()
}

fn gem_config(seed: u64) -> MinerConfig {
    MinerConfig {
        optimizer: OptimizerKind::adam(),
        lr: 0.01,
        seed,
        ..MinerConfig::default()
    }
}

fn finetune_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 64,
        optimizer: OptimizerKind::sgd(0.9),
        lr: 0.01,
        schedule: LrSchedule::Cosine,
        seed,
    }
}

fn post_accuracy(
    weights: &[Tensor],
    mask: &Mask,
    data: &DatasetSplit,
    seed: u64,
) -> (f64, f64, f64) {
    let (_, r) = finetune(weights, mask, data, &finetune_config(seed)).unwrap();
    let first = r.records.first().unwrap().train_loss;
    let last = r.records.last().unwrap().train_loss;
    (r.post_finetune_accuracy.unwrap(), first, last)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn schedule_landing(data: &DatasetSplit) -> Outcome {
    let spec = mnist_spec();
    let d = spec.total_params() as f64;
    let schedule = SparsitySchedule::new(0.05, 30, 5).unwrap();
    let mined = gem_mine(data, &spec, &schedule, &gem_config(0)).unwrap();
    let s = mined.mask.sparsity();
    let lower = 0.05 - 6.0 / d * 30.0 / 5.0;
    let envelope_ok = mined.freeze_events.len() == 6
        && mined
            .freeze_events
            .iter()
            .all(|e| e.unfrozen as f64 <= schedule.envelope(e.epoch) * d + 1e-9);
    let r = &mined.report.records;
    let loss_ok = r.last().unwrap().train_loss <= r[0].train_loss;
    outcome(
        s >= lower && s <= 0.05 && envelope_ok && loss_ok,
        format!(
            "d={d} sparsity={s:.6} in [{lower:.6}, 0.05]; envelope after {} events: {envelope_ok}; loss {:.3} -> {:.3}",
            mined.freeze_events.len(),
            r[0].train_loss,
            r.last().unwrap().train_loss
        ),
    )
}

fn freeze_arithmetic() -> Outcome {
    let schedule = SparsitySchedule::new(0.014, 150, 5).unwrap();
    let k = schedule.keep_factor();
    let expected = 0.014f64.powf(1.0 / 30.0);
    let factor_err = (k - expected).abs() / expected;
    let composed: f64 = (0..schedule.events()).map(|_| k).product();
    let compose_err = (composed - 0.014).abs() / 0.014;

    let sizes = [(300, 200), (100, 300), (10, 100)];
    let mut rng = rare_gems::rng::stream(11, rare_gems::rng::Stream::Scores);
    let mut layers: Vec<MaskedLayer> = sizes
        .iter()
        .map(|&(o, i)| {
            let scores = (0..o * i)
                .map(|_| rand::Rng::random::<f64>(&mut rng))
                .collect();
            MaskedLayer::new(
                Tensor::ones(&[o, i]),
                Tensor::new(vec![o, i], scores).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let original: Vec<f64> = layers
        .iter()
        .flat_map(|l| l.scores.data().to_vec())
        .collect();
    let d = original.len() as f64;
    let mut sorted = original.clone();
    sorted.sort_by(f64::total_cmp);
    let mut bounded = true;
    let mut lowest_first = true;
    for j in 1..=schedule.events() {
        freeze_step(&mut layers, &schedule);
        let q: Vec<f64> = layers
            .iter()
            .flat_map(|l| l.freeze.data().to_vec())
            .collect();
        let unfrozen = q.iter().filter(|&&v| v != 0.0).count();
        let env = 0.014f64.powf(j as f64 / 30.0) * d;
        bounded &= unfrozen as f64 <= env + 1e-6 && unfrozen as f64 >= env - j as f64;
        let cut = sorted[q.len() - unfrozen];
        lowest_first &= q
            .iter()
            .zip(&original)
            .all(|(&qv, &s)| (qv == 0.0) == (s < cut));
    }
    let final_unfrozen: usize = layers.iter().map(MaskedLayer::unfrozen).sum();
    outcome(
        factor_err <= 1e-12 && compose_err <= 1e-12 && bounded && lowest_first,
        format!(
            "keep factor rel err {factor_err:.1e}; 30-event product rel err {compose_err:.1e}; \
             {final_unfrozen}/{d} unfrozen (target {:.1}); envelope bounds {bounded}; lowest frozen first {lowest_first}",
            0.014 * d
        ),
    )
}

fn imp_schedule(data: &DatasetSplit) -> Outcome {
    let spec = mnist_spec();
    let d = spec.total_params() as f64;
    let cfg = ImpConfig {
        rounds: 19,
        prune_rate: 0.2,
        rewind: Rewind::Cold,
        train: TrainConfig {
            epochs: 1,
            ..finetune_config(0)
        },
        init: InitScheme::ScaledNormal,
    };
    let mined = imp(data, &spec, &cfg).unwrap();
    let target = 0.8f64.powi(19);
    let s = mined.mask.sparsity();
    let nested = mined.history.windows(2).all(|w| w[1].is_subset_of(&w[0]));
    let accounting = cfg.rounds * 150 == 2850;
    outcome(
        (s - target).abs() <= 0.5 / d && nested && mined.history.len() == 19 && accounting,
        format!("sparsity={s:.6} vs 0.8^19={target:.6}; nested over {} rounds: {nested}; 19x150 = 2850: {accounting}",
            mined.history.len()),
    )
}

fn pre_finetune_signal(data: &DatasetSplit) -> Outcome {
    let spec = mnist_spec();
    let mut gem = Vec::new();
    let mut cold = Vec::new();
    let mut sr = Vec::new();
    let mut sparsities = Vec::new();
    for seed in SEEDS {
        let schedule = SparsitySchedule::new(0.5, 30, 5).unwrap();
        let g = gem_mine(data, &spec, &schedule, &gem_config(seed)).unwrap();
        gem.push(g.report.pre_finetune_accuracy.unwrap());
        let cfg = ImpConfig {
            rounds: 1,
            prune_rate: 0.5,
            rewind: Rewind::Cold,
            train: finetune_config(seed),
            init: InitScheme::ScaledNormal,
        };
        let i = imp(data, &spec, &cfg).unwrap();
        cold.push(i.report.pre_finetune_accuracy.unwrap());
        let cfg = SmartRatioConfig {
            target: 0.5,
            seed,
            ..SmartRatioConfig::default()
        };
        let r = smart_ratio(&spec, &cfg, Some(data)).unwrap();
        sr.push(r.report.pre_finetune_accuracy.unwrap());
        sparsities.push((g.mask.sparsity(), i.mask.sparsity(), r.mask.sparsity()));
    }
    let (g, c, s) = (mean(&gem), mean(&cold), mean(&sr));
    let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        g >= 3.0 * CHANCE && c <= 2.0 * CHANCE && s <= 2.0 * CHANCE,
        format!(
            "gem {g:.3} (>= 0.30 {}); imp-cold {c:.3} (<= 0.20 {}); smart-ratio {s:.3} (<= 0.20 {}); sparsities {:?}",
            verdict(g >= 0.3),
            verdict(c <= 0.2),
            verdict(s <= 0.2),
            sparsities
                .iter()
                .map(|(a, b, c)| format!("{a:.4}/{b:.4}/{c:.4}"))
                .collect::<Vec<_>>()
        ),
    )
}

fn sanity_gap(data: &DatasetSplit) -> Outcome {
    let spec = mnist_spec();
    let mut acc = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut loss_ok = true;
    for seed in SEEDS {
        let schedule = SparsitySchedule::new(0.05, 30, 5).unwrap();
        let m = gem_mine(data, &spec, &schedule, &gem_config(seed)).unwrap();
        let (a, first, last) = post_accuracy(&m.weights, &m.mask, data, seed);
        acc[0].push(a);
        loss_ok &= last <= first;
        for (k, kind) in SanityKind::ALL.into_iter().enumerate() {
            let v = apply_sanity(&m.mask, &m.weights, &m.scores, m.init, kind, seed).unwrap();
            acc[k + 1].push(post_accuracy(&v.weights, &v.mask, data, seed).0);
        }
    }
    let means: Vec<f64> = acc.iter().map(|v| mean(v)).collect();
    let gaps_ok = means[1..].iter().all(|&m| means[0] - m >= 0.02);
    let names = SanityKind::ALL.map(|k| k.name());
    outcome(
        gaps_ok && loss_ok,
        format!(
            "original {:.3}; {} {:.3}, {} {:.3}, {} {:.3}; finetune loss decreased on every seed: {loss_ok}",
            means[0], names[0], means[1], names[1], means[2], names[2], means[3]
        ),
    )
}

fn ep_ablation(data: &DatasetSplit) -> Outcome {
    let spec = mnist_spec();
    let mut results = Vec::new();
    for (scope, schedule) in [
        (EpScope::Layerwise, EpSchedule::Fixed),
        (EpScope::Global, EpSchedule::Gradual),
    ] {
        let mut acc = Vec::new();
        for seed in SEEDS {
            let ep = EdgePopupConfig {
                keep: 0.02,
                epochs: 30,
                period: 5,
                scope,
                schedule,
            };
            let cfg = MinerConfig {
                lr: 0.1,
                seed,
                ..MinerConfig::default()
            };
            let m = edge_popup(data, &spec, &ep, &cfg).unwrap();
            acc.push(post_accuracy(&m.weights, &m.mask, data, seed).0);
        }
        results.push(mean(&acc));
    }
    outcome(
        results[1] >= results[0] + 0.02,
        format!(
            "layerwise+fixed {:.3}; global+gradual {:.3}",
            results[0], results[1]
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let worst = (0..20)
        .map(|seed| RandomGraph::new(seed).max_fd_error())
        .fold(0.0f64, f64::max);
    let probes = [
        (0.8, 1.0, 0.7, 1.5, 0),
        (-1.3, 1.0, 0.2, -0.4, 1),
        (0.5, 0.0, 0.9, 2.0, 1),
        (2.0, 1.0, 0.5, 0.3, 0),
        (-0.1, 1.0, 0.49, -1.0, 0),
    ];
    let exact = probes.iter().all(|&(w, q, p, x, y)| {
        let (dp, expected) = ste_probe(w, q, p, x, y);
        dp == expected
    });
    outcome(
        worst <= FD_TOLERANCE && exact,
        format!("worst relative error {worst:.2e} over 20 graphs; STE probes exact: {exact}"),
    )
}

fn same_mined(a: &MinedSubnetwork, b: &MinedSubnetwork) -> bool {
    let bits = |ts: &[Tensor]| -> Vec<u64> {
        ts.iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    a.mask == b.mask
        && bits(&a.weights) == bits(&b.weights)
        && bits(&a.scores) == bits(&b.scores)
        && a.history == b.history
        && a.ratios == b.ratios
        && a.report.to_json().unwrap() == b.report.to_json().unwrap()
}

fn conservation_determinism() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 128,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        prop::collection::vec(1usize..8, 3..5),
        prop::collection::vec(any::<bool>(), 1..80),
        0u64..10_000,
    );
    let conservation = runner.run(&strategy, |(widths, bits, seed)| {
        let spec = NetworkSpec::new(widths).unwrap();
        let mut it = bits.iter().cycle();
        let mask = Mask {
            layers: (0..spec.num_layers())
                .map(|l| {
                    let (o, i) = spec.layer_shape(l);
                    let mut m = LayerMask::empty(o, i);
                    m.bits.iter_mut().for_each(|b| *b = *it.next().unwrap());
                    m
                })
                .collect(),
        };
        let weights = init_weights(&spec, InitScheme::ScaledNormal, seed);
        let scores = init_scores(&spec, seed);
        for kind in SanityKind::ALL {
            let v = apply_sanity(
                &mask,
                &weights,
                &scores,
                InitScheme::ScaledNormal,
                kind,
                seed,
            )
            .unwrap();
            prop_assert_eq!(v.mask.kept_per_layer(), mask.kept_per_layer());
            if kind == SanityKind::Reinit {
                prop_assert_eq!(&v.mask, &mask);
            }
        }
        let ckpt = MaskCheckpoint::new(&mask, &scores, &weights).unwrap();
        let bytes = ckpt.to_bytes();
        let back = MaskCheckpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        Ok(())
    });

    let data = gen_synthetic(SyntheticKind::TwoMoons, 200, 0.1, 5).unwrap();
    let spec = NetworkSpec::new(vec![2, 24, 24, 2]).unwrap();
    let schedule = SparsitySchedule::new(0.2, 6, 2).unwrap();
    let ep = EdgePopupConfig {
        keep: 0.2,
        epochs: 4,
        period: 2,
        scope: EpScope::Global,
        schedule: EpSchedule::Gradual,
    };
    let imp_cfg = ImpConfig {
        rounds: 3,
        prune_rate: 0.4,
        rewind: Rewind::Warm { epoch: 1 },
        train: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
        init: InitScheme::ScaledNormal,
    };
    let mut miners: Vec<(String, Box<dyn Fn() -> MinedSubnetwork>)> = vec![
        (
            "gem".into(),
            Box::new(|| gem_mine(&data, &spec, &schedule, &gem_config(3)).unwrap()),
        ),
        (
            "edge-popup".into(),
            Box::new(|| edge_popup(&data, &spec, &ep, &MinerConfig::default()).unwrap()),
        ),
        (
            "imp".into(),
            Box::new(|| imp(&data, &spec, &imp_cfg).unwrap()),
        ),
    ];
    for variant in SrVariant::ALL {
        let cfg = SmartRatioConfig {
            target: 0.2,
            variant,
            reference: Some(LayerRatios::new(vec![0.5, 0.2, 0.6]).unwrap()),
            tune: TuneConfig {
                steps: 10,
                lr: 1e-3,
                batch_size: 32,
                seed: 0,
            },
            seed: 4,
            ..SmartRatioConfig::default()
        };
        let (data, spec) = (&data, &spec);
        miners.push((
            format!("smart-ratio {}", variant.name()),
            Box::new(move || smart_ratio(spec, &cfg, Some(data)).unwrap()),
        ));
    }
    let nondeterministic: Vec<&str> = miners
        .iter()
        .filter(|(_, run)| !same_mined(&run(), &run()))
        .map(|(n, _)| n.as_str())
        .collect();

    outcome(
        conservation.is_ok() && nondeterministic.is_empty(),
        format!(
            "128 property cases: {}; {} miners bit-deterministic, mismatches {:?}",
            match &conservation {
                Ok(()) => "ok".to_string(),
                Err(e) => e.to_string(),
            },
            miners.len(),
            nondeterministic
        ),
    )
}

fn smart_ratio_construction() -> Outcome {
    let spec = NetworkSpec::new(vec![784, 300, 100, 100, 10]).unwrap();
    let run = |variant| {
        let cfg = SmartRatioConfig {
            target: 0.05,
            variant,
            ..SmartRatioConfig::default()
        };
        smart_ratio(&spec, &cfg, None)
            .unwrap()
            .ratios
            .as_slice()
            .to_vec()
    };
    let v1 = run(SrVariant::V1);
    let l = v1.len();
    let monotone = v1[..l - 1].windows(2).all(|w| w[0] > w[1]);
    let last = v1[l - 1] == 0.3;
    let v3 = run(SrVariant::V3);
    let dense_ends = v3[0] == 1.0 && v3[l - 1] == 1.0 && v3[1..l - 1] == v1[1..l - 1];

    let (w, split) = toy();
    let p0 = LayerRatios::new(vec![0.5, 0.5]).unwrap();
    let before = toy_objective(p0.as_slice(), &split);
    let after = (0..10u64)
        .map(|seed| {
            let cfg = TuneConfig {
                steps: 40,
                lr: 0.05,
                batch_size: 16,
                seed,
            };
            toy_objective(
                tune_ratios(&p0, &w, &split, &cfg).unwrap().as_slice(),
                &split,
            )
        })
        .sum::<f64>()
        / 10.0;
    outcome(
        monotone && last && dense_ends && after < before,
        format!(
            "v1 {:?} (interior decreasing {monotone}, last 0.3 {last}); v3 ends dense {dense_ends}; \
             toy objective {before:.4} -> {after:.4} over 10 seeds",
            v1.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn main() -> ExitCode {
    let data = mnist();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Duration, Check)> = vec![
        (
            "schedule landing",
            Duration::from_secs(120),
            Box::new(|| schedule_landing(&data)),
        ),
        (
            "freeze arithmetic",
            Duration::from_secs(1),
            Box::new(freeze_arithmetic),
        ),
        (
            "IMP schedule",
            Duration::from_secs(60),
            Box::new(|| imp_schedule(&data)),
        ),
        (
            "pre-finetune signal",
            Duration::from_secs(3 * 300),
            Box::new(|| pre_finetune_signal(&data)),
        ),
        (
            "sanity gap",
            Duration::from_secs(20 * 60),
            Box::new(|| sanity_gap(&data)),
        ),
        (
            "EP ablation ordering",
            Duration::from_secs(15 * 60),
            Box::new(|| ep_ablation(&data)),
        ),
        (
            "gradient correctness",
            Duration::from_secs(10),
            Box::new(gradient_correctness),
        ),
        (
            "conservation and determinism",
            Duration::from_secs(60),
            Box::new(conservation_determinism),
        ),
        (
            "Smart-Ratio construction",
            Duration::from_secs(120),
            Box::new(smart_ratio_construction),
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let ok = out.passed && elapsed <= *budget;
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {}. {name}: {} ({:.2}s, budget {}s)",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
