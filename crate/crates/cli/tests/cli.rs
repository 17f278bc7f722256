use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = "\
task.kind = blobs
task.n = 160
net.widths = 2, 12, 2
schedule.sparsity = 0.25
schedule.epochs = 4
schedule.period = 2
finetune.epochs = 2
seeds = 0, 1
run.id = cli-test
";

fn gems(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gems"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.cfg");
    fs::write(&config, CONFIG).unwrap();
    let out = tmp.path().join("out");
    (tmp, config, out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_the_summary_matrix() {
    let (_tmp, config, out) = setup();
    let stdout = ok(&gems(&[
        "run",
        "--config",
        s(&config),
        "--out-dir",
        s(&out),
    ]));
    assert!(stdout.contains("sanity shuffle"));
    let summary = out.join("cli-test").join("summary.csv");
    let text = fs::read_to_string(&summary).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4);

    let verdicts = ok(&gems(&[
        "report",
        "--summary",
        s(&summary),
        "--config",
        s(&config),
    ]));
    assert_eq!(verdicts.lines().count(), 3);
}

#[test]
fn stepwise_commands_chain_through_checkpoints() {
    let (_tmp, config, out) = setup();
    let common = ["--config", s(&config), "--out-dir", s(&out), "--seed", "5"];
    let mined = ok(&gems(&[&["mine"][..], &common].concat()));
    assert!(mined.contains("seed 5"));
    let ckpt = out.join("cli-test/masks/seed-5-original.tfmc");
    assert!(ckpt.is_file());

    let tuned = ok(&gems(
        &[&["finetune", "--checkpoint", s(&ckpt)][..], &common].concat(),
    ));
    assert!(tuned.contains("after finetuning"));
    assert!(out
        .join("cli-test/reports/seed-5-finetune-seed-5-original.json")
        .is_file());

    let table = ok(&gems(
        &[
            &["sanity", "--checkpoint", s(&ckpt), "--variant", "invert"][..],
            &common,
        ]
        .concat(),
    ));
    assert!(table.starts_with("layer_index,params,kept,keep_fraction"));
    assert!(out.join("cli-test/masks/seed-5-invert.tfmc").is_file());

    let report = ok(&gems(&["report", "--checkpoint", s(&ckpt)]));
    assert!(report.lines().any(|l| l.starts_with("global,")));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let (tmp, config, out) = setup();
    let ckpt = tmp.path().join("missing.tfmc");
    let r = gems(&[
        "sanity",
        "--config",
        s(&config),
        "--out-dir",
        s(&out),
        "--checkpoint",
        s(&ckpt),
        "--variant",
        "flip",
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown sanity variant"));

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "seeds = 0\nmystery = 1\n").unwrap();
    let r = gems(&["mine", "--config", s(&bad)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 2"));

    let r = gems(&["report"]);
    assert!(!r.status.success());
}
