//! The `derain` binary end to end on a tiny synthetic set.

use std::path::Path;
use std::process::{Command, Output};

use derain::eval::parse_key_values;
use derain::searchspace::CellSpec;

fn derain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_derain")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let out = derain(&["train", "--frames", "4", "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--frames"));
    assert_eq!(derain(&["nonsense"]).status.code(), Some(2));
    assert_eq!(derain(&["synth", "--bogus"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = derain(&["eval", "--data", p(&dir.path().join("none")), "--restored", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_train_export_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let ok = |args: &[&str]| {
        let o = derain(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["synth", "--out", p(&data), "--sequences", "2", "--length", "3", "--size", "16", "--seed", "4"]);
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 4"));

    let same = ok(&["eval", "--data", p(&data), "--restored", p(&data.join("clean")), "--out", p(&dir.path().join("same"))]);
    assert!(String::from_utf8_lossy(&same.stdout).contains("1.0000"));
    let kv = parse_key_values(&std::fs::read_to_string(dir.path().join("same/report.kv")).unwrap()).unwrap();
    assert_eq!(kv["restored.ssim"], "1.000000");
    assert_eq!(kv["restored.psnr"], "inf");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "train.not_a_key = 3\n").unwrap();
    let o = derain(&["train", "--preset", "toy", "--config", p(&bad), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));

    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[train]\nmax_steps = 2\nbatch = 2\n[data]\ncrop = 16\n").unwrap();
    ok(&["train", "--preset", "toy", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let log = std::fs::read_to_string(run.join("log.txt")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("step=") && l.contains(" L_D=") && l.contains(" entropy=")));
    let ckpt = run.join("checkpoint");
    assert!(ckpt.join("manifest.txt").is_file());

    let g = dir.path().join("g.txt");
    ok(&["export-arch", "--ckpt", p(&ckpt), "--out", p(&g)]);
    let cell: CellSpec = std::fs::read_to_string(&g).unwrap().trim().parse().unwrap();
    assert_eq!(cell, CellSpec::light());

    let restored = dir.path().join("restored");
    ok(&["infer", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&restored)]);
    assert_eq!(std::fs::read_dir(restored.join("seq00")).unwrap().count(), 3);

    let rep = dir.path().join("rep");
    ok(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&rep)]);
    let kv = parse_key_values(&std::fs::read_to_string(rep.join("report.kv")).unwrap()).unwrap();
    assert_eq!(kv["restored.frames"], "6");
    assert!(kv.contains_key("sequence.seq01.input.psnr"));
}
