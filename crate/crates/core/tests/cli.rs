use std::path::Path;
use std::process::{Command, Output};

fn gtsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtsa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn gtsa")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
# small enough to train in well under a second
dim = 16
heads = 2
depth = 1
global_size = 32
local_size = 16
top_k = 4
pooled_size = 2
batch_size = 4
epochs = 1
";

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(gtsa(&[]).status.code(), Some(1));
    assert_eq!(gtsa(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gtsa(&["synth", "--n", "2"]).status.code(), Some(1));
    let help = gtsa(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("pretrain"));
}

#[test]
fn synth_writes_numbered_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("imgs");
    let run = gtsa(&["synth", "--n", "3", "--size", "40", "--seed", "7", "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    for seed in 7..10 {
        let img = image::open(out.join(format!("synth_{seed:06}.png"))).unwrap().to_rgb8();
        assert_eq!(img, gtsa::data::synth_image(seed, 40).unwrap());
    }
}

#[test]
fn pretrain_probe_and_match_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.path().join("run");
    let run = gtsa(&["pretrain", "--config", s(&cfg), "--synthetic", "8", "--out", s(&run_dir)]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let ckpt = run_dir.join("final.gtsa");
    assert!(ckpt.is_file());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let csv = dir.path().join("probe.csv");
    let probe = gtsa(&["probe", "--ckpt", s(&ckpt), "--synthetic", "2", "--family", "color_jitter", "--n-views", "3", "--out", s(&csv)]);
    assert_eq!(probe.status.code(), Some(0), "{}", String::from_utf8_lossy(&probe.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "family,mean_variance,n_views,n_images");
    assert!(lines[1].starts_with("color_jitter,"));
    assert!(lines[1].ends_with(",3,2"));

    let bad = gtsa(&["probe", "--ckpt", s(&ckpt), "--synthetic", "2", "--family", "hue", "--out", s(&csv)]);
    assert_eq!(bad.status.code(), Some(2));

    let img = dir.path().join("scene.png");
    gtsa::data::synth_image(1, 64).unwrap().save(&img).unwrap();
    let prefix = dir.path().join("pairs");
    let m = gtsa(&["match", "--ckpt", s(&ckpt), "--image", s(&img), "--k", "5", "--out", s(&prefix)]);
    assert_eq!(m.status.code(), Some(0), "{}", String::from_utf8_lossy(&m.stderr));
    let pairs = std::fs::read_to_string(prefix.with_extension("txt")).unwrap();
    assert_eq!(pairs.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert!(prefix.with_extension("png").is_file());
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.gtsa");
    let out = dir.path().join("x.csv");
    let run = gtsa(&["probe", "--ckpt", s(&missing), "--synthetic", "1", "--family", "all", "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let run = gtsa(&["pretrain", "--config", s(&cfg), "--synthetic", "2", "--out", s(dir.path())]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("no_such_key"));
}

#[test]
fn gradcheck_passes() {
    let run = gtsa(&["gradcheck"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("max relative error"));
}
