use std::path::Path;
use std::process::{Command, Output};

fn simc3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simc3d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run simc3d")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= in {out}"))
        .to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, scenes: usize) -> String {
    let data = dir.join("data");
    let o = simc3d(&[
        "synth",
        "--out",
        p(&data),
        "--scenes",
        &scenes.to_string(),
        "--width",
        "64",
        "--height",
        "48",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    p(&data.join("manifest.txt")).to_string()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        format!("# test config\npoints_per_view = 96\nbatch_scenes = 2\n{extra}"),
    )
    .unwrap();
    p(&path).to_string()
}

#[test]
fn synth_pretrain_and_every_probe() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4);
    let cfg = small_config(dir.path(), "");
    let run = dir.path().join("run");

    let o = simc3d(&[
        "pretrain",
        "--data",
        &manifest,
        "--config",
        &cfg,
        "--out",
        p(&run),
        "--steps",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(value(&out, "steps"), "4");
    assert!(value(&out, "final_loss").parse::<f64>().unwrap().is_finite());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,lr,loss,pos_sim,neg_sim"));
    assert_eq!(metrics.lines().count(), 5);

    let ckpt = run.join("final.bin");
    let csv = dir.path().join("retrieval.csv");
    let o = simc3d(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        &manifest,
        "--probe",
        "retrieval",
        "--out",
        p(&csv),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let acc: f64 = value(&stdout(&o), "top1_accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(std::fs::read_to_string(&csv)
        .unwrap()
        .starts_with("top1_accuracy,points,chance"));

    let o = simc3d(&[
        "eval",
        "--checkpoint",
        p(&run),
        "--data",
        &manifest,
        "--probe",
        "similarity",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&stdout(&o), "rows"), "3");

    let pca = dir.path().join("pca.csv");
    let o = simc3d(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        &manifest,
        "--probe",
        "pca",
        "--out",
        p(&pca),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&pca).unwrap();
    assert_eq!(text.lines().next(), Some("x,y,z,pc1,pc2,pc3"));
    let points: usize = value(&stdout(&o), "points").parse().unwrap();
    assert_eq!(text.lines().count(), points + 1);

    let km = dir.path().join("kmeans.csv");
    let o = simc3d(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        &manifest,
        "--probe",
        "kmeans",
        "--k",
        "4",
        "--out",
        p(&km),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&km).unwrap().starts_with("x,y,z,label"));
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2);
    let cfg = small_config(dir.path(), "");
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = simc3d(&[
            "pretrain",
            "--data",
            &manifest,
            "--config",
            &cfg,
            "--out",
            p(&out),
            "--steps",
            "3",
        ]);
        assert_eq!(o.status.code(), Some(0));
        files.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn zero_scenes_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = simc3d(&["synth", "--out", p(dir.path()), "--scenes", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_probe_and_target_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 1);
    let o = simc3d(&[
        "eval",
        "--checkpoint",
        "x.bin",
        "--data",
        &manifest,
        "--probe",
        "bogus",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = simc3d(&["pretrain", "--data", &manifest, "--out", "r", "--target", "pe3d"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = simc3d(&[
        "pretrain",
        "--data",
        p(&missing),
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let manifest = synth(dir.path(), 1);
    let o = simc3d(&[
        "eval",
        "--checkpoint",
        p(&missing),
        "--data",
        &manifest,
        "--probe",
        "retrieval",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = small_config(dir.path(), "objective = contrastive\n");
    let o = simc3d(&[
        "pretrain",
        "--data",
        &manifest,
        "--config",
        &cfg,
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pca_on_too_few_points_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    // a 2×1 frame gives at most two points
    let data = dir.path().join("tiny");
    let o = simc3d(&[
        "synth",
        "--out",
        p(&data),
        "--scenes",
        "1",
        "--width",
        "2",
        "--height",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let manifest = p(&data.join("manifest.txt")).to_string();
    let big = synth(dir.path(), 2);
    let cfg = small_config(dir.path(), "");
    let run = dir.path().join("run");
    let o = simc3d(&[
        "pretrain",
        "--data",
        &big,
        "--config",
        &cfg,
        "--out",
        p(&run),
        "--steps",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = simc3d(&[
        "eval",
        "--checkpoint",
        p(&run.join("final.bin")),
        "--data",
        &manifest,
        "--probe",
        "pca",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 3"));
}

#[test]
fn diverging_training_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2);
    let cfg = small_config(dir.path(), "lr = 1e30\n");
    let o = simc3d(&[
        "pretrain",
        "--data",
        &manifest,
        "--config",
        &cfg,
        "--out",
        p(&dir.path().join("r")),
        "--steps",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch seed"));
}
