use std::path::Path;
use std::process::{Command, Output};

const TINY_SPEC: &str = r#"
cameras = 3
width = 16
height = 16
frames = 4
static_blobs = 6
points_per_blob = 4

[[dynamic_blobs]]
start_frame = 1
end_frame = 2
waypoints = [[0.2, 0.0, 0.0], [-0.2, 0.1, 0.0]]
color = [0.9, 0.2, 0.1]
scale = 0.2
opacity = 0.9
"#;

fn a4dg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a4dg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, TINY_SPEC).unwrap();
    let data = dir.join("data");
    let out = a4dg(&["synth", "--spec", s(&spec), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn synth_train_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    assert!(data.join("manifest.json").exists());
    assert!(data.join("points.ply").exists());

    let ckpt = dir.path().join("scene.a4dg");
    let log = dir.path().join("log.csv");
    let out = a4dg(&[
        "train", "--data", s(&data), "--out", s(&ckpt), "--log", s(&log), "--iters", "6", "--growing", "naive",
        "--opacity", "gaussian4dgs", "--k", "4", "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("iteration,loss,l1,l_ssim,l_vol,anchors,gaussians_rendered\n"));
    assert_eq!(log_text.lines().count(), 7);

    let png = dir.path().join("view.png");
    let out = a4dg(&[
        "render", "--ckpt", s(&ckpt), "--data", s(&data), "--camera", "1", "--frame", "2", "--out", s(&png),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = a4dg::io::image_io::load_png(&png).unwrap();
    assert_eq!((img.width, img.height), (16, 16));

    let report = dir.path().join("report.csv");
    let out = a4dg(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "psnr_dyn,ssim_dyn,psnr_full,ssim_full,anchors,gaussians,storage_bytes"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    let bytes: u64 = row[6].parse().unwrap();
    assert_eq!(bytes, std::fs::metadata(&ckpt).unwrap().len());
}

#[test]
fn ablate_growing_writes_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "iterations = 8\nk = 3\n[growth]\nstart = 4\ninterval = 2\nuntil_fraction = 1.0\n").unwrap();
    let out_dir = dir.path().join("ablate");
    let out = a4dg(&["ablate-growing", "--data", s(&data), "--out", s(&out_dir), "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for mode in ["dynamic_aware", "naive"] {
        let text = std::fs::read_to_string(out_dir.join(format!("grad_{mode}.csv"))).unwrap();
        assert!(text.starts_with("anchor_id,slot,grad_weighted,grad_naive,sigma\n"));
        assert!(text.lines().count() > 1);
        assert!(out_dir.join(format!("eval_{mode}.csv")).exists());
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("\ndynamic_aware,") && stdout.contains("\nnaive,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "iterations = 0\n").unwrap();
    let ckpt = dir.path().join("x.a4dg");
    let missing = dir.path().join("nowhere");

    let out = a4dg(&["train", "--data", s(&missing), "--out", s(&ckpt), "--config", s(&bad_cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let out = a4dg(&["train", "--data", s(&missing), "--out", s(&ckpt), "--beta=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = a4dg(&["train", "--data", s(&missing), "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(3));

    let bad_spec = dir.path().join("spec.toml");
    std::fs::write(&bad_spec, "frames = 1\n").unwrap();
    let out = a4dg(&["synth", "--spec", s(&bad_spec), "--out", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));

    let junk = dir.path().join("junk.a4dg");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = a4dg(&["eval", "--ckpt", s(&junk), "--data", s(&missing), "--report", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergent_training_aborts_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        "iterations = 50\ngrowing = \"off\"\n[rates]\noffsets = { initial = 1e308, final_factor = 1.0 }\nfeatures = { initial = 1e308, final_factor = 1.0 }\nmlps = { initial = 1e308, final_factor = 1.0 }\n",
    )
    .unwrap();
    let out = a4dg(&["train", "--data", s(&data), "--out", s(&dir.path().join("x.a4dg")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
