use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use haat_core::{imaging, weights, ModelConfig};

fn haat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&haat(&[])), 2);
    assert_eq!(code(&haat(&["frobnicate"])), 2);
    assert_eq!(code(&haat(&["gradcheck", "--bogus"])), 2);
    assert_eq!(code(&haat(&["gradcheck", "--level", "galaxy"])), 2);
    assert_eq!(code(&haat(&["benchmark", "--bicubic", "--hr-dir", "."])), 2);
    let o = haat(&["benchmark", "--bicubic", "--weights", "w", "--hr-dir", ".", "--scale", "2"]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
    assert_eq!(code(&haat(&["--help"])), 0);
}

#[test]
fn init_weights_from_presets_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.haatw");
    assert_eq!(code(&haat(&["init-weights", "--config", "toy", "--seed", "3", "--out", s(&out)])), 0);
    let (store, cfg) = weights::load_weights(&out).unwrap();
    assert_eq!(cfg, ModelConfig::toy());
    let (_, expected) = haat_core::build_model(&cfg, 3).unwrap();
    assert_eq!(store.iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>(),
               expected.iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>());

    let conf = dir.path().join("small.conf");
    std::fs::write(&conf, "# tiny\nbase = toy\nchannels = 8\nstl_growth = 4\nnum_rdg = 1\nsdrcbs_per_rdg = 1\nsqueeze_factor = 4\nscale = 3\n").unwrap();
    let out2 = dir.path().join("small.haatw");
    assert_eq!(code(&haat(&["init-weights", "--config", s(&conf), "--out", s(&out2)])), 0);
    let (_, cfg) = weights::load_weights(&out2).unwrap();
    assert_eq!((cfg.channels, cfg.growth, cfg.num_rdg, cfg.scale), (8, 4, 1, 3));

    let out3 = dir.path().join("x4.haatw");
    assert_eq!(code(&haat(&["init-weights", "--scale", "4", "--out", s(&out3)])), 0);
    assert_eq!(weights::load_weights(&out3).unwrap().1.scale, 4);

    std::fs::write(&conf, "channels = 10\n").unwrap();
    let o = haat(&["init-weights", "--config", s(&conf), "--out", s(&out2)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("channels"));
    assert_eq!(code(&haat(&["init-weights", "--config", "nowhere.conf", "--out", s(&out2)])), 2);
}

#[test]
fn upscale_writes_a_scaled_png() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("toy.haatw");
    assert_eq!(code(&haat(&["init-weights", "--out", s(&w)])), 0);
    let out = dir.path().join("sr.png");
    let o = haat(&["upscale", "--weights", s(&w), "--in", s(&fixture("chelsea_16.png")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let img = imaging::load_image(&out).unwrap();
    assert_eq!((img.width, img.height), (32, 32));

    assert_eq!(code(&haat(&["upscale", "--weights", s(&w), "--in", "missing.png", "--out", s(&out)])), 1);
    std::fs::write(dir.path().join("junk.haatw"), b"not a weight file").unwrap();
    let o = haat(&["upscale", "--weights", s(&dir.path().join("junk.haatw")), "--in", s(&fixture("chelsea_16.png")), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn bicubic_benchmark_writes_csv_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let o = haat(&["benchmark", "--bicubic", "--scale", "2", "--hr-dir", s(&fixture("hr3")), "--csv", s(&csv), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "name,psnr_db,ssim");
    assert!(lines[4].starts_with("AGGREGATE,"));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("Bicubic") && stdout.contains("PSNR SSIM"));

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(code(&haat(&["benchmark", "--bicubic", "--scale", "2", "--hr-dir", s(empty.path())])), 1);
    assert_eq!(code(&haat(&["benchmark", "--bicubic", "--scale", "7", "--hr-dir", s(&fixture("hr3"))])), 2);
}

#[test]
fn benchmark_rejects_scale_that_disagrees_with_weights() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("toy.haatw");
    assert_eq!(code(&haat(&["init-weights", "--out", s(&w)])), 0);
    let o = haat(&["benchmark", "--weights", s(&w), "--scale", "3", "--hr-dir", s(&fixture("hr3"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn primitive_gradcheck_prints_pass_lines() {
    let o = haat(&["gradcheck", "--level", "primitives", "--seed", "4"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().count() >= 20);
    for line in stdout.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 3, "{line}");
        assert_eq!(f[1], "PASS", "{line}");
        assert!(f[2].parse::<f64>().unwrap() < 1e-4);
    }
}

#[test]
fn zero_step_training_leaves_weights_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("toy.haatw");
    let w2 = dir.path().join("after.haatw");
    let curve = dir.path().join("c.csv");
    assert_eq!(code(&haat(&["init-weights", "--seed", "5", "--out", s(&w)])), 0);
    let o = haat(&["train-toy", "--steps", "0", "--weights", s(&w), "--out-weights", s(&w2), "--curve-csv", s(&curve)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&w).unwrap(), std::fs::read(&w2).unwrap());
    assert_eq!(std::fs::read_to_string(&curve).unwrap(), "step,loss\n");
}

#[test]
fn training_is_reproducible_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let curve = dir.path().join(format!("{tag}.csv"));
        let w = dir.path().join(format!("{tag}.haatw"));
        let o = haat(&[
            "train-toy", "--steps", "4", "--seed", "1", "--hr", s(&fixture("chelsea_16.png")),
            "--curve-csv", s(&curve), "--out-weights", s(&w),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read_to_string(curve).unwrap(), std::fs::read(w).unwrap())
    };
    let (c1, w1) = run("a");
    let (c2, w2) = run("b");
    assert_eq!(c1, c2);
    assert_eq!(w1, w2);
    assert_eq!(c1.lines().count(), 5);
    assert_eq!(code(&haat(&["train-toy", "--steps", "1", "--hr", "missing.png"])), 1);
}
