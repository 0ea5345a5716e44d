use std::path::Path;

use peelsplat::cli::{run_with, ABLATION_ROWS, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use peelsplat::image::read_image;
use peelsplat::scene::save_scene;
use peelsplat::trainer::toy::two_surfel;
use peelsplat::Scene;

fn run(args: &[&str]) -> (i32, String) {
    let mut out: Vec<u8> = Vec::new();
    let argv = std::iter::once("peelsplat").chain(args.iter().copied());
    let code = run_with(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn make_toy_render_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("rings");
    let (code, _) = run(&["make-toy", "overlap-rings", "--out", p(&toy), "--size", "24"]);
    assert_eq!(code, EXIT_OK);
    for f in ["scene.psplat", "init.psplat", "train.json", "images/view_000.json", "images/view_000.pfm"] {
        assert!(toy.join(f).exists(), "{f} missing");
    }

    let img = dir.path().join("r.pfm");
    let (code, text) = run(&[
        "render",
        "--scene",
        p(&toy.join("scene.psplat")),
        "--camera",
        p(&toy.join("images/view_000.json")),
        "--out",
        p(&img),
        "--layers",
        "4",
        "--dump-layers",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(img.exists());
    for i in 1..=4 {
        for kind in ["depth", "alpha", "T"] {
            let f = dir.path().join(format!("r.{kind}{i}.pfm"));
            assert!(f.exists() && text.contains(p(&f)), "{kind}{i}");
        }
    }
    let t4 = read_image(dir.path().join("r.T4.pfm")).unwrap();
    assert_eq!((t4.width, t4.height, t4.channels), (24, 24, 1));

    // the hidden scene reproduces its own views
    let (code, text) = run(&[
        "eval",
        "--scene",
        p(&toy.join("scene.psplat")),
        "--images",
        p(&toy.join("images")),
        "--format",
        "csv",
    ]);
    assert_eq!(code, EXIT_OK);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "view,psnr,ssim");
    let mean: Vec<&str> = lines.last().unwrap().split(',').collect();
    assert_eq!(mean[0], "mean");
    assert!(mean[1].parse::<f64>().unwrap() > 60.0, "{text}");
}

#[test]
fn empty_scene_renders_the_background() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("t");
    assert_eq!(run(&["make-toy", "two-surfel", "--out", p(&toy), "--size", "16"]).0, EXIT_OK);
    let mut empty = Scene::empty(0);
    empty.background = [0.25, 0.5, 0.75];
    let scene = dir.path().join("empty.psplat");
    save_scene(&empty, &scene).unwrap();
    let img = dir.path().join("e.pfm");
    let cam = toy.join("images/view_000.json");
    let (code, _) = run(&["render", "--scene", p(&scene), "--camera", p(&cam), "--out", p(&img)]);
    assert_eq!(code, EXIT_OK);
    let img = read_image(&img).unwrap();
    for px in img.data.chunks(3) {
        assert_eq!(px, &[0.25, 0.5, 0.75]);
    }
}

#[test]
fn ablate_prints_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("t");
    assert_eq!(run(&["make-toy", "two-surfel", "--out", p(&toy), "--size", "16"]).0, EXIT_OK);
    let (code, text) = run(&[
        "ablate",
        "--scene",
        p(&toy.join("init.psplat")),
        "--images",
        p(&toy.join("images")),
        "--config",
        p(&toy.join("train.json")),
        "--iterations",
        "2",
        "--format",
        "csv",
    ]);
    assert_eq!(code, EXIT_OK);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for (row, name) in rows.iter().zip(ABLATION_ROWS) {
        assert!(row.starts_with(&format!("{name},")), "{row}");
    }
    let (code, md) = run(&[
        "ablate",
        "--scene",
        p(&toy.join("init.psplat")),
        "--images",
        p(&toy.join("images")),
        "--iterations",
        "1",
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| setting")).count(), 8);
}

#[test]
fn quick_verify_passes() {
    let (code, text) = run(&["verify", "all", "--quick"]);
    assert_eq!(code, EXIT_OK, "{text}");
    for suite in ["peel", "order", "grad", "leakage"] {
        assert!(text.contains(&format!("[{suite}] PASS")), "{text}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    assert_eq!(run(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(run(&["render", "--bogus"]).0, EXIT_USAGE);
    assert_eq!(run(&["verify", "everything"]).0, EXIT_USAGE);
    assert_eq!(run(&["make-toy", "teapot", "--out", "/tmp/x"]).0, EXIT_USAGE);
    let args = ["render", "--scene", "a", "--camera", "b", "--out", "c.pfm", "--layers", "5"];
    assert_eq!(run(&args).0, EXIT_USAGE);
    assert_eq!(run(&["--help"]).0, EXIT_OK);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.psplat");
    let args = ["render", "--scene", p(&missing), "--camera", "x.json", "--out", "y.pfm"];
    assert_eq!(run(&args).0, EXIT_DATA);

    // malformed config
    let toy = dir.path().join("t");
    assert_eq!(run(&["make-toy", "two-surfel", "--out", p(&toy), "--size", "16"]).0, EXIT_OK);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"layers": 7}"#).unwrap();
    let (init, images, out) = (toy.join("init.psplat"), toy.join("images"), dir.path().join("o.psplat"));
    let args = ["train", "--scene", p(&init), "--images", p(&images), "--config", p(&cfg), "--out", p(&out)];
    assert_eq!(run(&args).0, EXIT_DATA);
}

#[test]
fn train_writes_scene_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("t");
    assert_eq!(run(&["make-toy", "two-surfel", "--out", p(&toy), "--size", "16"]).0, EXIT_OK);
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"iterations": 4, "checkpoint_period": 2, "prune_period": 0}"#).unwrap();
    let out = dir.path().join("o.psplat");
    let log = dir.path().join("log.csv");
    let ck = dir.path().join("ck");
    let (code, _) = run(&[
        "--threads",
        "2",
        "train",
        "--scene",
        p(&toy.join("init.psplat")),
        "--images",
        p(&toy.join("images")),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--log",
        p(&log),
        "--checkpoints",
        p(&ck),
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(out.exists());
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 5);
    assert!(ck.join("checkpoint_000002.psplat").exists());
    assert!(ck.join("checkpoint_000004.psplat").exists());
    assert_eq!(two_surfel(16).scene.surfels.len(), peelsplat::scene::load_scene(&out).unwrap().surfels.len());
}
