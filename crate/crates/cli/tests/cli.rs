use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use posr_core::data::{load_image, save_image, smooth_image, ColorSpace, ImagePlane, Range};
use posr_core::trainer::Checkpoint;

fn posr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_smooth(dir: &Path, name: &str, w: usize, h: usize, seed: u64) -> PathBuf {
    let p = dir.join(name);
    save_image(&smooth_image(w, h, seed).unwrap(), &p).unwrap();
    p
}

#[test]
fn degrade_sizes_manifest_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("hr");
    fs::create_dir(&input).unwrap();
    write_smooth(&input, "a.png", 96, 96, 1);
    write_smooth(&input, "b.png", 40, 32, 2);
    let out1 = dir.path().join("lr1");
    let out2 = dir.path().join("lr2");
    for out in [&out1, &out2] {
        let o = posr(&["degrade", "--in", s(&input), "--out", s(out), "--scale", "4"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = load_image(&out1.join("a.png")).unwrap();
    assert_eq!((a.width(), a.height()), (24, 24));
    let b = load_image(&out1.join("b.png")).unwrap();
    assert_eq!((b.width(), b.height()), (10, 8));
    assert_eq!(fs::read_to_string(out1.join("manifest.txt")).unwrap(), "a.png\nb.png\n");
    for name in ["a.png", "b.png", "manifest.txt"] {
        assert_eq!(fs::read(out1.join(name)).unwrap(), fs::read(out2.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn degrade_empty_dir_succeeds_with_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty");
    fs::create_dir(&input).unwrap();
    let out = dir.path().join("out");
    let o = posr(&["degrade", "--in", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("manifest.txt")).unwrap(), "");
}

#[test]
fn degrade_lists_unreadable_files_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("hr");
    fs::create_dir(&input).unwrap();
    write_smooth(&input, "good.png", 16, 16, 3);
    fs::write(input.join("broken.png"), b"not a png").unwrap();
    fs::write(input.join("junk.png"), b"\x89PNG garbage").unwrap();
    let out = dir.path().join("out");
    let o = posr(&["degrade", "--in", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("broken.png") && err.contains("junk.png"), "{err}");
    assert!(!out.exists());

    let o = posr(&["degrade", "--in", s(&dir.path().join("missing")), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn parameter_counts_match_the_ablation_table() {
    let rows: [(&[&str], f64); 7] = [
        (&["--blocks", "32"], 1.54),
        (&["--blocks", "64"], 2.74),
        (&["--channels", "16"], 0.33),
        (&["--channels", "32"], 1.29),
        (&["--no-share"], 9.86),
        (&["--no-attention"], 5.06),
        (&[], 5.14),
    ];
    let mut counts = Vec::new();
    for (flags, millions) in rows {
        let mut args = vec!["params"];
        args.extend_from_slice(flags);
        let o = posr(&args);
        assert_eq!(code(&o), 0);
        let out = stdout(&o);
        let exact: f64 = out.split_whitespace().next().unwrap().parse().unwrap();
        let m = exact / 1e6;
        assert!((m - millions).abs() <= 0.02 * millions, "{flags:?}: {out}");
        counts.push(m);
    }
    let (full, unshared, no_attention) = (counts[6], counts[4], counts[5]);
    assert!(((unshared - full) - 4.72).abs() <= 0.05 * 4.72);
    let attention = full - no_attention;
    assert!(attention >= 0.07 * 0.95 && attention <= 0.08 * 1.05, "{attention}");
    assert_eq!(stdout(&posr(&["params"])).trim(), "5136899 (5.14M)");
}

#[test]
fn train_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = posr(&["train", "--stage", "1", "--region", "2", "--output", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("region"));

    let o = posr(&["train", "--stage", "2", "--output", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stage-1 checkpoint"), "{}", stderr(&o));

    let o = posr(&["train", "--set", "generator.nonsense=3", "--output", s(&out)]);
    assert_eq!(code(&o), 1);
    let o = posr(&["train", "--set", "no-equals-sign", "--output", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn region_presets_are_logged() {
    for (region, expected) in [
        ("1", "lambda=100 eta_pixel=0.005 eta_feature=0.005"),
        ("2", "lambda=30 eta_pixel=0.005 eta_feature=0.005"),
        ("3", "lambda=10 eta_pixel=0.125 eta_feature=0.125"),
    ] {
        let o = posr(&["train", "--stage", "2", "--init", "stage1.posr", "--region", region, "--dry-run"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).lines().next().unwrap().ends_with(expected), "{}", stdout(&o));
    }
    let o = posr(&["train", "--stage", "2", "--init", "x", "--region", "4", "--dry-run"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_hr_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    fs::create_dir(&hr).unwrap();
    write_smooth(&hr, "x.png", 32, 28, 4);
    write_smooth(&hr, "y.png", 24, 24, 5);
    let gray = ImagePlane::from_fn(20, 20, ColorSpace::Y, Range::Byte, |_, y, x| ((x * 11 + y * 7) % 256) as f64).unwrap();
    save_image(&gray, &hr.join("z.png")).unwrap();
    let manifest = dir.path().join("list.txt");
    fs::write(&manifest, "# hr set\nhr/x.png\nhr/y.png\nhr/z.png\n").unwrap();
    let csv = dir.path().join("report/metrics.csv");
    let o = posr(&["eval", "--sr-dir", s(&hr), "--manifest", s(&manifest), "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "image,psnr,ssim,rmse,region");
    assert_eq!(lines.len() - 1, 3);
    for row in &lines[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1], "100.000000");
        assert_eq!(f[2], "1.000000");
        assert_eq!(f[3], "0.000000");
        assert_eq!(f[4], "1");
    }

    let o = posr(&["eval", "--sr-dir", s(&hr), "--manifest", s(&dir.path().join("nope.txt")), "--out", s(&csv)]);
    assert_eq!(code(&o), 2);
    let o = posr(&["eval", "--manifest", s(&manifest), "--out", s(&csv)]);
    assert_eq!(code(&o), 1);
}

fn tiny_config(dir: &Path, manifest: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(
        &p,
        format!(
            r#"batch_size = 2
lr_initial = 1e-3
lr_halving_points = [4]
halving_mode = "absolute"
seed = 5
log_every = 1
checkpoint_every = 3

[generator]
num_blocks = 2
channels = 8
init_scale = 0.1

[disc_pixel]
base_channels = 4
max_channels = 16
hidden = 8

[disc_feature]
base_channels = 4
max_channels = 16
hidden = 8

[extractor]
channels = [4, 8]

[data]
manifest = "{}"
patch_size = 16
stride = 16
"#,
            manifest.display()
        ),
    )
    .unwrap();
    p
}

#[test]
fn train_resume_infer_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let hr = dir.path().join("hr");
    fs::create_dir(&hr).unwrap();
    write_smooth(&hr, "p.png", 32, 32, 6);
    write_smooth(&hr, "q.png", 32, 16, 7);
    let manifest = dir.path().join("train.txt");
    fs::write(&manifest, "hr/p.png\nhr/q.png\n").unwrap();
    let config = tiny_config(dir.path(), &manifest);
    let c = s(&config);

    let full = dir.path().join("full");
    let o = posr(&["train", "--config", c, "--iterations", "6", "--output", s(&full)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(full.join("train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("iter=")).count(), 6);
    assert!(log.contains("iter=6 stage=1 loss_total="));
    assert!(full.join("ckpt_00000003.posr").exists());

    let part = dir.path().join("part");
    let o = posr(&["train", "--config", c, "--iterations", "3", "--output", s(&part)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = posr(&[
        "train",
        "--config",
        c,
        "--iterations",
        "6",
        "--output",
        s(&part),
        "--resume",
        s(&part.join("final.posr")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = Checkpoint::read(&full.join("final.posr")).unwrap();
    let b = Checkpoint::read(&part.join("final.posr")).unwrap();
    assert_eq!(a.iteration, 6);
    assert_eq!((a.params, a.optimizers, a.rng), (b.params, b.optimizers, b.rng));

    let o = posr(&["train", "--config", c, "--seed", "6", "--iterations", "6", "--resume", s(&full.join("ckpt_00000003.posr"))]);
    assert_eq!(code(&o), 1, "a different seed is a different trajectory");

    let stage2 = dir.path().join("stage2");
    let o = posr(&[
        "train",
        "--config",
        c,
        "--stage",
        "2",
        "--region",
        "3",
        "--set",
        "lr_halving_points=[]",
        "--lr",
        "1e-4",
        "--init",
        s(&full.join("final.posr")),
        "--iterations",
        "2",
        "--output",
        s(&stage2),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("lambda=10 eta_pixel=0.125 eta_feature=0.125"));
    let log = fs::read_to_string(stage2.join("train.log")).unwrap();
    assert!(log.contains("iter=2 stage=2 loss_total="), "{log}");

    let lr_dir = dir.path().join("lr");
    fs::create_dir(&lr_dir).unwrap();
    write_smooth(&lr_dir, "small.png", 9, 7, 8);
    let sr = dir.path().join("sr");
    let o = posr(&["infer", "--ckpt", s(&full.join("final.posr")), "--in", s(&lr_dir), "--out", s(&sr)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let up = load_image(&sr.join("small.png")).unwrap();
    assert_eq!((up.width(), up.height()), (36, 28));
    let single = dir.path().join("one.png");
    let o = posr(&[
        "infer",
        "--ckpt",
        s(&stage2.join("final.posr")),
        "--in",
        s(&lr_dir.join("small.png")),
        "--out",
        s(&single),
        "--tile",
        "4",
        "--overlap",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_image(&single).unwrap().width(), 36);

    let csv = dir.path().join("eval.csv");
    let saved = dir.path().join("saved");
    let o = posr(&[
        "eval",
        "--ckpt",
        s(&full.join("final.posr")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&csv),
        "--save-sr",
        s(&saved),
        "--border",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
    assert!(saved.join("q.png").exists());

    let o = posr(&["infer", "--ckpt", s(&dir.path().join("missing.posr")), "--in", s(&lr_dir), "--out", s(&sr)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selfcheck_passes() {
    let o = posr(&["selfcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS") || l.starts_with("all ")));
}
