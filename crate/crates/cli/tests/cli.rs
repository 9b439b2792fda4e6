use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blurfield::{canonicalize, ImageBuffer, MotionField};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blurfield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn sharp_image(dir: &TempDir, w: usize, h: usize) -> PathBuf {
    let img = ImageBuffer::from_fn(w, h, 3, |x, y, c| {
        (0.5 + 0.4 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos())).clamp(0.0, 1.0)
    });
    let path = dir.path().join("sharp.png");
    img.save_png(&path).unwrap();
    path
}

fn field_file(dir: &TempDir, name: &str, w: usize, h: usize, length: f64) -> PathBuf {
    let path = dir.path().join(name);
    MotionField::uniform(w, h, canonicalize(length, 30.0).unwrap()).save(&path).unwrap();
    path
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["estimate", "deblur", "synth", "eval", "export-patches", "fit-gmm", "parity"] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
    let o = run(&["synth", "rotation", "--help"]);
    assert!(stdout(&o).contains("--omega"));
}

#[test]
fn unknown_flag_exits_2() {
    assert_eq!(run(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn eval_equal_fields() {
    let dir = TempDir::new().unwrap();
    let f = field_file(&dir, "f.mfld", 8, 6, 5.0);
    let o = run(&["eval", "--est", p(&f), "--gt", p(&f)]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["mse_motion=0", "psnr_motion=inf", "mse_ker=0"]);
}

#[test]
fn eval_reports_image_psnr() {
    let dir = TempDir::new().unwrap();
    let f = field_file(&dir, "f.mfld", 8, 8, 5.0);
    let g = field_file(&dir, "g.mfld", 8, 8, 7.0);
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    ImageBuffer::filled(8, 8, 3, 0.5).save_png(&a).unwrap();
    ImageBuffer::from_u8(8, 8, 3, &[153; 192]).unwrap().save_png(&b).unwrap();
    let o = run(&["eval", "--est", p(&f), "--gt", p(&g), "--image", p(&a), "--reference", p(&b)]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mse: f64 = out.lines().find_map(|l| l.strip_prefix("mse_motion=")).unwrap().parse().unwrap();
    assert!((mse - 2.0).abs() < 1e-5, "{out}");
    assert!(out.lines().any(|l| l.starts_with("psnr_deblur=")));
    assert!(out.lines().all(|l| l.split_once('=').is_some()));
}

#[test]
fn eval_dimension_mismatch_exits_2() {
    let dir = TempDir::new().unwrap();
    let f = field_file(&dir, "f.mfld", 8, 6, 5.0);
    let g = field_file(&dir, "g.mfld", 6, 8, 5.0);
    assert_eq!(run(&["eval", "--est", p(&f), "--gt", p(&g)]).status.code(), Some(2));
}

#[test]
fn missing_and_malformed_inputs() {
    let dir = TempDir::new().unwrap();
    let img = sharp_image(&dir, 40, 40);
    let missing = dir.path().join("nope.cnnw");
    let out = dir.path().join("f.mfld");
    let o = run(&["estimate", "--image", p(&img), "--weights", p(&missing), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cnnw"));

    let junk = dir.path().join("junk.cnnw");
    std::fs::write(&junk, b"CNNW\x09\0\0\0").unwrap();
    let o = run(&["estimate", "--image", p(&img), "--weights", p(&junk), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(4));

    let o = run(&["estimate", "--image", p(&img), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_then_estimate_with_oracle() {
    let dir = TempDir::new().unwrap();
    let img = sharp_image(&dir, 48, 40);
    let o = run(&["synth", "rotation", "--omega", "0.05", "--image", p(&img)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let blurred = dir.path().join("sharp_blurred.png");
    let gt = dir.path().join("sharp_field.mfld");
    assert!(blurred.exists() && gt.exists());
    let field = MotionField::load(&gt).unwrap();
    assert_eq!(field.dims(), (48, 40));

    let est = dir.path().join("est.mfld");
    let conf = dir.path().join("est.conf");
    let o = run(&[
        "estimate", "--image", p(&blurred), "--oracle", p(&gt), "--epsilon", "0", "--out", p(&est), "--confidence",
        p(&conf),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(MotionField::load(&est).unwrap().dims(), (48, 40));
    assert!(std::fs::metadata(&conf).unwrap().len() > 16);
}

#[test]
fn synth_translation_rejects_long_motion() {
    let dir = TempDir::new().unwrap();
    let img = sharp_image(&dir, 20, 20);
    let o = run(&["synth", "translation", "--image", p(&img), "--u", "30", "--v", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn deblur_runs_and_copies_with_zero_stages() {
    let dir = TempDir::new().unwrap();
    let img = sharp_image(&dir, 24, 20);
    let f = field_file(&dir, "f.mfld", 24, 20, 5.0);
    let out = dir.path().join("out.png");
    let o = run(&["deblur", "--image", p(&img), "--field", p(&f), "--out", p(&out), "--beta-iters", "0"]);
    assert!(o.status.success());
    assert_eq!(ImageBuffer::load_png(&out).unwrap(), ImageBuffer::load_png(&img).unwrap());

    let o = run(&["deblur", "--image", p(&img), "--field", p(&f), "--out", p(&out), "--beta-iters", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(ImageBuffer::load_png(&out).unwrap().dims(), (24, 20));

    let wrong = field_file(&dir, "w.mfld", 20, 24, 5.0);
    let o = run(&["deblur", "--image", p(&img), "--field", p(&wrong), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_patches_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let img = sharp_image(&dir, 64, 64);
    let a = dir.path().join("a.ptch");
    let b = dir.path().join("b.ptch");
    for out in [&a, &b] {
        let o = run(&["export-patches", "--images", p(&img), "--count", "73", "--seed", "4", "--out", p(out)]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("records=73"));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.len(), 8 + 73 * 2701);
}

#[test]
fn fit_gmm_writes_a_prior() {
    let dir = TempDir::new().unwrap();
    let img = sharp_image(&dir, 40, 40);
    let out = dir.path().join("p.gmmp");
    let o = run(&[
        "fit-gmm", "--images", p(&img), "--patches", "300", "--components", "2", "--max-iter", "5", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("components="));
    assert_eq!(std::fs::metadata(&out).unwrap().len(), 12 + 2 * 4161 * 4);
}
