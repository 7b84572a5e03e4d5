use std::path::Path;
use std::process::{Command, Output};

use safepaint::corpus::synthetic_image;
use safepaint::masks::generate_irregular;
use safepaint::{Image, Mask, MaskBucket};

fn safepaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safepaint"))
        .args(args)
        .output()
        .expect("spawn safepaint")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let img = dir.join("img.png");
    let mask = dir.join("mask.png");
    synthetic_image(5, 0, 48).save_png(&img).unwrap();
    generate_irregular(5, MaskBucket::new(10).unwrap(), 48, 48)
        .unwrap()
        .save_png(&mask)
        .unwrap();
    (img, mask)
}

#[test]
fn make_masks_lands_in_bucket_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    for out in [&a, &b] {
        let o = safepaint(&["make-masks", "--seed", "3", "--bucket", "30-40", "--size", "64", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = Mask::load_png(&a).unwrap();
    assert!(MaskBucket::new(30).unwrap().contains(m.ratio()), "{}", m.ratio());

    let many = dir.path().join("many");
    let o = safepaint(&["make-masks", "--bucket", "10-20", "--size", "32", "--count", "3", "--out", s(&many)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_dir(&many).unwrap().count(), 3);
}

#[test]
fn invalid_bucket_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = safepaint(&["make-masks", "--bucket", "15-25", "--out", s(&dir.path().join("m.png"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = safepaint(&[
        "inpaint",
        "--image",
        s(&dir.path().join("nope.png")),
        "--mask",
        s(&dir.path().join("nope.png")),
        "--method",
        "diffusion",
        "--out",
        s(&dir.path().join("o.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn learned_method_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = fixture(dir.path());
    let o = safepaint(&[
        "inpaint", "--image", s(&img), "--mask", s(&mask), "--method", "safepaint", "--out",
        s(&dir.path().join("o.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diffusion_inpaint_keeps_background() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = fixture(dir.path());
    let out = dir.path().join("out.png");
    let o = safepaint(&[
        "inpaint", "--image", s(&img), "--mask", s(&mask), "--method", "diffusion", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b, m) = (Image::load_png(&img).unwrap(), Image::load_png(&out).unwrap(), Mask::load_png(&mask).unwrap());
    for c in 0..3 {
        for r in 0..48 {
            for x in 0..48 {
                if !m.get(r, x) {
                    assert_eq!(a.get(c, r, x), b.get(c, r, x));
                }
            }
        }
    }
}

#[test]
fn detect_writes_heatmap_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = fixture(dir.path());
    let run = |tag: &str| {
        let heat = dir.path().join(format!("heat-{tag}.png"));
        let rep = dir.path().join(format!("rep-{tag}.json"));
        let o = safepaint(&[
            "detect", "--image", s(&img), "--mask", s(&mask), "--probe", "kl", "--out-heatmap", s(&heat),
            "--out-report", s(&rep),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(heat).unwrap(), std::fs::read_to_string(rep).unwrap())
    };
    let (h1, r1) = run("a");
    let (h2, r2) = run("b");
    assert_eq!((h1, &r1), (h2, &r2));
    let v: serde_json::Value = serde_json::from_str(&r1).unwrap();
    assert_eq!(v["probe"], "kl");
    // Recorded baseline for the untouched fixture. Even with no tampering the gap
    // is far from zero: a 10% hole gives a sparse 64-bin histogram.
    let gap = v["kl_gap"].as_f64().unwrap();
    assert!((gap - KL_BASELINE).abs() < 1e-9, "{gap}");
    assert!((0.0..=1.0).contains(&v["auc"].as_f64().unwrap()));
}

const KL_BASELINE: f64 = 3.193573489070117;
