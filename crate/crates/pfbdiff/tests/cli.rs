use std::path::Path;
use std::process::{Command, Output};

use pfbdiff::error::ErrorBody;
use pfbdiff::image_io;
use pfbdiff_core::Tensor;

fn pfbdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfbdiff")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_inputs(dir: &Path, image: (usize, usize), mask: (usize, usize)) {
    let img = Tensor::from_fn(&[3, image.0, image.1], |i| ((i * 37) % 255) as f32 / 127.5 - 1.0);
    let m = Tensor::from_fn(&[mask.0, mask.1], |i| (i % 2) as f32);
    image_io::write_image(&dir.join("in.ppm"), &img).unwrap();
    std::fs::write(dir.join("mask.pgm"), image_io::encode_mask(&m).unwrap()).unwrap();
}

fn error_body(out: &Output) -> ErrorBody {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error on stderr");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not a JSON error body ({e}): {stderr}"))
}

fn edit_args<'a>(dir: &'a Path, out: &'a str) -> Vec<String> {
    [
        "edit",
        "--image",
        path(&dir.join("in.ppm")),
        "--mask",
        path(&dir.join("mask.pgm")),
        "--source-prompt",
        "a dog on a sofa",
        "--target-prompt",
        "a cat on a sofa",
        "--steps",
        "4",
        "--out",
        out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn selftest_passes() {
    let out = pfbdiff(&["selftest", "--runs", "2000"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 6, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn edit_writes_a_ppm_of_the_input_size() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), (8, 12), (8, 12));
    let out_path = dir.path().join("out.ppm");
    let args = edit_args(dir.path(), path(&out_path));
    let out = pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let raster = image_io::decode(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!((raster.channels, raster.height, raster.width), (3, 8, 12));
}

#[test]
fn mismatched_mask_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), (8, 8), (4, 8));
    let out_path = dir.path().join("out.ppm");
    let args = edit_args(dir.path(), path(&out_path));
    let out = pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_body(&out).code, "mask_shape");
    assert!(!out_path.exists());
}

#[test]
fn missing_am_word_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), (8, 8), (8, 8));
    let out_path = dir.path().join("out.ppm");
    let mut args = edit_args(dir.path(), path(&out_path));
    args.extend(["--am-word".into(), "giraffe".into()]);
    let out = pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    let body = error_body(&out);
    assert_eq!(body.code, "word_not_found");
    assert!(body.violations.iter().any(|v| v.field == "am_words"));
}

#[test]
fn config_file_overrides_and_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), (8, 8), (8, 8));
    let out_path = dir.path().join("out.ppm");

    std::fs::write(dir.path().join("bad.json"), r#"{"stepz": 3}"#).unwrap();
    let mut args = edit_args(dir.path(), path(&out_path));
    args.extend(["--config".into(), path(&dir.path().join("bad.json")).into()]);
    let out = pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_body(&out).code, "bad_config");

    std::fs::write(dir.path().join("ok.json"), r#"{"mode": "background", "pfb_blocks": null}"#).unwrap();
    let mut args = edit_args(dir.path(), path(&out_path));
    args.extend(["--config".into(), path(&dir.path().join("ok.json")).into()]);
    let out = pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreadable_image_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), (8, 8), (8, 8));
    std::fs::write(dir.path().join("in.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let out_path = dir.path().join("out.ppm");
    let args = edit_args(dir.path(), path(&out_path));
    let out = pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_body(&out).code, "image_format");
}

#[test]
fn weights_file_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), (8, 8), (8, 8));
    let weights = dir.path().join("w.pfbw");
    let out = pfbdiff(&["make-weights", "--seed", "24301", "--out", path(&weights)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // 24301 = 0x5eed, the built-in weights: loading them must not change the result.
    let a = dir.path().join("a.ppm");
    let b = dir.path().join("b.ppm");
    let args = edit_args(dir.path(), path(&a));
    assert!(pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>()).status.success());
    let mut args = edit_args(dir.path(), path(&b));
    args.extend(["--weights".into(), path(&weights).into()]);
    assert!(pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>()).status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());

    std::fs::write(&weights, b"nope").unwrap();
    let mut args = edit_args(dir.path(), path(&dir.path().join("c.ppm")));
    args.extend(["--weights".into(), path(&weights).into()]);
    let out = pfbdiff(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_body(&out).code, "weights");
}

#[test]
fn reconstruct_reports_its_error() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), (8, 8), (8, 8));
    let out_path = dir.path().join("rec.ppm");
    let out = pfbdiff(&[
        "reconstruct",
        "--image",
        path(&dir.path().join("in.ppm")),
        "--prompt",
        "a dog",
        "--steps",
        "3",
        "--out",
        path(&out_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_path.exists());
}
