//! Drives the compiled `masklab` binary the way a shell user would and
//! checks files, stdout, and exit codes against direct library calls.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use masklab_cli::boxes::write_boxes;
use masklab_cli::lmt::{read_lmt, typed_lookup, write_lmt, NamedTensor};
use masklab_cli::raster::{read_labels, write_labels};
use masklab_core::assembly::{assemble_instance, AssemblyConfig, BoundingBox};
use masklab_core::metrics::{best_dice, LabelImage};
use masklab_core::refine::{refine_mask, PointPredictor, RefineConfig};
use masklab_core::Tensor;

fn masklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masklab"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("tmp paths are utf-8")
}

/// Deterministic filler so fixtures need no RNG plumbing.
fn ramp(shape: Vec<usize>, scale: f32, offset: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| offset + i as f32 * scale).collect()).unwrap()
}

struct AssembleFixture {
    dir: tempfile::TempDir,
    bases_path: PathBuf,
    coeffs_path: PathBuf,
    boxes_path: PathBuf,
    config_path: PathBuf,
    bases: Tensor<f32>,
    coeffs: Tensor<f32>,
    boxes: Vec<BoundingBox>,
    cfg: AssemblyConfig,
}

fn assemble_fixture() -> AssembleFixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AssemblyConfig { base_resolution: 8, coeff_resolution: 4, num_bases: 2 };
    let bases = ramp(vec![2, 16, 16], 0.01, -1.3);
    let coeffs = ramp(vec![3, 2, 4, 4], 0.05, -0.8);
    let boxes = vec![
        BoundingBox::new(1.0, 2.0, 9.5, 11.0, 0.9).unwrap(),
        BoundingBox::new(0.0, 0.0, 16.0, 16.0, 0.8).unwrap(),
        BoundingBox::new(4.25, 3.75, 7.0, 9.0, 0.7).unwrap(),
    ];

    let bases_path = dir.path().join("bases.lmt");
    let coeffs_path = dir.path().join("coeffs.lmt");
    let boxes_path = dir.path().join("boxes.csv");
    let config_path = dir.path().join("cfg.json");
    write_lmt(&bases_path, &[NamedTensor::new("bases", bases.clone())]).unwrap();
    write_lmt(&coeffs_path, &[NamedTensor::new("coefficients", coeffs.clone())]).unwrap();
    write_boxes(&boxes_path, &boxes).unwrap();
    std::fs::write(
        &config_path,
        r#"{"assembly": {"base_resolution": 8, "coeff_resolution": 4, "num_bases": 2}}"#,
    )
    .unwrap();

    AssembleFixture { dir, bases_path, coeffs_path, boxes_path, config_path, bases, coeffs, boxes, cfg }
}

#[test]
fn assemble_matches_direct_library_calls() {
    let f = assemble_fixture();
    let out_dir = f.dir.path().join("out");
    let out = masklab(&[
        "assemble",
        "--bases", path_str(&f.bases_path),
        "--coeffs", path_str(&f.coeffs_path),
        "--boxes", path_str(&f.boxes_path),
        "--config", path_str(&f.config_path),
        "--out", path_str(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out), format!("wrote 3 instances to {}\n", out_dir.display()));

    let stride = 2 * 4 * 4;
    for (i, bbox) in f.boxes.iter().enumerate() {
        let slice = f.coeffs.data()[i * stride..(i + 1) * stride].to_vec();
        let coeff = Tensor::new(vec![2, 4, 4], slice).unwrap();
        let want = assemble_instance(&f.bases, &coeff, bbox, &f.cfg).unwrap();

        let records = read_lmt(out_dir.join(format!("instance_{i:03}.lmt"))).unwrap();
        let logits = typed_lookup::<f32>(&records, "logits", &out_dir).unwrap();
        assert_eq!(logits.shape(), &[8, 8]);
        let same_bits = logits
            .data()
            .iter()
            .zip(want.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits, "instance {i} logits differ from the library result");

        let raster = read_labels(out_dir.join(format!("instance_{i:03}.png"))).unwrap();
        for (&id, &l) in raster.ids().iter().zip(want.data()) {
            assert_eq!(id == 1, l > 0.0);
        }
    }
}

#[test]
fn assemble_without_boxes_writes_an_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let boxes_path = dir.path().join("boxes.csv");
    std::fs::write(&boxes_path, "x1,y1,x2,y2,score\n").unwrap();
    let out_dir = dir.path().join("out");

    // The tensor packs are never opened when there is nothing to assemble.
    let out = masklab(&[
        "assemble",
        "--bases", path_str(&dir.path().join("missing_bases.lmt")),
        "--coeffs", path_str(&dir.path().join("missing_coeffs.lmt")),
        "--boxes", path_str(&boxes_path),
        "--out", path_str(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out), format!("wrote 0 instances to {}\n", out_dir.display()));
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 0);
}

#[test]
fn assemble_rejects_wrong_basis_counts_with_exit_2() {
    let f = assemble_fixture();

    // Default config expects K=4; the fixture packs carry K=2.
    let out = masklab(&[
        "assemble",
        "--bases", path_str(&f.bases_path),
        "--coeffs", path_str(&f.coeffs_path),
        "--boxes", path_str(&f.boxes_path),
        "--out", path_str(&f.dir.path().join("out_a")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("K mismatch"), "stderr: {}", stderr_of(&out));

    // Matching bases but coefficient stacks with the wrong K.
    let bad_coeffs = f.dir.path().join("bad_coeffs.lmt");
    write_lmt(
        &bad_coeffs,
        &[NamedTensor::new("coefficients", ramp(vec![3, 5, 4, 4], 0.05, -0.8))],
    )
    .unwrap();
    let out = masklab(&[
        "assemble",
        "--bases", path_str(&f.bases_path),
        "--coeffs", path_str(&bad_coeffs),
        "--boxes", path_str(&f.boxes_path),
        "--config", path_str(&f.config_path),
        "--out", path_str(&f.dir.path().join("out_b")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("K mismatch"), "stderr: {}", stderr_of(&out));
}

struct RefineFixture {
    dir: tempfile::TempDir,
    coarse_path: PathBuf,
    features_path: PathBuf,
    params_path: PathBuf,
    coarse: Tensor<f32>,
    features: Tensor<f32>,
    predictor: PointPredictor<f32>,
}

/// Coarse logits, features, and a zero predictor on disk. All coarse values
/// are strictly positive so a written zero logit is always visible.
fn refine_fixture() -> RefineFixture {
    let dir = tempfile::tempdir().unwrap();
    let coarse = Tensor::from_fn(vec![8, 8], |i| {
        1.0 + 0.01 * (i[0] * 8 + i[1]) as f32 + 0.3 * ((i[0] * 3 + i[1] * 7) % 5) as f32
    })
    .unwrap();
    let features = ramp(vec![3, 16, 16], 0.002, 0.1);
    let predictor = PointPredictor::<f32>::zeros(3, 4, 2).unwrap();

    let coarse_path = dir.path().join("coarse.lmt");
    let features_path = dir.path().join("features.lmt");
    let params_path = dir.path().join("params.lmt");
    write_lmt(&coarse_path, &[NamedTensor::new("logits", coarse.clone())]).unwrap();
    write_lmt(&features_path, &[NamedTensor::new("features", features.clone())]).unwrap();
    let mut records = Vec::new();
    for (i, layer) in predictor.layers.iter().enumerate() {
        records.push(NamedTensor::new(
            format!("predictor.layer{i}.weight"),
            layer.weights.clone(),
        ));
        let bias = Tensor::new(vec![layer.bias.len()], layer.bias.clone()).unwrap();
        records.push(NamedTensor::new(format!("predictor.layer{i}.bias"), bias));
    }
    write_lmt(&params_path, &records).unwrap();

    RefineFixture { dir, coarse_path, features_path, params_path, coarse, features, predictor }
}

fn run_refine(f: &RefineFixture, config: &str, out_dir: &Path) -> Output {
    let config_path = f.dir.path().join("refine_cfg.json");
    std::fs::write(&config_path, config).unwrap();
    masklab(&[
        "refine",
        "--coarse", path_str(&f.coarse_path),
        "--features", path_str(&f.features_path),
        "--params", path_str(&f.params_path),
        "--config", path_str(&config_path),
        "--out", path_str(out_dir),
    ])
}

#[test]
fn refine_with_zero_steps_is_the_identity() {
    let f = refine_fixture();
    let out_dir = f.dir.path().join("out");
    let out = run_refine(&f, r#"{"refine": {"steps": 0, "num_points": 6, "hidden": 4, "num_layers": 2}}"#, &out_dir);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out), format!("refined to 8x8 in {}\n", out_dir.display()));

    let records = read_lmt(out_dir.join("refined.lmt")).unwrap();
    let refined = typed_lookup::<f32>(&records, "logits", &out_dir).unwrap();
    assert_eq!(refined.shape(), f.coarse.shape());
    for (a, b) in refined.data().iter().zip(f.coarse.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn refine_matches_the_library_and_touches_only_selected_points() {
    let f = refine_fixture();
    let out_dir = f.dir.path().join("out");
    let n = 6usize;
    let out = run_refine(&f, r#"{"refine": {"steps": 1, "num_points": 6, "hidden": 4, "num_layers": 2}}"#, &out_dir);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out), format!("refined to 16x16 in {}\n", out_dir.display()));

    let cfg = RefineConfig { steps: 1, num_points: n, hidden: 4, num_layers: 2, ..RefineConfig::default() };
    let want = refine_mask(&f.coarse, &f.features, &f.predictor, &cfg).unwrap();
    let records = read_lmt(out_dir.join("refined.lmt")).unwrap();
    let refined = typed_lookup::<f32>(&records, "logits", &out_dir).unwrap();
    assert_eq!(refined.shape(), &[16, 16]);
    for (a, b) in refined.data().iter().zip(want.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    // A zero predictor leaves bilinear upsampling intact everywhere except
    // the selected points, which it re-classifies to logit 0.
    let up = masklab_core::tensor::resize_bilinear(
        &f.coarse.with_shape(vec![1, 1, 8, 8]).unwrap(),
        16,
        16,
    )
    .unwrap()
    .with_shape(vec![16, 16])
    .unwrap();
    let mut touched = 0;
    for (a, b) in refined.data().iter().zip(up.data()) {
        if a.to_bits() != b.to_bits() {
            assert_eq!(*a, 0.0, "re-classified points carry the predictor's logit");
            touched += 1;
        }
    }
    assert_eq!(touched, n);
}

#[test]
fn bestdice_reports_the_library_score_and_valid_json() {
    let dir = tempfile::tempdir().unwrap();
    let gt = LabelImage::new(
        6,
        4,
        vec![
            1, 1, 0, 0, 2, 2,
            1, 1, 0, 0, 2, 2,
            0, 0, 3, 3, 0, 0,
            0, 0, 3, 3, 0, 0,
        ],
    )
    .unwrap();
    let pred = LabelImage::new(
        6,
        4,
        vec![
            5, 5, 5, 0, 9, 9,
            5, 5, 0, 0, 9, 0,
            0, 0, 7, 7, 0, 0,
            0, 0, 0, 7, 0, 0,
        ],
    )
    .unwrap();
    let gt_path = dir.path().join("gt.png");
    let pred_path = dir.path().join("pred.png");
    write_labels(&gt_path, &gt).unwrap();
    write_labels(&pred_path, &pred).unwrap();

    let report_path = dir.path().join("report.json");
    let out = masklab(&[
        "bestdice",
        "--pred", path_str(&pred_path),
        "--gt", path_str(&gt_path),
        "--report", path_str(&report_path),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    let (first, rest) = text.split_once('\n').unwrap();

    let want = best_dice(&pred, &gt).unwrap();
    assert_eq!(first, format!("BestDice {:.2}", want.score));

    let json: serde_json::Value = serde_json::from_str(rest).unwrap();
    assert_eq!(json["score"].as_f64(), Some(want.score));
    assert_eq!(json["symmetric"].as_bool(), Some(false));
    assert_eq!(
        json["forward"]["per_instance"].as_array().unwrap().len(),
        want.gt_instances
    );
    assert_eq!(std::fs::read_to_string(&report_path).unwrap(), rest.trim_end());

    // Same raster on both sides scores a perfect 100.00.
    let out = masklab(&["bestdice", "--pred", path_str(&gt_path), "--gt", path_str(&gt_path)]);
    assert!(stdout_of(&out).starts_with("BestDice 100.00\n"));

    // A blank prediction scores 0.00 against any ground truth.
    let blank_path = dir.path().join("blank.png");
    write_labels(&blank_path, &LabelImage::new(6, 4, vec![0; 24]).unwrap()).unwrap();
    let out = masklab(&["bestdice", "--pred", path_str(&blank_path), "--gt", path_str(&gt_path)]);
    assert!(stdout_of(&out).starts_with("BestDice 0.00\n"));

    let out = masklab(&[
        "bestdice",
        "--pred", path_str(&pred_path),
        "--gt", path_str(&gt_path),
        "--symmetric",
    ]);
    let reverse = best_dice(&gt, &pred).unwrap();
    let sym = want.score.min(reverse.score);
    assert!(stdout_of(&out).starts_with(&format!("SymmetricBestDice {sym:.2}\n")));
}

#[test]
fn synth_writes_the_same_bytes_on_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let run = |out_dir: &Path| {
        masklab(&[
            "synth",
            "--seed", "7",
            "--leaves", "5",
            "--out", path_str(out_dir),
        ])
    };
    let first = run(&a);
    let second = run(&b);
    assert_eq!(first.status.code(), Some(0), "stderr: {}", stderr_of(&first));
    assert!(stdout_of(&first).starts_with("scene seed 7: 5 boxes"));
    assert_eq!(first.stdout, second.stdout);
    for name in ["labels.png", "boxes.csv", "features.lmt"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between runs"
        );
    }

    let labels = read_labels(a.join("labels.png")).unwrap();
    assert_eq!(labels.instance_ids(), vec![1, 2, 3, 4, 5]);
}

#[test]
fn bad_invocations_exit_2() {
    let out = masklab(&[] as &[&str]);
    assert_eq!(out.status.code(), Some(2));

    let out = masklab(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));

    let out = masklab(&["bestdice", "--pred", "/nonexistent.png", "--gt", "/nonexistent.png"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = masklab(&["synth", "--size", "17", "--out", path_str(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("error:"));

    let out = masklab(&["gradcheck", "--seeds", "0"]);
    assert_eq!(out.status.code(), Some(2));

    // --help is not an error.
    let out = masklab(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}
