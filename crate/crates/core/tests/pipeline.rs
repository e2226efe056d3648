use std::path::Path;
use std::process::Command;

use coninfer::cli::{self, InferConfig, Mode, SynthLayout};
use coninfer::prior::{self, PriorConfig, TextPrototypes};
use coninfer::segmap::{self, PatchGrid};
use coninfer::simplex;
use coninfer::synth::SynthSpec;
use coninfer::tensorio::{self, TensorFile, TileManifest};
use ndarray::{s, Array2};

const BIN: &str = env!("CARGO_BIN_EXE_coninfer");

fn small_layout(tiles: usize) -> SynthLayout {
    SynthLayout {
        tiles,
        grid_rows: 4,
        grid_cols: 5,
        patch_px: 2,
    }
}

fn noisy_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        prior_noise: 0.4,
        prior_flip: 0.1,
        seed,
        ..SynthSpec::default()
    }
}

fn grid_for(m: &TileManifest) -> PatchGrid {
    PatchGrid {
        rows: m.patch_grid.rows,
        cols: m.patch_grid.cols,
        patch_px: m.patch_px,
        num_tiles: m.tiles.len(),
    }
}

fn read_priors(m: &TileManifest) -> Array2<f64> {
    let parts: Vec<Array2<f64>> = m
        .tiles
        .iter()
        .map(|t| {
            tensorio::read_tensor(m.resolve(t.priors_path.as_ref().unwrap()))
                .unwrap()
                .to_matrix()
                .unwrap()
        })
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
}

fn read_masks(dir: &Path, m: &TileManifest) -> Vec<Array2<u8>> {
    m.tiles
        .iter()
        .map(|t| tensorio::read_mask(cli::mask_path(dir, &t.id)).unwrap())
        .collect()
}

#[test]
fn prior_only_masks_are_argmax_of_priors_without_touching_features() {
    let dir = tempfile::tempdir().unwrap();
    let m = cli::cmd_synth(dir.path(), &noisy_spec(1), &small_layout(6)).unwrap();
    for t in &m.tiles {
        std::fs::remove_file(m.resolve(&t.features_path)).unwrap();
    }
    let out = dir.path().join("pred");
    let mut cfg = InferConfig::new(dir.path().join("manifest.json"), &out);
    cfg.mode = Mode::PriorOnly;
    cli::cmd_infer(&cfg).unwrap();

    let labels = simplex::argmax_rows(&read_priors(&m));
    let expected = segmap::labels_to_masks(&labels, &grid_for(&m)).unwrap();
    assert_eq!(read_masks(&out, &m), expected);
}

#[test]
fn joint_mode_requires_features() {
    let dir = tempfile::tempdir().unwrap();
    let m = cli::cmd_synth(dir.path(), &noisy_spec(1), &small_layout(2)).unwrap();
    std::fs::remove_file(m.resolve(&m.tiles[1].features_path)).unwrap();
    let cfg = InferConfig::new(dir.path().join("manifest.json"), dir.path().join("pred"));
    let err = cli::cmd_infer(&cfg).unwrap_err();
    assert!(err.to_string().contains("tiles[1].features_path"), "{err}");
}

#[test]
fn batches_follow_tile_order() {
    let dir = tempfile::tempdir().unwrap();
    cli::cmd_synth(dir.path(), &noisy_spec(2), &small_layout(12)).unwrap();
    let mut cfg = InferConfig::new(dir.path().join("manifest.json"), dir.path().join("pred"));
    cfg.batch_size = 5;
    let summary = cli::cmd_infer(&cfg).unwrap();
    assert_eq!(summary.batches, vec![0..5, 5..10, 10..12]);
    assert_eq!(summary.masks_written, 12);
}

#[test]
fn each_batch_is_solved_independently() {
    let dir = tempfile::tempdir().unwrap();
    let m = cli::cmd_synth(dir.path(), &noisy_spec(3), &small_layout(10)).unwrap();
    let prior_cfg = PriorConfig::default();
    let gmm_cfg = Default::default();
    let whole = cli::process_scene(&m, Mode::Joint, 5, 10, &prior_cfg, &gmm_cfg, false).unwrap();

    let mut second = m.clone();
    second.tiles.drain(..5);
    let alone = cli::process_scene(&second, Mode::Joint, 5, 10, &prior_cfg, &gmm_cfg, false).unwrap();
    assert_eq!(whole[1].z, alone[0].z);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let m = cli::cmd_synth(dir.path(), &noisy_spec(4), &small_layout(3)).unwrap();
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    for t in &m.tiles {
        let gt = tensorio::read_tensor(m.resolve(t.gt_path.as_ref().unwrap()))
            .unwrap()
            .to_label_image()
            .unwrap();
        tensorio::write_mask(cli::mask_path(&pred, &t.id), &gt).unwrap();
    }
    let report_path = dir.path().join("report.json");
    let report = cli::cmd_eval(&pred, &dir.path().join("manifest.json"), Some(&report_path), Some(255)).unwrap();
    assert_eq!(report.miou, 1.0);
    assert!(report.per_class.iter().all(|c| c.iou == Some(1.0)));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(json["miou"], 1.0);
    assert_eq!(json["per_class"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_without_ground_truth_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = cli::cmd_synth(dir.path(), &noisy_spec(4), &small_layout(2)).unwrap();
    m.tiles[0].gt_path = None;
    m.save(dir.path().join("manifest.json")).unwrap();
    let err = cli::cmd_eval(dir.path(), &dir.path().join("manifest.json"), None, None).unwrap_err();
    assert!(err.to_string().contains("gt_path"), "{err}");
}

#[test]
fn one_hot_priors_give_identical_output_in_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        seed: 5,
        ..SynthSpec::default()
    };
    cli::cmd_synth(dir.path(), &spec, &small_layout(8)).unwrap();
    let mut cfg = InferConfig::new(dir.path().join("manifest.json"), dir.path().join("pred"));
    let rows = cli::cmd_ablate(&cfg, Some(255)).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.miou == 1.0));

    let mut outputs = Vec::new();
    for mode in Mode::ALL {
        cfg.mode = mode;
        cfg.out = dir.path().join(mode.to_string());
        cli::cmd_infer(&cfg).unwrap();
        outputs.push(std::fs::read(cli::mask_path(&cfg.out, "tile_0003")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn priors_can_be_computed_from_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = cli::cmd_synth(dir.path(), &noisy_spec(6), &small_layout(2)).unwrap();
    // class k owns rows 2k (name) and 2k + 1 (one synonym)
    let mut protos = Array2::<f64>::zeros((8, 3));
    for k in 0..4 {
        let angle = k as f64 * 0.7;
        protos.row_mut(2 * k).assign(&ndarray::arr1(&[angle.cos(), angle.sin(), 0.2]));
        protos.row_mut(2 * k + 1).assign(&ndarray::arr1(&[angle.cos(), angle.sin(), -0.2]));
        m.classes[k].synonyms.push(format!("alt_{k}"));
    }
    tensorio::write_tensor(dir.path().join("protos.npy"), &TensorFile::from_matrix(&protos)).unwrap();
    m.prototypes_path = Some("protos.npy".into());

    let mut vlm_all = Vec::new();
    for (i, t) in m.tiles.iter_mut().enumerate() {
        let v = Array2::from_shape_fn((20, 3), |(r, c)| ((i * 20 + r) * 3 + c) as f64 % 7.0 - 3.0);
        let name = format!("{}_vlm.npy", t.id);
        tensorio::write_tensor(dir.path().join(&name), &TensorFile::from_matrix(&v)).unwrap();
        t.vlm_features_path = Some(name.into());
        t.priors_path = None;
        vlm_all.push(v);
    }
    m.save(dir.path().join("manifest.json")).unwrap();

    let out = dir.path().join("pred");
    let mut cfg = InferConfig::new(dir.path().join("manifest.json"), &out);
    cfg.mode = Mode::PriorOnly;
    cli::cmd_infer(&cfg).unwrap();

    let t = TextPrototypes::new(protos, m.prototype_owners(), 4).unwrap();
    let views: Vec<_> = vlm_all.iter().map(|v| v.view()).collect();
    let v = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
    let p = prior::encode_prior(v.view(), &t, &PriorConfig::default()).unwrap();
    let expected = segmap::labels_to_masks(&simplex::argmax_rows(&p), &grid_for(&m)).unwrap();
    assert_eq!(read_masks(&out, &m), expected);
}

#[test]
fn synth_files_reassemble_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let m = cli::cmd_synth(dir.path(), &noisy_spec(7), &small_layout(4)).unwrap();
    let scene = coninfer::synth::generate(&SynthSpec {
        n_per_cluster: 20,
        ..noisy_spec(7)
    })
    .unwrap();
    let p = read_priors(&m);
    assert_eq!(p.dim(), (80, 4));
    let x1 = tensorio::read_tensor(m.resolve(&m.tiles[1].features_path))
        .unwrap()
        .to_matrix()
        .unwrap();
    let expected = scene.x.slice(s![20..40, ..]).mapv(|v| v as f32 as f64);
    assert_eq!(x1, expected);
    let labels = tensorio::read_tensor(dir.path().join("labels.npy")).unwrap();
    assert_eq!(labels.shape(), &[80]);
}

// ---------------------------------------------------------------------------
// Binary

fn coninfer(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn binary_synth_infer_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let scene = format!("{d}/scene");
    let manifest = format!("{scene}/manifest.json");
    let pred = format!("{d}/pred");
    let trace = format!("{d}/trace.csv");

    let out = coninfer(&["synth", "--out", &scene, "--seed", "9", "--tiles", "6", "--prior-noise", "0.4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = coninfer(&[
        "infer", "--manifest", &manifest, "--out", &pred, "--batch-size", "4", "--iters", "3",
        "--trace", &trace,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = std::fs::read_to_string(&trace).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "batch,iteration,objective,max_z_delta");
    // two batches, each with J_0 plus three iterations
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[5].starts_with("1,0,"));

    let report = format!("{d}/report.json");
    let out = coninfer(&["eval", "--manifest", &manifest, "--pred", &pred, "--report", &report]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));
    assert!(Path::new(&report).exists());
}

#[test]
fn binary_ablate_prints_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    cli::cmd_synth(&scene, &noisy_spec(10), &small_layout(5)).unwrap();
    let manifest = scene.join("manifest.json");
    let out = coninfer(&["ablate", "--manifest", manifest.to_str().unwrap(), "--cov-mode", "diag"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "mode,miou");
    assert!(lines[1].starts_with("prior-only,"));
    assert!(lines[2].starts_with("decoupled,"));
    assert!(lines[3].starts_with("joint,"));
}

#[test]
fn binary_eval_reports_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let m = cli::cmd_synth(dir.path(), &noisy_spec(11), &small_layout(2)).unwrap();
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    for t in &m.tiles {
        tensorio::write_mask(cli::mask_path(&pred, &t.id), &Array2::zeros((3, 3))).unwrap();
    }
    let out = coninfer(&[
        "eval",
        "--manifest",
        dir.path().join("manifest.json").to_str().unwrap(),
        "--pred",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape error"));
}

#[test]
fn binary_rejects_bad_input_with_exit_one() {
    let out = coninfer(&["infer", "--manifest", "/nonexistent/manifest.json", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    let out = coninfer(&["infer", "--manifest", "m.json", "--out", "o", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(1));
    let out = coninfer(&["infer", "--manifest", "m.json", "--out", "o", "--iters", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn binary_reports_singular_covariance_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        dim: 64,
        ..noisy_spec(12)
    };
    let m = cli::cmd_synth(dir.path(), &spec, &small_layout(2)).unwrap();
    // ten points per component in 64 dimensions, scaled so that rounding
    // dwarfs the absolute covariance floor
    for t in &m.tiles {
        let path = m.resolve(&t.features_path);
        let x = tensorio::read_tensor(&path).unwrap().to_matrix().unwrap() * 1e15;
        tensorio::write_tensor(&path, &TensorFile::from_matrix(&x)).unwrap();
    }
    let out = coninfer(&[
        "infer",
        "--manifest",
        dir.path().join("manifest.json").to_str().unwrap(),
        "--out",
        dir.path().join("pred").to_str().unwrap(),
        "--reg-eps",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
