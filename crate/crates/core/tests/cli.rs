use std::fs;
use std::path::Path;

use boundary_seg::cli::{main_with, CHECKPOINT_FILE, RUN_MANIFEST_FILE};
use boundary_seg::data::load_dataset;
use boundary_seg::manifest::RunManifest;
use boundary_seg::pgm::GrayImage;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["bseg"];
    full.extend_from_slice(args);
    let code = main_with(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "shape_channels=3\ndspp_channels=8\neval_every=1\n";

fn tiny_config(dir: &Path) -> String {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn train_tiny(dir: &Path, extra: &[&str]) -> (i32, String, String) {
    let cfg = tiny_config(dir);
    let mut args = vec![
        "train", "--config", &cfg, "--out-dir", p(dir), "--size", "16", "--samples", "3", "--levels", "3",
        "--base-channels", "4", "--epochs", "2", "--batch-size", "2", "--seed", "5",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn gen_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let (code, out, err) = run(&["gen", "--out-dir", p(d), "--size", "32", "--samples", "3", "--seed", "9"]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("wrote 3 samples"));
    }
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let preds = tmp.path().join("preds");
    assert_eq!(run(&["gen", "--out-dir", p(&data), "--size", "32", "--samples", "4"]).0, 0);
    fs::create_dir_all(&preds).unwrap();
    for (name, s) in load_dataset(&data).unwrap() {
        let stem = name.trim_end_matches(".bseg");
        GrayImage::from_unit(32, 32, s.mask.data()).unwrap().save(preds.join(format!("{stem}.pgm"))).unwrap();
    }
    let (code, out, err) = run(&["eval", "--data", p(&data), "--predictions", p(&preds)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("dice 1.000±0.000"), "{out}");
    assert!(out.contains("jaccard 1.000±0.000"), "{out}");
    assert!(out.contains("hausdorff 0.000±0.000"), "{out}");
    assert!(out.contains("samples 4"), "{out}");
}

#[test]
fn train_predict_eval_attn_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let (code, out, err) = train_tiny(&run_dir, &[]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("epoch    2"), "{out}");
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let manifest = RunManifest::parse(&fs::read_to_string(run_dir.join(RUN_MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.rows.len(), 2);
    assert!(!manifest.is_no_edge_ablation());
    assert_eq!(manifest.config_value("levels"), Some("3"));

    let data = tmp.path().join("data");
    assert_eq!(run(&["gen", "--out-dir", p(&data), "--size", "16", "--samples", "2"]).0, 0);
    // the model's shape comes from the manifest beside the checkpoint
    let preds = tmp.path().join("preds");
    let (code, _, err) = run(&["predict", "--checkpoint", p(&ckpt), "--data", p(&data), "--out-dir", p(&preds)]);
    assert_eq!(code, 0, "{err}");
    let (code, direct, err) = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert_eq!(code, 0, "{err}");
    let (code, via_pgm, err) = run(&["eval", "--predictions", p(&preds), "--data", p(&data)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(direct, via_pgm);

    let maps = tmp.path().join("maps");
    let (code, _, err) =
        run(&["attn", "--checkpoint", p(&ckpt), "--data", p(&data), "--out-dir", p(&maps), "--limit", "1"]);
    assert_eq!(code, 0, "{err}");
    for g in 1..=3 {
        let img = GrayImage::load(maps.join(format!("sample_00000_alpha{g}.pgm"))).unwrap();
        assert_eq!((img.width, img.height), (16, 16));
    }

    let (code, _, err) = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--levels", "4"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[param-mismatch]"), "{err}");
}

#[test]
fn training_is_idempotent_apart_from_wall_time() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(train_tiny(&a, &[]).0, 0);
    assert_eq!(train_tiny(&b, &[]).0, 0);
    assert_eq!(fs::read(a.join(CHECKPOINT_FILE)).unwrap(), fs::read(b.join(CHECKPOINT_FILE)).unwrap());
    let strip = |dir: &Path| -> Vec<String> {
        fs::read_to_string(dir.join(RUN_MANIFEST_FILE))
            .unwrap()
            .lines()
            .map(|l| match l.rsplit_once(' ') {
                Some((head, _)) if l.starts_with(|c: char| c.is_ascii_digit()) => head.to_string(),
                _ => l.to_string(),
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn ablation_is_recorded_in_the_manifest_header() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = train_tiny(tmp.path(), &["--lambda2", "0", "--lambda3", "0"]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(tmp.path().join(RUN_MANIFEST_FILE)).unwrap();
    assert!(text.lines().any(|l| l == "ablation no-edge-loss"), "{text}");
    assert!(RunManifest::parse(&text).unwrap().is_no_edge_ablation());
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    assert_eq!(train_tiny(&full, &[]).0, 0);
    let cfg = tiny_config(tmp.path());
    let common = [
        "--config", &cfg, "--size", "16", "--samples", "3", "--levels", "3", "--base-channels", "4",
        "--batch-size", "2", "--seed", "5",
    ];
    let mut first = vec!["train", "--out-dir", p(&part), "--epochs", "1"];
    first.extend_from_slice(&common);
    assert_eq!(run(&first).0, 0);
    let saved = tmp.path().join("epoch1.bckp");
    fs::copy(part.join(CHECKPOINT_FILE), &saved).unwrap();
    let mut second = vec!["train", "--out-dir", p(&part), "--epochs", "2", "--resume", p(&saved)];
    second.extend_from_slice(&common);
    let (code, _, err) = run(&second);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read(full.join(CHECKPOINT_FILE)).unwrap(), fs::read(part.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn usage_and_io_errors_have_distinct_exit_codes() {
    let (code, _, err) = run(&["train", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[usage]"), "{err}");

    let (code, _, err) = run(&["eval", "--data", "/nonexistent/dir", "--predictions", "/nonexistent/p"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[io]"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["gen", "--out-dir", p(tmp.path()), "--size", "30"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[config]"), "{err}");

    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("gradcheck"));
}

#[test]
fn gradcheck_command_passes() {
    let (code, out, err) = run(&["gradcheck"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(!out.contains("FAIL"));
}
