use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use wsol::image_io;
use wsol::model::{checkpoint, ModelConfig, Vit};
use wsol::Tensor;

const DATA_SETS: [&str; 12] = [
    "--set",
    "area_min=0.1",
    "--set",
    "area_max=0.2",
    "--set",
    "image_size=16",
    "--set",
    "num_classes=4",
    "--set",
    "train_images=16",
    "--set",
    "test_images=8",
];

const SMALL_MODEL: [&str; 8] = [
    "--set",
    "patch_size=4",
    "--set",
    "depth=2",
    "--set",
    "embed_dim=16",
    "--set",
    "heads=2",
];

fn wsol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsol"))
        .args(args)
        .output()
        .expect("run wsol")
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

/// Relative path → SHA-256 for every file under `root`.
fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let digest = Sha256::digest(fs::read(&path).unwrap());
                out.insert(rel, format!("{digest:x}"));
            }
        }
    }
    out
}

fn gen(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    let mut args = vec!["gen-data", "--out", s(&data), "--seed", seed];
    args.extend(DATA_SETS);
    let o = wsol(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

fn train(dir: &Path, data: &Path, name: &str, epochs: &str) -> PathBuf {
    let out = dir.join(name);
    let epochs = format!("epochs={epochs}");
    let mut args = vec!["train", "--data", s(data), "--out", s(&out), "--seed", "3", "--set", &epochs];
    args.extend(SMALL_MODEL);
    args.extend(["--set", "batch_size=4"]);
    let o = wsol(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "5");
    let b = dir.path().join("again");
    fs::rename(&a, &b).unwrap();
    let a = gen(dir.path(), "5");
    let da = tree_digest(&a);
    assert_eq!(da, tree_digest(&b));
    assert!(da.contains_key("train/annotations.tsv"));
    assert_eq!(da.keys().filter(|k| k.ends_with(".ppm")).count(), 24);
    let c = gen(dir.path(), "6");
    assert_ne!(da, tree_digest(&c));
}

#[test]
fn gen_data_reports_unwritable_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("data");
    let mut args = vec!["gen-data", "--out", s(&target)];
    args.extend(DATA_SETS);
    let o = wsol(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&blocker)), "{}", stderr(&o));
}

#[test]
fn invalid_spec_and_unknown_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = wsol(&["gen-data", "--out", s(&out), "--set", "area_min=2"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = wsol(&["gen-data", "--out", s(&out), "--set", "colour=red"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs=2\nwat=1\n").unwrap();
    let o = wsol(&["gen-data", "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run.cfg:2"), "{}", stderr(&o));
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let run = train(dir.path(), &data, "run", "0");
    let cfg = ModelConfig {
        image_size: 16,
        num_classes: 4,
        patch_size: 4,
        depth: 2,
        embed_dim: 16,
        heads: 2,
        seed: 3,
        ..ModelConfig::desk()
    };
    let init = checkpoint::encode_checkpoint(&Vit::new(cfg).unwrap());
    assert_eq!(fs::read(run.join("model.ckpt")).unwrap(), init);
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn train_logs_every_epoch_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let a = train(dir.path(), &data, "a", "5");
    let b = train(dir.path(), &data, "b", "5");
    let log = fs::read_to_string(a.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch\tlr\ttrain_loss\ttrain_acc");
    assert_eq!(log.lines().count(), 6);
    assert_eq!(tree_digest(&a), tree_digest(&b));
}

#[test]
fn train_without_annotations_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let ann = data.join("train").join("annotations.tsv");
    fs::remove_file(&ann).unwrap();
    let o = wsol(&["train", "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("annotations.tsv"), "{}", stderr(&o));
    let o = wsol(&["train", "--data", s(&dir.path().join("nope"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn train_rejects_conflicting_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let o = wsol(&["train", "--data", s(&data), "--out", s(&dir.path().join("r")), "--set", "image_size=32"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn eval_writes_reports_and_checks_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let run = train(dir.path(), &data, "run", "1");
    let ckpt = run.join("model.ckpt");
    let before = fs::read(&ckpt).unwrap();
    let out = dir.path().join("eval");
    let o = wsol(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max_box_acc_v2="));
    let tsv = fs::read_to_string(out.join("report.tsv")).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "metric\tdelta\ttau\tvalue");
    assert_eq!(fs::read(&ckpt).unwrap(), before, "eval must not touch the checkpoint");

    // AR maps are class-agnostic
    let ar = |cs: &str| {
        let o2 = dir.path().join(format!("ar-{cs}"));
        let o = wsol(&[
            "eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&o2), "--method", "ar",
            "--class-source", cs,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(o2.join("report.tsv")).unwrap()
    };
    assert_eq!(ar("predicted"), ar("ground_truth"));

    let o = wsol(&["eval", "--data", s(&data), "--checkpoint", s(&dir.path().join("missing.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = wsol(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--set", "embed_dim=32"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let mut args = vec!["gen-data", "--out"];
    let big = dir.path().join("big");
    args.push(s(&big));
    args.extend(["--set", "image_size=32", "--set", "num_classes=4", "--set", "train_images=4", "--set", "test_images=4"]);
    assert!(wsol(&args).status.success());
    let o = wsol(&["eval", "--data", s(&big), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn write_test_image(path: &Path, n: usize) {
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let inside = (n / 4..n / 2).contains(&x) && (n / 3..3 * n / 4).contains(&y);
            let v = if inside { 0.9 } else { 0.2 + 0.1 * ((x * 7 + y * 3) % 5) as f64 / 5.0 };
            data.extend([v, v * 0.5, 1.0 - v]);
        }
    }
    image_io::write_ppm(path, &Tensor::new(vec![n, n, 3], data).unwrap()).unwrap();
}

#[test]
fn explain_at_full_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        image_size: 224,
        patch_size: 16,
        depth: 2,
        embed_dim: 16,
        heads: 2,
        num_classes: 3,
        seed: 2,
        ..ModelConfig::desk()
    };
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save(&Vit::new(cfg).unwrap(), &ckpt).unwrap();
    let img = dir.path().join("x.ppm");
    write_test_image(&img, 224);

    let mut outputs = Vec::new();
    for method in ["gar", "ar"] {
        let out = dir.path().join(method);
        let o = wsol(&["explain", "--image", s(&img), "--checkpoint", s(&ckpt), "--method", method, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let heat = image_io::read(&out.join("heatmap.pgm")).unwrap();
        assert_eq!((heat.width, heat.height, heat.channels), (224, 224, 1));
        assert_eq!(heat.pixels.iter().min(), Some(&0));
        assert_eq!(heat.pixels.iter().max(), Some(&255));
        let overlay = image_io::read(&out.join("overlay.ppm")).unwrap();
        assert_eq!((overlay.width, overlay.channels), (224, 3));
        let map = fs::read_to_string(out.join("map.tsv")).unwrap();
        assert_eq!(map.lines().count(), 14);
        assert!(map.lines().all(|l| l.split('\t').count() == 14));
        outputs.push(map);
    }

    let o = wsol(&["explain", "--image", s(&img), "--checkpoint", s(&ckpt), "--class", "2", "--out", s(&dir.path().join("c"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("target 2"), "{}", stdout(&o));
    let o = wsol(&["explain", "--image", s(&img), "--checkpoint", s(&ckpt), "--class", "7"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn explain_rejects_bad_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 4,
        depth: 1,
        embed_dim: 8,
        heads: 2,
        num_classes: 2,
        ..ModelConfig::desk()
    };
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save(&Vit::new(cfg).unwrap(), &ckpt).unwrap();
    let bad = dir.path().join("bad.ppm");
    fs::write(&bad, b"P6\n16 16\n255\n\x00\x01").unwrap();
    let o = wsol(&["explain", "--image", s(&bad), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let wrong = dir.path().join("wrong.ppm");
    write_test_image(&wrong, 32);
    let o = wsol(&["explain", "--image", s(&wrong), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("o"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn gradcheck_passes_and_sabotage_fails() {
    let o = wsol(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.matches("gradient [2, 5, 5]").count(), 2, "{text}");
    assert!(text.contains("PASS"));

    let o = wsol(&["gradcheck", "--set", "depth=4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("gradient [2, 5, 5]").count(), 4);

    let o = wsol(&["gradcheck", "--sabotage"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("worst entry"), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(wsol(&[]).status.code(), Some(1));
    assert_eq!(wsol(&["eval"]).status.code(), Some(1));
    assert_eq!(wsol(&["gradcheck", "--eps", "zero"]).status.code(), Some(1));
    assert_eq!(wsol(&["gradcheck", "--workers", "0"]).status.code(), Some(1));
}
