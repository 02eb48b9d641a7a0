use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mocca_core::data::{extract_patches, save_png, ManifestEntry, Manifest, Split};
use mocca_core::diffcore::Tensor;
use mocca_core::model::{build_autoencoder, lenet_like, random_tensor, PresetParams, SelectorKind};
use mocca_core::objective::{estimate_centroids, BoundaryMode, LayerSet};
use mocca_core::scoring::{fmt_sig9, score_batch};
use mocca_core::training::{save_checkpoint, TrainConfig};
use tempfile::TempDir;

const CONFIG: &str = r#"
[data]
manifest = "data/manifest.csv"
channels = 1

[synthetic]
kind = "blobs"
depth = "highlevel"
n_train = 128
n_test_normal = 40
n_test_anomalous = 40
seed = 0

[model]
preset = "lenet_like"
input_shape = [16, 16, 1]
base_width = 4
code_size = 8
kernel = 3

[train]
stage1_epochs = 3
stage2_epochs = 3
batch_size = 32
boundary = "soft"
seed = 0
"#;

fn mocca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mocca")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = mocca(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn fails(args: &[&str]) -> String {
    let o = mocca(args);
    assert!(!o.status.success(), "{args:?} succeeded");
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A temp dir with `run.toml` (plus `extra` appended) and the synthetic data it names.
fn workspace(extra: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("{CONFIG}{extra}")).unwrap();
    ok(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("data"))]);
    (dir, cfg)
}

fn read_scores(path: &Path) -> BTreeMap<String, f64> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect()
}

fn summary(dir: &Path) -> BTreeMap<String, String> {
    let mut rd = csv::Reader::from_path(dir.join("eval/summary.csv")).unwrap();
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string())
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, format!("{CONFIG}\n[score]\nrecon_wieght = 2.0\n")).unwrap();
    let out = dir.path().join("out");
    let err = fails(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(err.contains("recon_wieght"), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_manifest_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let err = fails(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(err.contains("manifest.csv"), "{err}");
    assert!(!out.exists());
}

#[test]
fn train_score_eval_pipeline() {
    let (dir, cfg) = workspace("");
    let d = dir.path();
    let run = d.join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    for f in ["checkpoint.mocc", "train_log.csv", "radius_log.csv", "config.toml", "config.input.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ck = run.join("checkpoint.mocc");

    // rerun is byte-identical
    let again = d.join("again");
    ok(&["train", "--config", s(&cfg), "--out", s(&again)]);
    assert_eq!(files(&run), files(&again));

    let err = fails(&["score", "--checkpoint", s(&ck), "--config", s(&cfg), "--layers", "3", "--out", s(&d.join("x"))]);
    assert!(err.contains("differ"), "{err}");

    let test_dir = d.join("test_scores");
    ok(&["score", "--checkpoint", s(&ck), "--config", s(&cfg), "--out", s(&test_dir)]);
    let train_dir = d.join("train_scores");
    ok(&["score", "--checkpoint", s(&ck), "--config", s(&cfg), "--split", "train", "--out", s(&train_dir)]);
    let test = read_scores(&test_dir.join("scores.csv"));
    let train = read_scores(&train_dir.join("scores.csv"));
    assert_eq!((test.len(), train.len()), (80, 128));
    let anomalous: Vec<f64> = test.iter().filter(|(k, _)| k.contains("anomal")).map(|(_, v)| *v).collect();
    assert_eq!(anomalous.len(), 40);
    assert!(median(train.values().copied().collect()) < median(anomalous));

    let manifest = d.join("data/manifest.csv");
    let eval = d.join("eval_out");
    ok(&["eval", "--scores", s(&test_dir.join("scores.csv")), "--manifest", s(&manifest), "--out", s(&eval)]);
    let sum = summary(&eval);
    let auc: f64 = sum["auc"].parse().unwrap();
    assert!((0.5..=1.0).contains(&auc), "{auc}");
    assert_eq!(sum["n_pos"], "40");
    let sep = std::fs::read_to_string(eval.join("eval/layer_separation.csv")).unwrap();
    assert_eq!(sep.lines().count(), 5);
}

fn write_manifest(dir: &Path, entries: &[(&str, Split, u8)]) -> PathBuf {
    let path = dir.join("manifest.csv");
    Manifest {
        root: dir.to_path_buf(),
        entries: entries
            .iter()
            .map(|&(p, split, label)| ManifestEntry {
                path: p.to_string(),
                split,
                label,
            })
            .collect(),
    }
    .write(&path)
    .unwrap();
    path
}

#[test]
fn eval_fixture_and_id_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = write_manifest(
        d,
        &[
            ("a.png", Split::Test, 1),
            ("b.png", Split::Test, 1),
            ("c.png", Split::Test, 0),
            ("d.png", Split::Test, 0),
            ("t.png", Split::Train, 0),
        ],
    );
    let scores = d.join("scores.csv");
    std::fs::write(&scores, "sample_id,gamma\na.png,0.9\nb.png,0.4\nc.png,0.5\nd.png,0.1\n").unwrap();
    let out = d.join("out");
    ok(&["eval", "--scores", s(&scores), "--manifest", s(&manifest), "--out", s(&out)]);
    let sum = summary(&out);
    assert_eq!(sum["auc"], "0.750000000000");
    assert_eq!(sum["max_ba"], "0.750000000000");
    for f in ["cdf_normal.csv", "cdf_anomalous.csv"] {
        let text = std::fs::read_to_string(out.join("eval").join(f)).unwrap();
        let ys: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] <= w[1]), "{f}");
        assert_eq!(*ys.last().unwrap(), 1.0);
    }

    let bad = d.join("bad.csv");
    std::fs::write(&bad, "sample_id,gamma\na.png,0.9\nghost.png,0.4\nc.png,0.5\nd.png,0.1\n").unwrap();
    let err = fails(&["eval", "--scores", s(&bad), "--manifest", s(&manifest), "--out", s(&d.join("o2"))]);
    assert!(err.contains("ghost.png") && err.contains("b.png"), "{err}");
    assert!(!d.join("o2").exists());
}

#[test]
fn patch_mode_scores_each_image_by_its_worst_patch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = PresetParams {
        base_width: 2,
        code_size: 4,
        kernel: 3,
        residual_blocks: 1,
    };
    let arch = lenet_like(&[64, 64, 1], &p).unwrap();
    let sel = arch.uniform_selectors(SelectorKind::AvgPool).unwrap();
    let model = build_autoencoder(&arch, &sel, 0).unwrap();
    let ls = LayerSet::new([2, 3]).unwrap();
    let spheres = estimate_centroids(&model, &random_tensor(&[8, 64, 64, 1], 0.0, 1.0, 1), &ls, 0.1, 1e-6, 8).unwrap();
    let ck = d.join("ck.mocc");
    let cfg = TrainConfig {
        boundary: BoundaryMode::Hard,
        batch_size: 16,
        ..Default::default()
    };
    save_checkpoint(&ck, &model, &spheres, &cfg).unwrap();

    let mut images = Vec::new();
    for (k, name) in ["one.png", "two.png"].iter().enumerate() {
        let raw = random_tensor(&[512, 512, 1], 0.0, 1.0, 10 + k as u64);
        // round through 8 bits as the PNG does
        let img = Tensor::new(vec![512, 512, 1], raw.data().iter().map(|v| (v * 255.0).round() / 255.0).collect()).unwrap();
        save_png(&d.join(name), &img).unwrap();
        images.push(img);
    }
    let manifest = write_manifest(d, &[("one.png", Split::Test, 0), ("two.png", Split::Test, 1)]);
    let out = d.join("out");
    ok(&["score", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--patch", "--out", s(&out)]);
    let scores = read_scores(&out.join("scores.csv"));
    assert_eq!(scores.len(), 2);

    for (name, img) in ["one.png", "two.png"].iter().zip(&images) {
        let grid = extract_patches(name, img, 64).unwrap();
        assert_eq!(grid.patches.len(), 64);
        let ids: Vec<String> = (0..64).map(|k| k.to_string()).collect();
        let batch = Tensor::stack(&grid.patches.iter().collect::<Vec<_>>()).unwrap();
        let recs = score_batch(&model, &spheres, &batch, &ids, BoundaryMode::Hard, 16).unwrap();
        let best = recs.iter().map(|r| r.gamma).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(fmt_sig9(scores[*name]), fmt_sig9(best), "{name}");
    }
}

#[test]
fn sequence_mode_scores_every_frame() {
    let (dir, cfg) = workspace("");
    let d = dir.path();
    let run = d.join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let frames_dir = d.join("video01");
    std::fs::create_dir_all(&frames_dir).unwrap();
    let mut entries = Vec::new();
    let names: Vec<String> = (0..20).map(|i| format!("video01/f{i:03}.png")).collect();
    for (i, n) in names.iter().enumerate() {
        save_png(&d.join(n), &random_tensor(&[16, 16, 1], 0.0, 1.0, i as u64)).unwrap();
        entries.push((n.as_str(), Split::Test, (i >= 15) as u8));
    }
    let manifest = write_manifest(d, &entries);
    let ck = run.join("checkpoint.mocc");
    let score = |out: &str, extra: &[&str]| -> BTreeMap<String, f64> {
        let o = d.join(out);
        let mut args = vec!["score", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--seq", "--out", s(&o)];
        args.extend_from_slice(extra);
        ok(&args);
        read_scores(&o.join("scores.csv"))
    };
    let default = score("seq_default", &["--config", s(&cfg)]);
    assert_eq!(default.len(), 20);
    assert!(default.values().all(|v| v.is_finite()));
    let zero = score("seq_zero", &["--config", s(&cfg), "--recon-weight", "0"]);
    assert!(zero.values().all(|v| (-1.0..=0.0).contains(v)));
    assert_ne!(default, zero);

    let cfg0 = d.join("zero.toml");
    std::fs::write(&cfg0, format!("{CONFIG}\n[score]\nrecon_weight = 0.0\n")).unwrap();
    let from_config = score("seq_cfg", &["--config", s(&cfg0)]);
    assert_eq!(from_config, zero);
}

#[test]
fn ablation_final_row_matches_a_single_run() {
    let (dir, cfg) = workspace("");
    let d = dir.path();
    let abl = d.join("abl");
    ok(&["ablate", "--config", s(&cfg), "--out", s(&abl)]);
    let text = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["subset", "mean", "std"]);
    let subsets: Vec<&str> = rows[1..].iter().map(|r| r[0]).collect();
    assert_eq!(subsets, ["3", "2 3", "1 2 3"]);
    assert!(rows[1..].iter().all(|r| r[2] == "0.000000000000"));

    let run = d.join("final");
    ok(&["train", "--config", s(&cfg), "--layers", "3", "--seed", "0", "--out", s(&run)]);
    let sc = d.join("final_scores");
    ok(&["score", "--checkpoint", s(&run.join("checkpoint.mocc")), "--config", s(&cfg), "--out", s(&sc)]);
    let ev = d.join("final_eval");
    ok(&["eval", "--scores", s(&sc.join("scores.csv")), "--manifest", s(&d.join("data/manifest.csv")), "--out", s(&ev)]);
    let single: f64 = summary(&ev)["auc"].parse().unwrap();
    let row: f64 = rows[1][1].parse().unwrap();
    assert!((single - row).abs() < 1e-9, "{single} vs {row}");
}

#[test]
fn gradcheck_verb_reports_every_operator() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["gradcheck", "--trials", "3", "--out", s(dir.path())]);
    let text = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(text.lines().count(), 25);
    assert!(String::from_utf8_lossy(&o.stdout).contains("batch_norm"));
}
