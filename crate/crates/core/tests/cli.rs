use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use zsdet::bench::Manifest;
use zsdet::heads::HeadParams;
use zsdet::learn::checkpoint;
use zsdet::metrics::EvalReport;
use zsdet::BackgroundKind;

const CONFIG: &str = r#"{
  "synth": { "images": 40 },
  "train": { "iterations": 400, "iou_threshold": 0.3 }
}"#;

fn zsdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsdet")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path, command: &str) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{command}_manifest.json"))).unwrap()).unwrap()
}

fn prepared(dir: &Path) -> (String, String) {
    let cfg = write_config(dir, CONFIG);
    let out = dir.join("run").to_string_lossy().into_owned();
    assert!(zsdet(&["synth", "--config", &cfg, "--out", &out]).status.success());
    assert!(zsdet(&["train", "--config", &cfg, "--out", &out]).status.success());
    (cfg, out)
}

#[test]
fn synth_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("d");
    let o = zsdet(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let m = manifest(&out, "synth");
    assert_eq!(m.command, "synth");
    assert_eq!(m.files.len(), 7);
    assert_eq!(m.config.synth.images, 40);
    assert_eq!(m.config_hash, m.config.hash());
    for f in &m.files {
        let bytes = fs::read(out.join(&f.name)).unwrap();
        assert_eq!(zsdet::bench::sha256_hex(&bytes), f.sha256);
    }
}

#[test]
fn rerun_gives_identical_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        assert!(zsdet(&["synth", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "5"]).status.success());
        digests.push(manifest(&out, "synth").files);
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn unwritable_output_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("sub");
    let o = zsdet(&["synth", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("zsdet:"));
}

#[test]
fn config_errors_exit_one_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = write_config(dir.path(), r#"{"train": {"learning_rate": 0}}"#);
    let o = zsdet(&["synth", "--config", &bad, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());

    let unknown = write_config(dir.path(), r#"{"train": {"learning_rat": 0.1}}"#);
    assert_eq!(zsdet(&["synth", "--config", &unknown, "--out", out.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(zsdet(&["ablate", "dropout", "--out", out.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(zsdet(&["eval", "--mode", "zsx"]).status.code(), Some(1));
    assert_eq!(zsdet(&["frobnicate"]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn zero_iterations_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"synth": {"images": 10}, "train": {"iterations": 0, "seed": 3}}"#);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    assert!(zsdet(&["synth", "--config", &cfg, "--out", out_s]).status.success());
    assert!(zsdet(&["train", "--config", &cfg, "--out", out_s]).status.success());

    use rand::SeedableRng;
    let table = zsdet::EmbeddingTable::load(out.join("embeddings.txt")).unwrap();
    let split = zsdet::CategorySplit::load(out.join("split.txt")).unwrap();
    let space = zsdet::CategorySpace::new(&table, &split).unwrap();
    let cfg = zsdet::SynthConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let init = HeadParams::init(cfg.d, cfg.p, cfg.t, BackgroundKind::Learned, &space.seen_raw, &mut rng);
    let written = fs::read_to_string(out.join("checkpoint.json")).unwrap();
    assert_eq!(written, checkpoint::to_json(&init).unwrap());
    let log = fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(log, "iteration,total,classifier,regression,mask\n");
}

#[test]
fn training_lowers_the_classifier_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = prepared(dir.path());
    let mut reader = csv::Reader::from_path(Path::new(&out).join("loss_log.csv")).unwrap();
    let rows: Vec<zsdet::learn::LossRecord> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 400);
    let avg = |s: &[zsdet::learn::LossRecord]| s.iter().map(|r| r.classifier).sum::<f64>() / s.len() as f64;
    assert!(avg(&rows[rows.len() - 50..]) < avg(&rows[..50]));
}

#[test]
fn corrupted_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    assert!(zsdet(&["synth", "--config", &cfg, "--out", out_s]).status.success());
    let path = out.join("train_proposals.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.insert_str(text.len() / 2, "}{garbage");
    fs::write(&path, text).unwrap();
    let o = zsdet(&["train", "--config", &cfg, "--out", out_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("checkpoint.json").exists());
}

#[test]
fn eval_modes_shape_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = prepared(dir.path());
    let report = |mode: &str| -> EvalReport {
        let o = zsdet(&["eval", "--config", &cfg, "--out", &out, "--mode", mode, "--beta", "0.3"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("report.json")).unwrap()).unwrap()
    };
    let zsd = report("zsd");
    assert!(zsd.per_category.iter().all(|c| c.origin == zsdet::Origin::Unseen));
    assert!(zsd.map_seen.is_none() && zsd.hm_map.is_none());
    let csv = fs::read_to_string(Path::new(&out).join("report.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(3) == Some("")));

    let gzsd = report("gzsd");
    assert!(gzsd.hm_map.is_some() && gzsd.hm_recall().is_some());
    assert!(gzsd.per_category.iter().any(|c| c.origin == zsdet::Origin::Seen));

    let gzsi = report("gzsi");
    assert!(gzsi.hm_map.is_some());
    let m = manifest(Path::new(&out), "eval");
    assert_eq!(m.config.infer.mode, zsdet::TaskMode::Gzsi);
    assert_eq!(m.config.infer.beta, 0.3);
}

#[test]
fn perfect_detections_score_one() {
    use zsdet::io::{write_detections, GroundTruthFile};
    use zsdet::metrics::evaluate_files;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run");
    assert!(zsdet(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let gt = GroundTruthFile::load(out.join("test_gt.json")).unwrap();
    let split = zsdet::CategorySplit::load(out.join("split.txt")).unwrap();
    let dets: Vec<zsdet::Detection> = gt
        .annotations
        .iter()
        .map(|a| zsdet::Detection {
            image_id: a.image_id,
            category: a.category.clone(),
            origin: if split.is_seen(&a.category) { zsdet::Origin::Seen } else { zsdet::Origin::Unseen },
            score: 1.0,
            bbox: a.bbox,
            mask: a.mask.as_ref().map(|m| m.bits().mapv(|b| if b { 1.0 } else { 0.0 })),
        })
        .collect();
    let path = dir.path().join("oracle.jsonl");
    write_detections(&path, &dets).unwrap();
    for mode in zsdet::TaskMode::ALL {
        let r = evaluate_files(&path, out.join("test_gt.json"), &split, mode).unwrap();
        assert_eq!(r.map_unseen, Some(1.0), "{mode:?}");
        if mode.generalized() {
            assert_eq!((r.map_seen, r.hm_map), (Some(1.0), Some(1.0)));
        }
    }
}

#[test]
fn ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = prepared(dir.path());
    let rows = |axis: &str| -> Vec<zsdet::bench::AblationEntry> {
        let o = zsdet(&["ablate", axis, "--config", &cfg, "--out", &out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join(format!("ablation_{axis}.json"))).unwrap())
            .unwrap()
    };
    let names = |v: &[zsdet::bench::AblationEntry]| v.iter().map(|e| e.row.variant.clone()).collect::<Vec<_>>();

    let reg = rows("regressor-transfer");
    assert_eq!(names(&reg), ["no-transfer", "most-similar", "linear-combination", "learned"]);
    for e in &reg {
        // only the regressor variant changes between rows
        let mut infer = e.infer.clone();
        infer.reg_variant = reg[0].infer.reg_variant;
        assert_eq!(infer, reg[0].infer);
        assert_eq!(e.train, reg[0].train);
    }

    let bg = rows("background");
    assert_eq!(names(&bg), ["fixed", "mean", "learned"]);
    for e in &bg {
        let mut train = e.train.clone();
        train.background = bg[0].train.background;
        assert_eq!(train, bg[0].train);
        assert_eq!(e.infer, bg[0].infer);
    }

    let seg = rows("segmentor-transfer");
    assert_eq!(names(&seg), ["no-transfer", "most-similar", "linear-combination", "learned"]);
    assert!(seg.iter().all(|e| e.infer.mode.segmentation()));
    assert_eq!(seg[0].row.map_unseen, Some(0.0));

    let loss = rows("classifier-loss");
    assert_eq!(names(&loss), ["cross-entropy", "max-margin", "l2-error"]);

    let beta = rows("beta-sweep");
    assert_eq!(names(&beta), ["0", "0.05", "0.1", "0.2", "0.3"]);
    assert!(beta.windows(2).all(|w| w[1].row.seen_detections <= w[0].row.seen_detections));
    let csv = fs::read_to_string(Path::new(&out).join("ablation_beta-sweep.csv")).unwrap();
    assert!(csv.starts_with("beta,seen_map,unseen_map,seen_recall,unseen_recall,seen_detections\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"gradcheck": {"points": 10}}"#);
    let out = dir.path().join("g");
    let o = zsdet(&["gradcheck", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));

    // an impossible tolerance is reported as a numerical failure
    let strict = write_config(dir.path(), r#"{"gradcheck": {"points": 3, "tolerance": 1e-300}}"#);
    let o = zsdet(&["gradcheck", "--config", &strict, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
