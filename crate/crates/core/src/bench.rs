//! Command implementations behind the `zsdet` binary: dataset synthesis,
//! training, evaluation, ablation sweeps and gradient checks.
//!
//! Every command validates its full configuration before touching the output
//! directory and records the effective configuration, its hash and the
//! checksum of each emitted file in a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{BackgroundKind, CategorySpace, CategorySplit, EmbeddingTable};
use crate::error::{Error, Result};
use crate::heads::{HeadParams, ProposalRecord, TransferVariant};
use crate::infer::{predict_dataset, Detection, InferConfig, TaskMode};
use crate::io::{read_proposals, write_detections, GroundTruthFile};
use crate::learn::{checkpoint, gradient_suite, train_heads, ClassifierLoss, LossRecord, SuiteResult, TrainConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::synthgen::{generate, SynthConfig, SynthDataset};

pub const DEFAULT_BETAS: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Background,
    RegressorTransfer,
    SegmentorTransfer,
    ClassifierLoss,
    BetaSweep,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Background,
        AblationAxis::RegressorTransfer,
        AblationAxis::SegmentorTransfer,
        AblationAxis::ClassifierLoss,
        AblationAxis::BetaSweep,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Background => "background",
            AblationAxis::RegressorTransfer => "regressor-transfer",
            AblationAxis::SegmentorTransfer => "segmentor-transfer",
            AblationAxis::ClassifierLoss => "classifier-loss",
            AblationAxis::BetaSweep => "beta-sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub points: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            points: 100,
            epsilon: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub gradcheck: GradcheckConfig,
    /// Directory holding the dataset files; defaults to the output directory.
    pub dataset_dir: Option<PathBuf>,
    /// Checkpoint consumed by `eval`; defaults to `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    /// β values of the beta-sweep ablation.
    pub betas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            gradcheck: GradcheckConfig::default(),
            dataset_dir: None,
            checkpoint: None,
            betas: DEFAULT_BETAS.to_vec(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub mode: Option<TaskMode>,
    pub variant: Option<TransferVariant>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
        }
        if let Some(beta) = o.beta {
            self.infer.beta = beta;
        }
        if let Some(mode) = o.mode {
            self.infer.mode = mode;
        }
        if let Some(v) = o.variant {
            self.infer.reg_variant = v;
            self.infer.seg_variant = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        let g = &self.gradcheck;
        if g.points == 0 || !(g.epsilon > 0.0) || !(g.tolerance > 0.0) {
            return Err(Error::Config("gradcheck needs points > 0, epsilon > 0, tolerance > 0".into()));
        }
        if self.betas.is_empty() || self.betas.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Config("betas must be a non-empty list of values >= 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn dataset_dir(&self, out: &Path) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| out.to_path_buf())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything a training or evaluation run reads.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub table: EmbeddingTable,
    pub split: CategorySplit,
    pub train_gt: GroundTruthFile,
    pub train_proposals: Vec<ProposalRecord>,
    pub test_gt: GroundTruthFile,
    pub test_proposals: Vec<ProposalRecord>,
}

impl From<SynthDataset> for Dataset {
    fn from(s: SynthDataset) -> Self {
        Dataset {
            table: s.table,
            split: s.split,
            train_gt: s.train_gt,
            train_proposals: s.train_proposals,
            test_gt: s.test_gt,
            test_proposals: s.test_proposals,
        }
    }
}

const TRAIN_INPUTS: [&str; 4] = ["embeddings.txt", "split.txt", "train_gt.json", "train_proposals.jsonl"];
const TEST_INPUTS: [&str; 4] = ["embeddings.txt", "split.txt", "test_gt.json", "test_proposals.jsonl"];

fn require_files(dir: &Path, names: &[&str]) -> Result<()> {
    for name in names {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::Config(format!("missing input file {}", p.display())));
        }
    }
    Ok(())
}

impl Dataset {
    /// Reads the standard file set from `dir`; either partition may be skipped.
    pub fn load(dir: impl AsRef<Path>, train: bool, test: bool) -> Result<Self> {
        let dir = dir.as_ref();
        let table = EmbeddingTable::load(dir.join("embeddings.txt"))?;
        let split = CategorySplit::load(dir.join("split.txt"))?;
        split.validate(&table)?;
        let part = |gt: &str, props: &str, wanted: bool| -> Result<(GroundTruthFile, Vec<ProposalRecord>)> {
            if !wanted {
                return Ok((GroundTruthFile::default(), Vec::new()));
            }
            Ok((GroundTruthFile::load(dir.join(gt))?, read_proposals(dir.join(props))?))
        };
        let (train_gt, train_proposals) = part("train_gt.json", "train_proposals.jsonl", train)?;
        let (test_gt, test_proposals) = part("test_gt.json", "test_proposals.jsonl", test)?;
        Ok(Dataset {
            table,
            split,
            train_gt,
            train_proposals,
            test_gt,
            test_proposals,
        })
    }

    pub fn train(&self, config: &TrainConfig) -> Result<crate::learn::TrainOutcome> {
        train_heads(&self.train_proposals, &self.train_gt.annotations, &self.table, &self.split, config)
    }

    pub fn evaluate(&self, params: &HeadParams, config: &InferConfig) -> Result<(Vec<Detection>, EvalReport)> {
        let space = CategorySpace::new(&self.table, &self.split)?;
        let (d, _, _) = params.dims();
        if d != space.dim() {
            return Err(Error::dim(d, space.dim(), "checkpoint embedding size vs embedding table"));
        }
        let dets = predict_dataset(&self.test_proposals, &self.test_gt.images, params, &space, config)?;
        let report = evaluate(&dets, &self.test_gt, &self.split, config.mode)?;
        Ok((dets, report))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub files: Vec<FileDigest>,
}

struct Output {
    dir: PathBuf,
    files: Vec<FileDigest>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: &[u8]) -> Result<PathBuf> {
        let p = self.dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        self.record(name)?;
        Ok(p)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let p = self.dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.files.push(FileDigest {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn finish(mut self, command: &str, config: &RunConfig) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            files: std::mem::take(&mut self.files),
        };
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let p = self.dir.join(format!("{command}_manifest.json"));
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(manifest)
    }
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Format {
        what: "csv",
        msg: e.to_string(),
    }
}

/// Header row first, even when there are no records.
fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(csv_error)
}

/// Generates a synthetic dataset into `out`.
pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let ds = generate(&config.synth)?;
    let mut o = Output::create(out)?;
    ds.write(out)?;
    for name in crate::synthgen::DATASET_FILES {
        o.record(name)?;
    }
    o.finish("synth", config)
}

/// Trains the heads on the training partition; writes `checkpoint.json` and `loss_log.csv`.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let data_dir = config.dataset_dir(out);
    require_files(&data_dir, &TRAIN_INPUTS)?;
    let ds = Dataset::load(&data_dir, true, false)?;
    let outcome = ds.train(&config.train)?;
    let mut o = Output::create(out)?;
    o.write("checkpoint.json", checkpoint::to_json(&outcome.params)?.as_bytes())?;
    o.write("loss_log.csv", &csv_bytes::<LossRecord>(&["iteration", "total", "classifier", "regression", "mask"], &outcome.log)?)?;
    o.finish("train", config)
}

/// Runs inference on the test partition and scores it in `config.infer.mode`.
pub fn cmd_eval(config: &RunConfig, out: &Path) -> Result<(Manifest, EvalReport)> {
    config.validate()?;
    let data_dir = config.dataset_dir(out);
    require_files(&data_dir, &TEST_INPUTS)?;
    let ckpt = config.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    if !ckpt.is_file() {
        return Err(Error::Config(format!("missing checkpoint {}", ckpt.display())));
    }
    let params = checkpoint::load(&ckpt)?;
    let ds = Dataset::load(&data_dir, false, true)?;
    let (dets, report) = ds.evaluate(&params, &config.infer)?;
    let mut o = Output::create(out)?;
    let det_path = out.join("detections.jsonl");
    write_detections(&det_path, &dets)?;
    o.record("detections.jsonl")?;
    o.write("report.json", report.to_json().as_bytes())?;
    o.write("report.csv", report.to_csv().as_bytes())?;
    Ok((o.finish("eval", config)?, report))
}

/// One row of an ablation table. Values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub mode: String,
    pub map_seen: Option<f64>,
    pub map_unseen: Option<f64>,
    pub hm_map: Option<f64>,
    pub recall_seen: Option<f64>,
    pub recall_unseen: Option<f64>,
    pub hm_recall: Option<f64>,
    pub seen_detections: usize,
    pub unseen_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

fn row(axis: AblationAxis, variant: String, r: &EvalReport) -> AblationRow {
    let at = r.recall_at(crate::metrics::AP_IOU);
    AblationRow {
        axis: axis.name().to_string(),
        variant,
        mode: r.mode.name().to_string(),
        map_seen: r.map_seen,
        map_unseen: r.map_unseen,
        hm_map: r.hm_map,
        recall_seen: at.and_then(|x| x.seen),
        recall_unseen: at.and_then(|x| x.unseen),
        hm_recall: at.and_then(|x| x.hm),
        seen_detections: r.seen_detections,
        unseen_detections: r.unseen_detections,
    }
}

fn segmentation_mode(mode: TaskMode) -> TaskMode {
    if mode.generalized() {
        TaskMode::Gzsi
    } else {
        TaskMode::Zsi
    }
}

fn generalized_mode(mode: TaskMode) -> TaskMode {
    if mode.segmentation() {
        TaskMode::Gzsi
    } else {
        TaskMode::Gzsd
    }
}

/// Rows of one ablation; all rows share data and seeds and differ only along `axis`.
pub fn ablation(ds: &Dataset, config: &RunConfig, axis: AblationAxis) -> Result<Vec<AblationEntry>> {
    config.validate()?;
    let mut entries = Vec::new();
    let mut push = |variant: String, train: &TrainConfig, infer: &InferConfig, params: &HeadParams| -> Result<()> {
        let (_, report) = ds.evaluate(params, infer)?;
        entries.push(AblationEntry {
            row: row(axis, variant, &report),
            train: train.clone(),
            infer: infer.clone(),
        });
        Ok(())
    };
    match axis {
        AblationAxis::Background => {
            for kind in BackgroundKind::ALL {
                let train = TrainConfig {
                    background: kind,
                    ..config.train.clone()
                };
                let params = ds.train(&train)?.params;
                push(kind.name().to_string(), &train, &config.infer, &params)?;
            }
        }
        AblationAxis::ClassifierLoss => {
            for loss in [
                ClassifierLoss::CrossEntropy,
                ClassifierLoss::MaxMargin { margin: 0.2 },
                ClassifierLoss::L2Error,
            ] {
                let train = TrainConfig {
                    loss,
                    ..config.train.clone()
                };
                let params = ds.train(&train)?.params;
                push(loss.name().to_string(), &train, &config.infer, &params)?;
            }
        }
        AblationAxis::RegressorTransfer | AblationAxis::SegmentorTransfer => {
            let params = ds.train(&config.train)?.params;
            for v in TransferVariant::ALL {
                let infer = if axis == AblationAxis::RegressorTransfer {
                    InferConfig {
                        reg_variant: v,
                        ..config.infer.clone()
                    }
                } else {
                    InferConfig {
                        seg_variant: v,
                        mode: segmentation_mode(config.infer.mode),
                        ..config.infer.clone()
                    }
                };
                push(v.name().to_string(), &config.train, &infer, &params)?;
            }
        }
        AblationAxis::BetaSweep => {
            let params = ds.train(&config.train)?.params;
            for &beta in &config.betas {
                let infer = InferConfig {
                    beta,
                    mode: generalized_mode(config.infer.mode),
                    ..config.infer.clone()
                };
                push(format!("{beta}"), &config.train, &infer, &params)?;
            }
        }
    }
    Ok(entries)
}

#[derive(Serialize)]
struct BetaRow {
    beta: String,
    seen_map: Option<f64>,
    unseen_map: Option<f64>,
    seen_recall: Option<f64>,
    unseen_recall: Option<f64>,
    seen_detections: usize,
}

/// Runs one ablation axis; writes `ablation_<axis>.csv` and `.json`.
pub fn cmd_ablate(config: &RunConfig, axis: AblationAxis, out: &Path) -> Result<(Manifest, Vec<AblationEntry>)> {
    config.validate()?;
    let data_dir = config.dataset_dir(out);
    require_files(&data_dir, &TRAIN_INPUTS)?;
    require_files(&data_dir, &TEST_INPUTS)?;
    let ds = Dataset::load(&data_dir, true, true)?;
    let entries = ablation(&ds, config, axis)?;
    let mut o = Output::create(out)?;
    let stem = format!("ablation_{}", axis.name());
    let csv = if axis == AblationAxis::BetaSweep {
        let rows: Vec<BetaRow> = entries
            .iter()
            .map(|e| BetaRow {
                beta: e.row.variant.clone(),
                seen_map: e.row.map_seen,
                unseen_map: e.row.map_unseen,
                seen_recall: e.row.recall_seen,
                unseen_recall: e.row.recall_unseen,
                seen_detections: e.row.seen_detections,
            })
            .collect();
        csv_bytes(
            &["beta", "seen_map", "unseen_map", "seen_recall", "unseen_recall", "seen_detections"],
            &rows,
        )?
    } else {
        let header = [
            "axis",
            "variant",
            "mode",
            "map_seen",
            "map_unseen",
            "hm_map",
            "recall_seen",
            "recall_unseen",
            "hm_recall",
            "seen_detections",
            "unseen_detections",
        ];
        csv_bytes(&header, &entries.iter().map(|e| &e.row).collect::<Vec<_>>())?
    };
    o.write(&format!("{stem}.csv"), &csv)?;
    o.write(
        &format!("{stem}.json"),
        serde_json::to_string_pretty(&entries).expect("rows serialize").as_bytes(),
    )?;
    Ok((o.finish("ablate", config)?, entries))
}

#[derive(Serialize)]
struct GradRow<'a> {
    loss: &'a str,
    points: usize,
    max_rel_error: f64,
    tolerance: f64,
    pass: bool,
}

/// Finite-difference check of every loss; fails with a numerical error above tolerance.
pub fn cmd_gradcheck(config: &RunConfig, out: &Path) -> Result<(Manifest, Vec<SuiteResult>)> {
    config.validate()?;
    let g = &config.gradcheck;
    let results = gradient_suite(g.points, config.train.seed, g.epsilon)?;
    let rows: Vec<GradRow> = results
        .iter()
        .map(|r| GradRow {
            loss: r.loss.name(),
            points: r.points,
            max_rel_error: r.max_rel_error,
            tolerance: g.tolerance,
            pass: r.max_rel_error <= g.tolerance,
        })
        .collect();
    let mut o = Output::create(out)?;
    o.write(
        "gradcheck.csv",
        &csv_bytes(&["loss", "points", "max_rel_error", "tolerance", "pass"], &rows)?,
    )?;
    let manifest = o.finish("gradcheck", config)?;
    if let Some(bad) = results.iter().find(|r| !(r.max_rel_error <= g.tolerance)) {
        return Err(Error::Numerical(format!(
            "gradient check failed for {}: relative error {:.3e} > {:.1e}",
            bad.loss.name(),
            bad.max_rel_error,
            g.tolerance
        )));
    }
    Ok((manifest, results))
}
