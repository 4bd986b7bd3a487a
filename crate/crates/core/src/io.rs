//! On-disk formats shared by the generator, trainer, inference and evaluator.
//!
//! * Ground truth: JSON `{images: [{id, width, height}], categories: [names],
//!   annotations: [{image_id, category, bbox: [x1,y1,x2,y2], mask?: {size, bits}}]}`.
//! * Proposals: JSON lines `{image_id, box, z: [..], zm?: {n, t, values}}`, `values`
//!   row-major over `(row, col, channel)`.
//! * Detections: JSON lines `{image_id, category, origin, score, box, mask?}` where
//!   `mask` is `{size, probs: [..]}` (row-major) or `{size, bits: "0101.."}`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::heads::ProposalRecord;
use crate::infer::{Detection, Origin};
use crate::learn::GroundTruthInstance;
use crate::mask::MaskGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageInfo {
    pub id: u64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub images: Vec<ImageInfo>,
    pub categories: Vec<String>,
    pub annotations: Vec<GroundTruthInstance>,
}

impl GroundTruthFile {
    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Boxes well-formed, images and categories declared.
    pub fn validate(&self) -> Result<()> {
        for a in &self.annotations {
            a.bbox.validate()?;
            if self.image(a.image_id).is_none() {
                return Err(Error::Format {
                    what: "ground truth",
                    msg: format!("annotation refers to unknown image {}", a.image_id),
                });
            }
            if !self.categories.contains(&a.category) {
                return Err(Error::UnknownCategory(a.category.clone()));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let gt: GroundTruthFile = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "ground truth",
            msg: e.to_string(),
        })?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ground truth serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFeatureRepr {
    n: usize,
    t: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalRepr {
    image_id: u64,
    #[serde(rename = "box")]
    pbox: BBox,
    z: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zm: Option<MaskFeatureRepr>,
}

impl From<&ProposalRecord> for ProposalRepr {
    fn from(p: &ProposalRecord) -> Self {
        ProposalRepr {
            image_id: p.image_id,
            pbox: p.pbox,
            z: p.z.to_vec(),
            zm: p.zm.as_ref().map(|zm| {
                let (n, _, t) = zm.dim();
                MaskFeatureRepr {
                    n,
                    t,
                    values: zm.iter().copied().collect(),
                }
            }),
        }
    }
}

impl TryFrom<ProposalRepr> for ProposalRecord {
    type Error = Error;

    fn try_from(r: ProposalRepr) -> Result<Self> {
        let zm = match r.zm {
            Some(m) => Some(
                Array3::from_shape_vec((m.n, m.n, m.t), m.values)
                    .map_err(|e| Error::Shape(format!("zm: {e}")))?,
            ),
            None => None,
        };
        Ok(ProposalRecord {
            image_id: r.image_id,
            pbox: r.pbox,
            z: Array1::from(r.z),
            zm,
        })
    }
}

fn read_lines<T>(path: &Path, what: &'static str, mut f: impl FnMut(&str) -> Result<T>) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(f(&line).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                what,
                msg: format!("line {}: {msg}", i + 1),
            },
            other => other,
        })?);
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn proposal_to_json(p: &ProposalRecord) -> String {
    serde_json::to_string(&ProposalRepr::from(p)).expect("proposal serializes")
}

pub fn proposal_from_json(line: &str) -> Result<ProposalRecord> {
    let repr: ProposalRepr = serde_json::from_str(line).map_err(|e| Error::Format {
        what: "proposal",
        msg: e.to_string(),
    })?;
    ProposalRecord::try_from(repr)
}

pub fn read_proposals(path: impl AsRef<Path>) -> Result<Vec<ProposalRecord>> {
    read_lines(path.as_ref(), "proposals", proposal_from_json)
}

pub fn write_proposals(path: impl AsRef<Path>, proposals: &[ProposalRecord]) -> Result<()> {
    write_lines(path.as_ref(), proposals.iter().map(proposal_to_json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskPayload {
    Probabilities { size: usize, probs: Vec<f64> },
    Bits { size: usize, bits: String },
}

impl MaskPayload {
    pub fn to_probabilities(&self) -> Result<Array2<f64>> {
        match self {
            MaskPayload::Probabilities { size, probs } => Array2::from_shape_vec((*size, *size), probs.clone())
                .map_err(|e| Error::Shape(format!("detection mask: {e}"))),
            MaskPayload::Bits { size, bits } => {
                let grid = MaskGrid::from_bitstring(*size, bits)?;
                Ok(grid.bits().mapv(|b| if b { 1.0 } else { 0.0 }))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRepr {
    image_id: u64,
    category: String,
    origin: Origin,
    score: f64,
    #[serde(rename = "box")]
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<MaskPayload>,
}

/// One JSON line; masks are written as probability grids.
pub fn detection_to_json(d: &Detection) -> String {
    let repr = DetectionRepr {
        image_id: d.image_id,
        category: d.category.clone(),
        origin: d.origin,
        score: d.score,
        bbox: d.bbox,
        mask: d.mask.as_ref().map(|m| MaskPayload::Probabilities {
            size: m.nrows(),
            probs: m.iter().copied().collect(),
        }),
    };
    serde_json::to_string(&repr).expect("detection serializes")
}

pub fn detection_from_json(line: &str) -> Result<Detection> {
    let r: DetectionRepr = serde_json::from_str(line).map_err(|e| Error::Format {
        what: "detection",
        msg: e.to_string(),
    })?;
    if !r.score.is_finite() {
        return Err(Error::NonFinite("detection score".into()));
    }
    Ok(Detection {
        image_id: r.image_id,
        category: r.category,
        origin: r.origin,
        score: r.score,
        bbox: r.bbox,
        mask: r.mask.map(|m| m.to_probabilities()).transpose()?,
    })
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    read_lines(path.as_ref(), "detections", detection_from_json)
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    write_lines(path.as_ref(), dets.iter().map(detection_to_json))
}
