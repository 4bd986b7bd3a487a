//! Seeded synthetic datasets with a planted linear embedding→feature map.
//!
//! Category embeddings are unit vectors confined to a random `latent_rank`
//! subspace of R^d, so unseen categories are linear combinations of seen ones.
//! Object features are `z = M_z ê_c + ε`, background features `z = ε`; mask
//! features are `M_m ê_c + ε` inside the object's ellipse and `ε` outside.
//! Proposals are offset from their ground truth by a planted, category-dependent
//! delta (a constant shift plus a quadratic form in the embedding) and a
//! uniform jitter, so box regression has something transferable to learn.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::embed::{CategorySplit, EmbeddingTable};
use crate::error::{Error, Result};
use crate::heads::ProposalRecord;
use crate::io::{write_proposals, GroundTruthFile, ImageInfo};
use crate::learn::GroundTruthInstance;
use crate::mask::MaskGrid;

const MAX_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub d: usize,
    pub p: usize,
    pub t: usize,
    /// Side of the proposal mask-feature grid.
    pub n: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub num_seen: usize,
    pub num_unseen: usize,
    pub objects_per_image: usize,
    pub images: usize,
    /// Uniform per-coordinate delta jitter, in units of proposal width/height.
    pub jitter: f64,
    /// Feature noise standard deviation.
    pub sigma: f64,
    /// Gain of the hidden maps on the embedding subspace.
    pub hidden_scale: f64,
    /// Dimension of the subspace holding all category embeddings.
    pub latent_rank: usize,
    /// Magnitude of the planted systematic proposal offset.
    pub proposal_bias: f64,
    pub proposals_per_object: usize,
    pub background_per_image: usize,
    pub min_box: f64,
    pub max_box: f64,
    /// Side of the ground-truth mask grids.
    pub gt_mask_size: usize,
    /// Emit mask annotations and `zm` features.
    pub masks: bool,
    pub train_fraction: f64,
    /// Upper bound on `|cos|` between any two category embeddings.
    pub max_cosine: f64,
    /// Background proposals overlap every object by less than this IoU.
    pub background_max_iou: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            d: 16,
            p: 32,
            t: 8,
            n: 8,
            image_width: 128,
            image_height: 128,
            num_seen: 8,
            num_unseen: 4,
            objects_per_image: 3,
            images: 200,
            jitter: 0.04,
            sigma: 0.0,
            hidden_scale: 3.0,
            latent_rank: 3,
            proposal_bias: 0.25,
            proposals_per_object: 2,
            background_per_image: 3,
            min_box: 20.0,
            max_box: 44.0,
            gt_mask_size: 32,
            masks: true,
            train_fraction: 0.8,
            max_cosine: 0.9,
            background_max_iou: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("d", self.d),
            ("p", self.p),
            ("t", self.t),
            ("n", self.n),
            ("image_width", self.image_width),
            ("image_height", self.image_height),
            ("num_seen", self.num_seen),
            ("num_unseen", self.num_unseen),
            ("images", self.images),
            ("latent_rank", self.latent_rank),
            ("gt_mask_size", self.gt_mask_size),
        ] {
            if v == 0 {
                return bad(format!("synth.{name} must be positive"));
            }
        }
        if self.latent_rank > self.d || self.latent_rank > self.p || self.latent_rank > self.t {
            return bad(format!(
                "synth.latent_rank {} exceeds one of d={}, p={}, t={}",
                self.latent_rank, self.d, self.p, self.t
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("synth.sigma must be finite and >= 0".into());
        }
        if !(self.hidden_scale > 0.0 && self.hidden_scale.is_finite()) {
            return bad("synth.hidden_scale must be positive".into());
        }
        if !(0.0..=0.3).contains(&self.proposal_bias) || !(0.0..=0.1).contains(&self.jitter) {
            return bad("synth.proposal_bias must lie in [0, 0.3] and synth.jitter in [0, 0.1]".into());
        }
        if !(self.min_box > 1.0 && self.min_box <= self.max_box)
            || self.max_box > self.image_width.min(self.image_height) as f64
        {
            return bad("synth box sizes must satisfy 1 < min_box <= max_box <= image side".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("synth.train_fraction must lie in (0, 1)".into());
        }
        if !(self.max_cosine > 0.0 && self.max_cosine < 1.0) {
            return bad("synth.max_cosine must lie in (0, 1)".into());
        }
        if !(self.background_max_iou > 0.0 && self.background_max_iou <= 1.0) {
            return bad("synth.background_max_iou must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn num_train_images(&self) -> usize {
        ((self.images as f64 * self.train_fraction).floor() as usize).clamp(1, self.images)
    }
}

/// The planted generative model, kept for oracle comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenMaps {
    /// `p x d`.
    pub m_z: Array2<f64>,
    /// `t x d`.
    pub m_m: Array2<f64>,
    /// Orthonormal `d x latent_rank` basis of the embedding subspace.
    pub basis: Array2<f64>,
    /// Planted proposal→ground-truth deltas per category (before jitter).
    pub category_deltas: BTreeMap<String, [f64; 4]>,
    /// Category of the object each training proposal was planted for; `None` for background.
    pub train_labels: Vec<Option<String>>,
    pub test_labels: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub table: EmbeddingTable,
    pub split: CategorySplit,
    pub train_gt: GroundTruthFile,
    pub train_proposals: Vec<ProposalRecord>,
    pub test_gt: GroundTruthFile,
    pub test_proposals: Vec<ProposalRecord>,
    pub hidden: HiddenMaps,
}

pub const DATASET_FILES: [&str; 7] = [
    "embeddings.txt",
    "split.txt",
    "train_gt.json",
    "train_proposals.jsonl",
    "test_gt.json",
    "test_proposals.jsonl",
    "hidden_maps.json",
];

impl SynthDataset {
    /// Writes the files in [`DATASET_FILES`] into `dir`, returning their paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = |name: &str| dir.join(name);
        let text = |name: &str, body: String| {
            let p = path(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        text("embeddings.txt", self.table.to_text())?;
        text("split.txt", self.split.to_text())?;
        self.train_gt.save(path("train_gt.json"))?;
        write_proposals(path("train_proposals.jsonl"), &self.train_proposals)?;
        self.test_gt.save(path("test_gt.json"))?;
        write_proposals(path("test_proposals.jsonl"), &self.test_proposals)?;
        text(
            "hidden_maps.json",
            serde_json::to_string(&self.hidden).expect("hidden maps serialize"),
        )?;
        Ok(DATASET_FILES.iter().map(|n| path(n)).collect())
    }

    pub fn num_annotations(&self) -> usize {
        self.train_gt.annotations.len() + self.test_gt.annotations.len()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// `rows x k` matrix with orthonormal columns (Gram–Schmidt on a Gaussian draw).
fn random_frame(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Array2<f64> {
    loop {
        let mut m = gaussian(rng, (rows, k));
        let mut ok = true;
        for j in 0..k {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let qi = m.column(i).to_owned();
                m.column_mut(j).scaled_add(-proj, &qi);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return m;
        }
    }
}

/// `scale * U Vᵀ` where `V` holds the first `min(out, d)` columns of `frame`.
fn isometry_on(rng: &mut ChaCha8Rng, out: usize, frame: &Array2<f64>, scale: f64) -> Array2<f64> {
    let k = out.min(frame.ncols());
    let u = random_frame(rng, out, k);
    let v = frame.slice(ndarray::s![.., ..k]);
    u.dot(&v.t()) * scale
}

fn ellipse_contains(b: &BBox, x: f64, y: f64) -> bool {
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    u * u + v * v <= 1.0
}

fn ellipse_mask(b: &BBox, m: usize) -> MaskGrid {
    MaskGrid::from_fn(m, |(row, col)| {
        let x = b.x1 + (col as f64 + 0.5) / m as f64 * b.width();
        let y = b.y1 + (row as f64 + 0.5) / m as f64 * b.height();
        ellipse_contains(b, x, y)
    })
}

fn inside_image(b: &BBox, cfg: &SynthConfig) -> bool {
    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= cfg.image_width as f64 && b.y2 <= cfg.image_height as f64
}

/// Proposal whose encoding against `gt` is exactly `deltas` (up to rounding).
fn invert_deltas(gt: &BBox, t: &[f64; 4]) -> Result<BBox> {
    let sx = 1.0 + t[2] - t[0];
    let sy = 1.0 + t[3] - t[1];
    if sx <= 0.1 || sy <= 0.1 {
        return Err(Error::Config(format!("planted deltas {t:?} collapse the proposal")));
    }
    let pw = gt.width() / sx;
    let ph = gt.height() / sy;
    let x1 = gt.x1 - t[0] * pw;
    let y1 = gt.y1 - t[1] * ph;
    Ok(BBox::new(x1, y1, x1 + pw, y1 + ph))
}

struct Planter<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    m_z: Array2<f64>,
    m_m: Array2<f64>,
}

impl Planter<'_> {
    fn noise(&mut self, len: usize) -> Array1<f64> {
        let s = self.cfg.sigma;
        Array1::from_shape_simple_fn(len, || s * self.rng.sample::<f64, _>(StandardNormal))
    }

    fn features(&mut self, e: Option<&Array1<f64>>) -> Array1<f64> {
        let noise = self.noise(self.cfg.p);
        match e {
            Some(e) => self.m_z.dot(e) + noise,
            None => noise,
        }
    }

    fn mask_features(&mut self, pbox: &BBox, object: Option<(&BBox, &Array1<f64>)>) -> Array3<f64> {
        let (n, t) = (self.cfg.n, self.cfg.t);
        let signal = object.map(|(_, e)| self.m_m.dot(e));
        let mut zm = Array3::zeros((n, n, t));
        for row in 0..n {
            for col in 0..n {
                let x = pbox.x1 + (col as f64 + 0.5) / n as f64 * pbox.width();
                let y = pbox.y1 + (row as f64 + 0.5) / n as f64 * pbox.height();
                let mut cell = self.noise(t);
                if let (Some((gt, _)), Some(sig)) = (object, &signal) {
                    if ellipse_contains(gt, x, y) {
                        cell += sig;
                    }
                }
                zm.slice_mut(ndarray::s![row, col, ..]).assign(&cell);
            }
        }
        zm
    }

    fn random_box(&mut self) -> BBox {
        let c = self.cfg;
        let w = self.rng.random_range(c.min_box..=c.max_box);
        let h = self.rng.random_range(c.min_box..=c.max_box);
        let x1 = self.rng.random_range(0.0..=(c.image_width as f64 - w));
        let y1 = self.rng.random_range(0.0..=(c.image_height as f64 - h));
        BBox::new(x1, y1, x1 + w, y1 + h)
    }
}

/// Draws a complete dataset; a pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let cfg = config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.latent_rank;
    let k = cfg.num_seen + cfg.num_unseen;

    let frame = random_frame(&mut rng, cfg.d, cfg.d);
    let basis = frame.slice(ndarray::s![.., ..r]).to_owned();

    // embeddings: unit vectors in span(basis), pairwise |cos| bounded
    let mut latent: Vec<Array1<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut tries = 0;
        loop {
            tries += 1;
            if tries > MAX_RETRIES {
                return Err(Error::Config(format!(
                    "cannot place {k} embeddings with |cos| <= {} in rank {r}",
                    cfg.max_cosine
                )));
            }
            let x: Array1<f64> = Array1::from_shape_simple_fn(r, || rng.sample::<f64, _>(StandardNormal));
            let norm = x.dot(&x).sqrt();
            if norm < 1e-8 {
                continue;
            }
            let x = x / norm;
            if latent.iter().all(|y| y.dot(&x).abs() <= cfg.max_cosine) {
                latent.push(x);
                break;
            }
        }
    }
    let names: Vec<String> = (0..k).map(|i| format!("c{i:02}")).collect();
    let mut vectors = Array2::zeros((k, cfg.d));
    for (i, x) in latent.iter().enumerate() {
        vectors.row_mut(i).assign(&basis.dot(x));
    }
    let table = EmbeddingTable::new(names.clone(), vectors)?;
    let split = CategorySplit::new(names[..cfg.num_seen].to_vec(), names[cfg.num_seen..].to_vec())?;

    let m_z = isometry_on(&mut rng, cfg.p, &frame, cfg.hidden_scale);
    let m_m = isometry_on(&mut rng, cfg.t, &frame, cfg.hidden_scale);

    // planted deltas: shared shift plus a quadratic form of the latent embedding
    let b = cfg.proposal_bias;
    let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let shift = [b * sx, 0.5 * b * sy, b * sx, 0.5 * b * sy];
    let forms: Vec<Array2<f64>> = (0..4)
        .map(|_| {
            let g = Array2::from_shape_simple_fn((r, r), || rng.random_range(-1.0..1.0));
            (&g + &g.t()) * 0.5
        })
        .collect();
    let mut category_deltas = BTreeMap::new();
    let mut deltas_by_index = Vec::with_capacity(k);
    for (i, x) in latent.iter().enumerate() {
        let mut t = [0.0; 4];
        for j in 0..4 {
            t[j] = shift[j] + 0.5 * b * x.dot(&forms[j].dot(x));
        }
        category_deltas.insert(names[i].clone(), t);
        deltas_by_index.push(t);
    }

    let embeddings: Vec<Array1<f64>> = table.vectors().axis_iter(Axis(0)).map(|r| r.to_owned()).collect();
    let mut planter = Planter { cfg, rng, m_z, m_m };
    let n_train = cfg.num_train_images();
    let mut parts: [(GroundTruthFile, Vec<ProposalRecord>, Vec<Option<String>>); 2] = Default::default();
    for (slot, part) in parts.iter_mut().enumerate() {
        part.0.categories = if slot == 0 { split.seen.clone() } else { names.clone() };
    }

    for img in 0..cfg.images {
        let train = img < n_train;
        let (gt_file, proposals, labels) = &mut parts[usize::from(!train)];
        let id = img as u64;
        gt_file.images.push(ImageInfo {
            id,
            width: cfg.image_width,
            height: cfg.image_height,
        });
        let pool = if train { cfg.num_seen } else { k };
        let mut boxes: Vec<BBox> = Vec::new();
        for _ in 0..cfg.objects_per_image {
            let c = planter.rng.random_range(0..pool);
            let mut placed = None;
            for _ in 0..MAX_RETRIES {
                let cand = planter.random_box();
                if boxes.iter().any(|o| o.intersection(&cand) > 0.0) {
                    continue;
                }
                let pboxes = (0..cfg.proposals_per_object)
                    .map(|_| {
                        let mut t = deltas_by_index[c];
                        for v in &mut t {
                            *v += cfg.jitter * planter.rng.random_range(-1.0..=1.0);
                        }
                        invert_deltas(&cand, &t)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if pboxes.iter().all(|b| inside_image(b, cfg)) {
                    placed = Some((cand, pboxes));
                    break;
                }
            }
            let (gt, pboxes) = placed.ok_or_else(|| {
                Error::Config(format!(
                    "cannot place {} disjoint objects with in-image proposals in a {}x{} image",
                    cfg.objects_per_image, cfg.image_width, cfg.image_height
                ))
            })?;
            boxes.push(gt);
            gt_file.annotations.push(GroundTruthInstance {
                image_id: id,
                category: names[c].clone(),
                bbox: gt,
                mask: cfg.masks.then(|| ellipse_mask(&gt, cfg.gt_mask_size)),
            });
            for pbox in pboxes {
                let z = planter.features(Some(&embeddings[c]));
                let zm = cfg.masks.then(|| planter.mask_features(&pbox, Some((&gt, &embeddings[c]))));
                proposals.push(ProposalRecord { image_id: id, pbox, z, zm });
                labels.push(Some(names[c].clone()));
            }
        }
        for _ in 0..cfg.background_per_image {
            let mut placed = None;
            for _ in 0..MAX_RETRIES {
                let cand = planter.random_box();
                if boxes.iter().all(|o| o.iou(&cand) < cfg.background_max_iou) {
                    placed = Some(cand);
                    break;
                }
            }
            let pbox = placed.ok_or_else(|| Error::Config("cannot place background proposals".into()))?;
            let z = planter.features(None);
            let zm = cfg.masks.then(|| planter.mask_features(&pbox, None));
            proposals.push(ProposalRecord { image_id: id, pbox, z, zm });
            labels.push(None);
        }
    }

    let [(train_gt, train_proposals, train_labels), (test_gt, test_proposals, test_labels)] = parts;
    Ok(SynthDataset {
        table,
        split,
        train_gt,
        train_proposals,
        test_gt,
        test_proposals,
        hidden: HiddenMaps {
            m_z: planter.m_z,
            m_m: planter.m_m,
            basis,
            category_deltas,
            train_labels,
            test_labels,
        },
    })
}

/// Labels each proposal with `argmax_c ê_cᵀ M_zᵀ z` over `candidates`, the best
/// linear rule under the generative model. Ties go to the earlier candidate.
pub fn bayes_reference(
    proposals: &[ProposalRecord],
    table: &EmbeddingTable,
    m_z: &Array2<f64>,
    candidates: &[String],
) -> Result<Vec<String>> {
    if candidates.is_empty() {
        return Err(Error::Config("bayes_reference needs at least one candidate".into()));
    }
    let rows = table.subset(candidates)?.row_normalize()?;
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        if p.z.len() != m_z.nrows() {
            return Err(Error::dim(m_z.nrows(), p.z.len(), "proposal feature z"));
        }
        let projected = m_z.t().dot(&p.z);
        let scores = rows.vectors().dot(&projected);
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        out.push(candidates[best].clone());
    }
    Ok(out)
}

/// Fraction of labelled (object) proposals whose [`bayes_reference`] label is correct.
pub fn reference_accuracy(
    proposals: &[ProposalRecord],
    labels: &[Option<String>],
    table: &EmbeddingTable,
    m_z: &Array2<f64>,
    candidates: &[String],
) -> Result<Option<f64>> {
    let (props, truth): (Vec<ProposalRecord>, Vec<&String>) = proposals
        .iter()
        .zip(labels)
        .filter_map(|(p, l)| l.as_ref().filter(|l| candidates.contains(l)).map(|l| (p.clone(), l)))
        .unzip();
    if props.is_empty() {
        return Ok(None);
    }
    let pred = bayes_reference(&props, table, m_z, candidates)?;
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == *b).count();
    Ok(Some(hits as f64 / props.len() as f64))
}
