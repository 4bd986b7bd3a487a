//! Embedding-aware classifier, regressor and segmentor heads.
//!
//! Every head projects a proposal feature into the `d`-dimensional embedding
//! space with a learned matrix and scores it against unit-normalized category
//! embeddings. Unseen categories reuse the same projections, which is what lets
//! the heads transfer without unseen supervision.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::embed::{BackgroundKind, BackgroundMode};
use crate::error::{Error, Result};

/// The trainable state: `W^cls`, the four `W^reg_r`, `W^seg` and the background.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `d x p`
    pub w_cls: Array2<f64>,
    /// Four `d x p` matrices producing `(t_x1, t_y1, t_x2, t_y2)`.
    pub w_reg: [Array2<f64>; 4],
    /// `d x t`
    pub w_seg: Array2<f64>,
    pub background: BackgroundMode,
}

impl HeadParams {
    pub fn zeros(d: usize, p: usize, t: usize, background: BackgroundMode) -> Self {
        HeadParams {
            w_cls: Array2::zeros((d, p)),
            w_reg: std::array::from_fn(|_| Array2::zeros((d, p))),
            w_seg: Array2::zeros((d, t)),
            background,
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights. A learned background
    /// starts at the mean of the raw seen embeddings.
    pub fn init<R: Rng>(
        d: usize,
        p: usize,
        t: usize,
        background: BackgroundKind,
        seen_raw: &Array2<f64>,
        rng: &mut R,
    ) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols.max(1) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
        };
        let w_cls = uniform(d, p);
        let w_reg = std::array::from_fn(|_| uniform(d, p));
        let w_seg = uniform(d, t);
        let background = match background {
            BackgroundKind::Fixed => BackgroundMode::Fixed,
            BackgroundKind::Mean => BackgroundMode::Mean,
            BackgroundKind::Learned => BackgroundMode::Learned(
                seen_raw
                    .mean_axis(Axis(0))
                    .unwrap_or_else(|| Array1::zeros(d)),
            ),
        };
        HeadParams {
            w_cls,
            w_reg,
            w_seg,
            background,
        }
    }

    /// `(d, p, t)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w_cls.nrows(), self.w_cls.ncols(), self.w_seg.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        let (d, p, t) = self.dims();
        for (i, w) in self.w_reg.iter().enumerate() {
            if w.dim() != (d, p) {
                return Err(Error::Shape(format!(
                    "w_reg[{i}] is {:?}, expected {:?}",
                    w.dim(),
                    (d, p)
                )));
            }
        }
        if self.w_seg.nrows() != d {
            return Err(Error::dim(d, self.w_seg.nrows(), "w_seg rows"));
        }
        if let Some(b) = self.background.learned() {
            if b.len() != d {
                return Err(Error::dim(d, b.len(), "background vector"));
            }
        }
        let _ = t;
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head parameters".into()));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn len(&self) -> usize {
        let (d, p, t) = self.dims();
        5 * d * p + d * t + self.background.learned().map_or(0, |b| b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All trainable entries in a fixed order: `w_cls`, `w_reg[0..4]`, `w_seg`, `b`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.w_cls.iter());
        for w in &self.w_reg {
            out.extend(w.iter());
        }
        out.extend(self.w_seg.iter());
        if let Some(b) = self.background.learned() {
            out.extend(b.iter());
        }
        out
    }

    /// Inverse of [`HeadParams::flat`], keeping shapes and background kind.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::dim(self.len(), values.len(), "flat parameter vector"));
        }
        let mut it = values.iter().copied();
        for v in self.w_cls.iter_mut() {
            *v = it.next().unwrap();
        }
        for w in &mut self.w_reg {
            for v in w.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in self.w_seg.iter_mut() {
            *v = it.next().unwrap();
        }
        if let BackgroundMode::Learned(b) = &mut self.background {
            for v in b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }
}

/// One region proposal with its frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub image_id: u64,
    pub pbox: BBox,
    /// Pooled proposal feature, length `p`.
    pub z: Array1<f64>,
    /// Spatial mask feature, shape `(n, n, t)` indexed `[row, col, channel]`.
    pub zm: Option<Array3<f64>>,
}

impl ProposalRecord {
    pub fn validate(&self, p: usize, mask: Option<(usize, usize)>) -> Result<()> {
        self.pbox.validate()?;
        if self.z.len() != p {
            return Err(Error::dim(p, self.z.len(), "proposal feature z"));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("proposal feature z".into()));
        }
        if let (Some(zm), Some((n, t))) = (&self.zm, mask) {
            if zm.dim() != (n, n, t) {
                return Err(Error::Shape(format!(
                    "zm is {:?}, expected {:?}",
                    zm.dim(),
                    (n, n, t)
                )));
            }
        }
        if let Some(zm) = &self.zm {
            if zm.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("proposal mask feature zm".into()));
            }
        }
        Ok(())
    }
}

/// How unseen-category regressor and segmentor outputs are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferVariant {
    /// Shared projection scored against the unseen embeddings.
    #[default]
    Learned,
    /// Output of the seen category with the highest embedding cosine.
    MostSimilar,
    /// Clipped-cosine weighted average of seen outputs.
    LinearCombination,
    /// Proposal box unrefined; empty mask.
    NoTransfer,
}

impl TransferVariant {
    pub const ALL: [TransferVariant; 4] = [
        TransferVariant::NoTransfer,
        TransferVariant::MostSimilar,
        TransferVariant::LinearCombination,
        TransferVariant::Learned,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TransferVariant::Learned => "learned",
            TransferVariant::MostSimilar => "most-similar",
            TransferVariant::LinearCombination => "linear-combination",
            TransferVariant::NoTransfer => "no-transfer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

fn project(w: &Array2<f64>, x: ArrayView1<'_, f64>, what: &str) -> Result<Array1<f64>> {
    if w.ncols() != x.len() {
        return Err(Error::dim(w.ncols(), x.len(), what.to_string()));
    }
    Ok(w.dot(&x))
}

fn check_rows(rows: &Array2<f64>, d: usize) -> Result<()> {
    if rows.ncols() != d {
        return Err(Error::dim(d, rows.ncols(), "embedding dimension"));
    }
    Ok(())
}

/// Scores of `rows` (unit category embeddings, one per row) for `z`.
pub fn cls_logits(z: ArrayView1<'_, f64>, params: &HeadParams, rows: &Array2<f64>) -> Result<Array1<f64>> {
    check_rows(rows, params.w_cls.nrows())?;
    let v = project(&params.w_cls, z, "proposal feature z")?;
    Ok(rows.dot(&v))
}

/// Seen-category logits; the last entry is the background logit.
pub fn cls_logits_seen(
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    seen_norm: &Array2<f64>,
) -> Result<Array1<f64>> {
    cls_logits(z, params, seen_norm)
}

pub fn cls_logits_unseen(
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    unseen_norm: &Array2<f64>,
) -> Result<Array1<f64>> {
    cls_logits(z, params, unseen_norm)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Array1<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum = exps.sum();
    Ok(exps / sum)
}

/// Joint softmax over `[seen logits (with background) | unseen logits]`.
pub fn class_probabilities(
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    seen_norm: &Array2<f64>,
    unseen_norm: &Array2<f64>,
) -> Result<Array1<f64>> {
    let seen = cls_logits_seen(z, params, seen_norm)?;
    let unseen = cls_logits_unseen(z, params, unseen_norm)?;
    let joint: Vec<f64> = seen.iter().chain(unseen.iter()).copied().collect();
    softmax(&joint)
}

/// Box deltas for every row of `rows`: entry `(c, r) = (W^reg_r z) . e_c`.
pub fn reg_deltas(z: ArrayView1<'_, f64>, params: &HeadParams, rows: &Array2<f64>) -> Result<Array2<f64>> {
    check_rows(rows, params.w_cls.nrows())?;
    let mut out = Array2::zeros((rows.nrows(), 4));
    for (r, w) in params.w_reg.iter().enumerate() {
        let v = project(w, z, "proposal feature z")?;
        out.column_mut(r).assign(&rows.dot(&v));
    }
    Ok(out)
}

/// Per-pixel mask logits, shape `(n, n, k)`.
pub fn seg_logits(zm: &Array3<f64>, params: &HeadParams, rows: &Array2<f64>) -> Result<Array3<f64>> {
    check_rows(rows, params.w_seg.nrows())?;
    let (n, m, t) = zm.dim();
    if t != params.w_seg.ncols() {
        return Err(Error::dim(params.w_seg.ncols(), t, "mask feature channels"));
    }
    let flat = zm
        .view()
        .into_shape_with_order((n * m, t))
        .map_err(|e| Error::Shape(e.to_string()))?;
    // (n*m x t) . (t x d) . (d x k)
    let logits = flat.dot(&params.w_seg.t()).dot(&rows.t());
    logits
        .into_shape_with_order((n, m, rows.nrows()))
        .map_err(|e| Error::Shape(e.to_string()))
}

/// `|C^u| x |C^s|` mixing weights for the heuristic transfer variants, or
/// `None` for `Learned` and `NoTransfer`.
pub fn transfer_weights(
    seen_norm: &Array2<f64>,
    unseen_norm: &Array2<f64>,
    variant: TransferVariant,
) -> Option<Array2<f64>> {
    let cos = unseen_norm.dot(&seen_norm.t());
    let most_similar = |u: usize| {
        let row = cos.row(u);
        let mut best = 0;
        for (s, &c) in row.iter().enumerate() {
            if c > row[best] {
                best = s;
            }
        }
        best
    };
    let (nu, ns) = cos.dim();
    match variant {
        TransferVariant::Learned | TransferVariant::NoTransfer => None,
        TransferVariant::MostSimilar => {
            let mut w = Array2::zeros((nu, ns));
            for u in 0..nu {
                w[[u, most_similar(u)]] = 1.0;
            }
            Some(w)
        }
        TransferVariant::LinearCombination => {
            let mut w = cos.mapv(|c| c.max(0.0));
            for u in 0..nu {
                let sum = w.row(u).sum();
                if sum > 0.0 {
                    w.row_mut(u).mapv_inplace(|v| v / sum);
                } else {
                    let best = most_similar(u);
                    w.row_mut(u).fill(0.0);
                    w[[u, best]] = 1.0;
                }
            }
            Some(w)
        }
    }
}

/// Unseen-category box deltas under the given transfer variant, `|C^u| x 4`.
pub fn unseen_reg_by_variant(
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    seen_norm: &Array2<f64>,
    unseen_norm: &Array2<f64>,
    variant: TransferVariant,
) -> Result<Array2<f64>> {
    match variant {
        TransferVariant::Learned => reg_deltas(z, params, unseen_norm),
        TransferVariant::NoTransfer => {
            check_rows(unseen_norm, params.w_cls.nrows())?;
            Ok(Array2::zeros((unseen_norm.nrows(), 4)))
        }
        _ => {
            let seen = reg_deltas(z, params, seen_norm)?;
            check_rows(unseen_norm, seen_norm.ncols())?;
            let w = transfer_weights(seen_norm, unseen_norm, variant).expect("heuristic variant");
            Ok(w.dot(&seen))
        }
    }
}

/// Unseen-category mask logits under the given transfer variant, `(n, n, |C^u|)`.
///
/// `NoTransfer` yields `-inf` everywhere, i.e. an empty mask.
pub fn unseen_seg_by_variant(
    zm: &Array3<f64>,
    params: &HeadParams,
    seen_norm: &Array2<f64>,
    unseen_norm: &Array2<f64>,
    variant: TransferVariant,
) -> Result<Array3<f64>> {
    let (n, m, _) = zm.dim();
    match variant {
        TransferVariant::Learned => seg_logits(zm, params, unseen_norm),
        TransferVariant::NoTransfer => {
            check_rows(unseen_norm, params.w_seg.nrows())?;
            Ok(Array3::from_elem((n, m, unseen_norm.nrows()), f64::NEG_INFINITY))
        }
        _ => {
            let seen = seg_logits(zm, params, seen_norm)?;
            check_rows(unseen_norm, seen_norm.ncols())?;
            let w = transfer_weights(seen_norm, unseen_norm, variant).expect("heuristic variant");
            let flat = seen
                .into_shape_with_order((n * m, seen_norm.nrows()))
                .map_err(|e| Error::Shape(e.to_string()))?;
            flat.dot(&w.t())
                .into_shape_with_order((n, m, unseen_norm.nrows()))
                .map_err(|e| Error::Shape(e.to_string()))
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Channel `c` of a `(n, n, k)` logit tensor mapped through the sigmoid.
pub fn mask_probabilities(logits: &Array3<f64>, c: usize) -> Array2<f64> {
    logits.slice(s![.., .., c]).mapv(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::normalize_rows;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(d: usize, p: usize, t: usize, seed: u64) -> HeadParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = HeadParams::zeros(d, p, t, BackgroundMode::Learned(Array1::zeros(d)));
        let flat: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        params.set_flat(&flat).unwrap();
        params
    }

    fn random_unit_rows(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        normalize_rows(&Array2::from_shape_simple_fn((k, d), || rng.random_range(-1.0..1.0))).unwrap()
    }

    fn identity_params() -> HeadParams {
        let mut p = HeadParams::zeros(2, 2, 2, BackgroundMode::Fixed);
        p.w_cls = Array2::eye(2);
        p
    }

    #[test]
    fn identity_projection_logits() {
        let params = identity_params();
        let h = 1.0 / 2f64.sqrt();
        let seen = array![[1.0, 0.0], [0.0, 1.0], [h, h]];
        let l = cls_logits_seen(array![2.0, 0.0].view(), &params, &seen).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-15);
        assert_eq!(l[1], 0.0);
        assert!((l[2] - 1.41421356).abs() < 1e-6);

        let z0 = cls_logits_seen(array![0.0, 0.0].view(), &params, &seen).unwrap();
        assert!(z0.iter().all(|v| *v == 0.0));

        let unseen = array![[1.0, 0.0], [0.0, 1.0]];
        let lu = cls_logits_unseen(array![2.0, 0.0].view(), &params, &unseen).unwrap();
        assert_eq!(lu[0], l[0]);
        assert_eq!(lu[1], l[1]);
    }

    #[test]
    fn logits_match_loop_oracle() {
        let (d, p, k) = (6, 9, 4);
        let params = random_params(d, p, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows = random_unit_rows(k + 1, d, &mut rng);
        let z = Array1::from_shape_simple_fn(p, || rng.random_range(-2.0..2.0));
        let got = cls_logits_seen(z.view(), &params, &rows).unwrap();
        for c in 0..=k {
            let mut expect = 0.0;
            for i in 0..d {
                let mut wz = 0.0;
                for j in 0..p {
                    wz += params.w_cls[[i, j]] * z[j];
                }
                expect += wz * rows[[c, i]];
            }
            assert!((got[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_a_distribution() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, array![0.5, 0.5]);
        let a = softmax(&[1.0, -2.0, 0.3]).unwrap();
        let b = softmax(&[101.0, 98.0, 100.3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(softmax(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = softmax(&logits).unwrap();
        // Kahan-summed exp
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for l in &logits {
            let y = l.exp() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        for (g, l) in got.iter().zip(&logits) {
            assert!((g - l.exp() / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn reg_deltas_linear_and_zero() {
        let params = random_params(3, 5, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = random_unit_rows(4, 3, &mut rng);
        let z = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let a = reg_deltas(z.view(), &params, &rows).unwrap();
        let b = reg_deltas((&z * 2.5).view(), &params, &rows).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
        for c in 0..4 {
            for r in 0..4 {
                let mut expect = 0.0;
                for i in 0..3 {
                    for j in 0..5 {
                        expect += params.w_reg[r][[i, j]] * z[j] * rows[[c, i]];
                    }
                }
                assert!((a[[c, r]] - expect).abs() < 1e-12);
            }
        }
        let zero = HeadParams::zeros(3, 5, 2, BackgroundMode::Fixed);
        assert!(reg_deltas(z.view(), &zero, &rows).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn seg_logits_match_triple_loop() {
        let (n, t, k, d) = (4, 5, 3, 6);
        let params = random_params(d, 2, t, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows = random_unit_rows(k, d, &mut rng);
        let zm = Array3::from_shape_simple_fn((n, n, t), || rng.random_range(-1.0..1.0));
        let got = seg_logits(&zm, &params, &rows).unwrap();
        for y in 0..n {
            for x in 0..n {
                for c in 0..k {
                    let mut expect = 0.0;
                    for i in 0..d {
                        let mut v = 0.0;
                        for j in 0..t {
                            v += params.w_seg[[i, j]] * zm[[y, x, j]];
                        }
                        expect += v * rows[[c, i]];
                    }
                    assert!((got[[y, x, c]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn seg_logits_are_per_pixel() {
        let params = random_params(4, 2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = random_unit_rows(2, 4, &mut rng);
        let pixel = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let mut zm = Array3::zeros((3, 3, 3));
        for y in 0..3 {
            for x in 0..3 {
                zm.slice_mut(s![y, x, ..]).assign(&pixel);
            }
        }
        let out = seg_logits(&zm, &params, &rows).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.slice(s![y, x, ..]), out.slice(s![0, 0, ..]));
            }
        }
        let mut changed = zm.clone();
        changed[[1, 2, 0]] += 1.0;
        let out2 = seg_logits(&changed, &params, &rows).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                if (y, x) != (1, 2) {
                    assert_eq!(out.slice(s![y, x, ..]), out2.slice(s![y, x, ..]));
                }
            }
        }
    }

    #[test]
    fn no_transfer_variants() {
        let params = random_params(2, 3, 2, 5);
        let seen = array![[1.0, 0.0], [0.0, 1.0]];
        let unseen = array![[0.6, 0.8]];
        let z = array![1.0, -1.0, 0.5];
        let r = unseen_reg_by_variant(z.view(), &params, &seen, &unseen, TransferVariant::NoTransfer).unwrap();
        assert_eq!(r, Array2::<f64>::zeros((1, 4)));
        let zm = Array3::from_elem((2, 2, 2), 0.3);
        let m = unseen_seg_by_variant(&zm, &params, &seen, &unseen, TransferVariant::NoTransfer).unwrap();
        assert!(mask_probabilities(&m, 0).iter().all(|p| *p == 0.0));
    }

    #[test]
    fn linear_combination_weights() {
        let params = random_params(2, 3, 2, 6);
        let seen = array![[1.0, 0.0], [0.0, 1.0]];
        let unseen = array![[0.6, 0.8]];
        let w = transfer_weights(&seen, &unseen, TransferVariant::LinearCombination).unwrap();
        assert!((w[[0, 0]] - 0.6 / 1.4).abs() < 1e-15);
        assert!((w[[0, 1]] - 0.8 / 1.4).abs() < 1e-15);
        assert!((w[[0, 0]] - 0.42857).abs() < 1e-5);

        let z = array![0.3, -0.7, 1.1];
        let sd = reg_deltas(z.view(), &params, &seen).unwrap();
        let lc = unseen_reg_by_variant(z.view(), &params, &seen, &unseen, TransferVariant::LinearCombination).unwrap();
        for r in 0..4 {
            let expect = 0.6 / 1.4 * sd[[0, r]] + 0.8 / 1.4 * sd[[1, r]];
            assert!((lc[[0, r]] - expect).abs() < 1e-12);
        }
        let ms = unseen_reg_by_variant(z.view(), &params, &seen, &unseen, TransferVariant::MostSimilar).unwrap();
        assert_eq!(ms.row(0), sd.row(1));
    }

    #[test]
    fn linear_combination_falls_back_when_all_cosines_negative() {
        let seen = array![[1.0, 0.0], [0.0, 1.0]];
        let unseen = array![[-0.6, -0.8]];
        let w = transfer_weights(&seen, &unseen, TransferVariant::LinearCombination).unwrap();
        assert_eq!(w, array![[1.0, 0.0]]);
    }

    #[test]
    fn shared_category_gets_identical_outputs() {
        let params = random_params(3, 4, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seen = random_unit_rows(3, 3, &mut rng);
        let unseen = seen.slice(s![1..2, ..]).to_owned();
        let z = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
        let zm = Array3::from_shape_simple_fn((3, 3, 2), || rng.random_range(-1.0..1.0));
        let sd = reg_deltas(z.view(), &params, &seen).unwrap();
        let ss = seg_logits(&zm, &params, &seen).unwrap();
        for v in [TransferVariant::Learned, TransferVariant::MostSimilar] {
            let ud = unseen_reg_by_variant(z.view(), &params, &seen, &unseen, v).unwrap();
            for r in 0..4 {
                assert!((ud[[0, r]] - sd[[1, r]]).abs() < 1e-12, "{v:?}");
            }
            let us = unseen_seg_by_variant(&zm, &params, &seen, &unseen, v).unwrap();
            for (a, b) in us.slice(s![.., .., 0]).iter().zip(ss.slice(s![.., .., 1])) {
                assert!((a - b).abs() < 1e-12, "{v:?}");
            }
        }
        let lu = cls_logits_unseen(z.view(), &params, &unseen).unwrap();
        let ls = cls_logits_seen(z.view(), &params, &seen).unwrap();
        assert_eq!(lu[0], ls[1]);
    }

    #[test]
    fn most_similar_segmentor_copies_argmax_channel() {
        let params = random_params(5, 2, 4, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let seen = random_unit_rows(4, 5, &mut rng);
        let unseen = random_unit_rows(3, 5, &mut rng);
        let zm = Array3::from_shape_simple_fn((3, 3, 4), || rng.random_range(-1.0..1.0));
        let ss = seg_logits(&zm, &params, &seen).unwrap();
        let us = unseen_seg_by_variant(&zm, &params, &seen, &unseen, TransferVariant::MostSimilar).unwrap();
        for u in 0..3 {
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            for s_ in 0..4 {
                let mut c = 0.0;
                for i in 0..5 {
                    c += unseen[[u, i]] * seen[[s_, i]];
                }
                if c > best_cos {
                    best_cos = c;
                    best = s_;
                }
            }
            for y in 0..3 {
                for x in 0..3 {
                    assert!((us[[y, x, u]] - ss[[y, x, best]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_seen_category_makes_heuristics_agree() {
        let params = random_params(3, 4, 2, 30);
        let seen = array![[0.0, 1.0, 0.0]];
        let unseen = array![[0.6, 0.8, 0.0], [0.0, 0.6, 0.8]];
        let z = array![0.1, 0.2, -0.3, 0.4];
        let a = unseen_reg_by_variant(z.view(), &params, &seen, &unseen, TransferVariant::MostSimilar).unwrap();
        let b = unseen_reg_by_variant(z.view(), &params, &seen, &unseen, TransferVariant::LinearCombination).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors_are_reported() {
        let params = random_params(3, 4, 2, 1);
        let rows = Array2::eye(2);
        assert!(matches!(
            cls_logits_seen(array![1.0, 2.0, 3.0, 4.0].view(), &params, &rows),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            cls_logits_seen(array![1.0].view(), &params, &Array2::eye(3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let params = random_params(3, 4, 2, 77);
        let mut copy = HeadParams::zeros(3, 4, 2, BackgroundMode::Learned(Array1::zeros(3)));
        copy.set_flat(&params.flat()).unwrap();
        assert_eq!(copy, params);
        assert_eq!(params.len(), 5 * 12 + 6 + 3);
    }
}
