//! Losses and their analytic gradients, both on raw outputs and chained back
//! to the head parameters.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{sigmoid, softmax, HeadParams};

/// Gradient with the same layout as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w_cls: Array2<f64>,
    pub w_reg: [Array2<f64>; 4],
    pub w_seg: Array2<f64>,
    /// Present iff the background is learned.
    pub b: Option<Array1<f64>>,
}

impl HeadGrads {
    pub fn zeros_like(params: &HeadParams) -> Self {
        HeadGrads {
            w_cls: Array2::zeros(params.w_cls.dim()),
            w_reg: std::array::from_fn(|r| Array2::zeros(params.w_reg[r].dim())),
            w_seg: Array2::zeros(params.w_seg.dim()),
            b: params.background.learned().map(|b| Array1::zeros(b.len())),
        }
    }

    /// Same ordering as [`HeadParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_cls.iter());
        for w in &self.w_reg {
            out.extend(w.iter());
        }
        out.extend(self.w_seg.iter());
        if let Some(b) = &self.b {
            out.extend(b.iter());
        }
        out
    }
}

/// Loss used to train the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClassifierLoss {
    CrossEntropy,
    /// Hinge on cosine similarities.
    MaxMargin {
        #[serde(default = "default_margin")]
        margin: f64,
    },
    /// Squared distance between the projected feature and the target embedding.
    L2Error,
}

fn default_margin() -> f64 {
    0.2
}

impl Default for ClassifierLoss {
    fn default() -> Self {
        ClassifierLoss::CrossEntropy
    }
}

impl ClassifierLoss {
    pub fn name(&self) -> &'static str {
        match self {
            ClassifierLoss::CrossEntropy => "cross-entropy",
            ClassifierLoss::MaxMargin { .. } => "max-margin",
            ClassifierLoss::L2Error => "l2-error",
        }
    }
}

/// Softmax cross-entropy: loss `-log softmax(logits)[target]`, gradient `softmax - onehot`.
pub fn ce_loss_grad(logits: &[f64], target: usize) -> Result<(f64, Array1<f64>)> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let probs = softmax(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[target];
    let mut grad = probs;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Sum of per-coordinate smooth-L1 with unit transition point.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64]) -> (f64, Array1<f64>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < 1.0 {
                loss += 0.5 * x * x;
                x
            } else {
                loss += x.abs() - 0.5;
                x.signum()
            }
        })
        .collect();
    (loss, grad)
}

/// Mean per-pixel binary cross-entropy on logits.
pub fn bce_mask_grad(logits: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "mask logits {:?} vs target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mask logits".into()));
    }
    let count = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for ((g, &l), &t) in grad.iter_mut().zip(logits).zip(target) {
        // max(l, 0) - l t + log(1 + exp(-|l|))
        loss += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        *g = (sigmoid(l) - t) / count;
    }
    Ok((loss / count, grad))
}

/// Rows of `[E^s ; b]` normalized; a row-gradient on the background row is
/// turned into a gradient on the raw `b`.
fn background_chain(params: &HeadParams, grad_row: ArrayView1<'_, f64>) -> Option<Array1<f64>> {
    let b = params.background.learned()?;
    let norm = b.dot(b).sqrt();
    let unit = b / norm;
    let along = unit.dot(&grad_row);
    Some((&grad_row - &(unit * along)) / norm)
}

fn check_target(target: usize, rows: &Array2<f64>) -> Result<()> {
    if target >= rows.nrows() {
        return Err(Error::TargetOutOfRange {
            index: target,
            len: rows.nrows(),
        });
    }
    Ok(())
}

fn project(params: &HeadParams, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if z.len() != params.w_cls.ncols() {
        return Err(Error::dim(params.w_cls.ncols(), z.len(), "proposal feature z"));
    }
    Ok(params.w_cls.dot(&z))
}

fn outer(a: &Array1<f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Gradients for the classifier head given `dL/dv` (v = W^cls z) and `dL/d(row)`
/// for the background row of `seen_bg`.
fn classifier_grads(
    params: &HeadParams,
    z: ArrayView1<'_, f64>,
    grad_v: &Array1<f64>,
    grad_bg_row: Option<Array1<f64>>,
) -> HeadGrads {
    let mut grads = HeadGrads::zeros_like(params);
    grads.w_cls = outer(grad_v, z);
    if let (Some(gb), Some(row)) = (grads.b.as_mut(), grad_bg_row) {
        if let Some(chain) = background_chain(params, row.view()) {
            *gb = chain;
        }
    }
    grads
}

/// Cross-entropy on the seen+background logits, chained to `W^cls` and `b`.
pub fn ce_head_loss_grad(
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    seen_bg: &Array2<f64>,
    target: usize,
) -> Result<(f64, HeadGrads)> {
    check_target(target, seen_bg)?;
    let v = project(params, z)?;
    let logits = seen_bg.dot(&v);
    let (loss, g) = ce_loss_grad(logits.as_slice().unwrap(), target)?;
    let grad_v = seen_bg.t().dot(&g);
    let bg = seen_bg.nrows() - 1;
    let grad_bg_row = &v * g[bg];
    Ok((loss, classifier_grads(params, z, &grad_v, Some(grad_bg_row))))
}

/// Hinge loss on cosine similarities `s_c = cos(W^cls z, e_c)`:
/// `sum_{c != target} max(0, margin - s_target + s_c)`. The background row takes part.
pub fn maxmargin_loss_grad(
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    seen_bg: &Array2<f64>,
    target: usize,
    margin: f64,
) -> Result<(f64, HeadGrads)> {
    check_target(target, seen_bg)?;
    let v = project(params, z)?;
    let vnorm = v.dot(&v).sqrt();
    if vnorm == 0.0 || !vnorm.is_finite() {
        return Err(Error::Numerical(
            "projected feature has zero norm; cosine undefined".into(),
        ));
    }
    let u = &v / vnorm;
    let s = seen_bg.dot(&u);
    let mut loss = 0.0;
    let mut h = Array1::zeros(s.len());
    for c in 0..s.len() {
        if c == target {
            continue;
        }
        let term = margin - s[target] + s[c];
        if term > 0.0 {
            loss += term;
            h[c] += 1.0;
            h[target] -= 1.0;
        }
    }
    let grad_u = seen_bg.t().dot(&h);
    let grad_v = (&grad_u - &(&u * u.dot(&grad_u))) / vnorm;
    let bg = seen_bg.nrows() - 1;
    let grad_bg_row = &u * h[bg];
    Ok((loss, classifier_grads(params, z, &grad_v, Some(grad_bg_row))))
}

/// `||W^cls z - e_target||^2` against the normalized target row.
pub fn l2error_loss_grad(
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    seen_bg: &Array2<f64>,
    target: usize,
) -> Result<(f64, HeadGrads)> {
    check_target(target, seen_bg)?;
    let v = project(params, z)?;
    let diff = &v - &seen_bg.row(target);
    let loss = diff.dot(&diff);
    let grad_v = &diff * 2.0;
    let grad_bg_row = (target == seen_bg.nrows() - 1).then(|| &diff * -2.0);
    Ok((loss, classifier_grads(params, z, &grad_v, grad_bg_row)))
}

/// Classifier loss of the configured kind.
pub fn classifier_loss_grad(
    kind: ClassifierLoss,
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    seen_bg: &Array2<f64>,
    target: usize,
) -> Result<(f64, HeadGrads)> {
    match kind {
        ClassifierLoss::CrossEntropy => ce_head_loss_grad(z, params, seen_bg, target),
        ClassifierLoss::MaxMargin { margin } => maxmargin_loss_grad(z, params, seen_bg, target, margin),
        ClassifierLoss::L2Error => l2error_loss_grad(z, params, seen_bg, target),
    }
}

/// Smooth-L1 between the predicted deltas for category row `e_c` and `target`,
/// chained to the four `W^reg_r`. Also returns the per-coordinate residuals.
pub fn regression_loss_grad(
    z: ArrayView1<'_, f64>,
    params: &HeadParams,
    category_row: ArrayView1<'_, f64>,
    target: &[f64; 4],
) -> Result<(f64, HeadGrads, [f64; 4])> {
    let mut pred = [0.0; 4];
    for (r, w) in params.w_reg.iter().enumerate() {
        if z.len() != w.ncols() {
            return Err(Error::dim(w.ncols(), z.len(), "proposal feature z"));
        }
        pred[r] = w.dot(&z).dot(&category_row);
    }
    let (loss, g) = smooth_l1_grad(&pred, target);
    let mut grads = HeadGrads::zeros_like(params);
    let e = category_row.to_owned();
    for r in 0..4 {
        grads.w_reg[r] = outer(&(&e * g[r]), z);
    }
    let residual = std::array::from_fn(|r| pred[r] - target[r]);
    Ok((loss, grads, residual))
}

/// Pixel BCE on the mask channel of category row `e_c`, chained to `W^seg`.
pub fn mask_loss_grad(
    zm: &Array3<f64>,
    params: &HeadParams,
    category_row: ArrayView1<'_, f64>,
    target: &Array2<f64>,
) -> Result<(f64, HeadGrads)> {
    let (n, m, t) = zm.dim();
    if t != params.w_seg.ncols() {
        return Err(Error::dim(params.w_seg.ncols(), t, "mask feature channels"));
    }
    let flat = zm
        .view()
        .into_shape_with_order((n * m, t))
        .map_err(|e| Error::Shape(e.to_string()))?;
    // per-pixel scalar: e_c . (W^seg zm[y,x]) = (W^seg^T e_c) . zm[y,x]
    let wte = params.w_seg.t().dot(&category_row);
    let logits = flat
        .dot(&wte)
        .into_shape_with_order((n, m))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (loss, g) = bce_mask_grad(&logits, target)?;
    let g_flat = g.into_shape_with_order(n * m).map_err(|e| Error::Shape(e.to_string()))?;
    // dL/dW^seg = e_c (sum_px g_px zm_px)^T
    let zsum = flat.t().dot(&g_flat);
    let mut grads = HeadGrads::zeros_like(params);
    grads.w_seg = outer(&category_row.to_owned(), zsum.view());
    Ok((loss, grads))
}

/// `acc += scale * g`
pub fn accumulate(acc: &mut HeadGrads, g: &HeadGrads, scale: f64) {
    acc.w_cls.scaled_add(scale, &g.w_cls);
    for r in 0..4 {
        acc.w_reg[r].scaled_add(scale, &g.w_reg[r]);
    }
    acc.w_seg.scaled_add(scale, &g.w_seg);
    if let (Some(a), Some(b)) = (acc.b.as_mut(), g.b.as_ref()) {
        a.scaled_add(scale, b);
    }
}
