//! Central finite-difference verification of analytic gradients.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embed::{augment_rows, normalize_rows, BackgroundMode};
use crate::error::{Error, Result};
use crate::heads::HeadParams;

use super::loss::{
    ce_head_loss_grad, l2error_loss_grad, mask_loss_grad, maxmargin_loss_grad, regression_loss_grad,
};

/// Finite-difference checker settings.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Denominator floor for the relative error, so exactly-zero gradients compare absolutely.
    pub floor: f64,
    /// Parameter indices at non-differentiable points.
    pub skip: Vec<usize>,
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        GradCheck {
            epsilon,
            floor: 1e-6,
            skip: Vec::new(),
        }
    }

    pub fn skip(mut self, indices: impl IntoIterator<Item = usize>) -> Self {
        self.skip.extend(indices);
        self
    }

    /// Max relative error between the analytic gradient returned by `f` at `theta`
    /// and central differences `(f(θ+ε) - f(θ-ε)) / 2ε`, over all non-skipped entries.
    pub fn run<F>(&self, mut f: F, theta: &[f64]) -> Result<f64>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        let (loss, analytic) = f(theta)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if analytic.len() != theta.len() {
            return Err(Error::dim(theta.len(), analytic.len(), "analytic gradient"));
        }
        let mut probe = theta.to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            if self.skip.contains(&i) {
                continue;
            }
            probe[i] = theta[i] + self.epsilon;
            let (hi, _) = f(&probe)?;
            probe[i] = theta[i] - self.epsilon;
            let (lo, _) = f(&probe)?;
            probe[i] = theta[i];
            if !hi.is_finite() || !lo.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            let numeric = (hi - lo) / (2.0 * self.epsilon);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

/// [`GradCheck::run`] with default floor and no skipped entries.
pub fn finite_diff_check<F>(loss_fn: F, theta: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    GradCheck::new(epsilon).run(loss_fn, theta)
}

/// Loss terms covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteLoss {
    CrossEntropy,
    SmoothL1,
    PixelBce,
    MaxMargin,
    L2Error,
}

impl SuiteLoss {
    pub const ALL: [SuiteLoss; 5] = [
        SuiteLoss::CrossEntropy,
        SuiteLoss::SmoothL1,
        SuiteLoss::PixelBce,
        SuiteLoss::MaxMargin,
        SuiteLoss::L2Error,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SuiteLoss::CrossEntropy => "cross-entropy",
            SuiteLoss::SmoothL1 => "smooth-l1",
            SuiteLoss::PixelBce => "pixel-bce",
            SuiteLoss::MaxMargin => "max-margin",
            SuiteLoss::L2Error => "l2-error",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub loss: SuiteLoss,
    pub points: usize,
    pub max_rel_error: f64,
}

/// Distance from the nearest kink under which a random point is redrawn.
const KINK_GAP: f64 = 1e-3;
const MARGIN: f64 = 0.2;

struct Point {
    params: HeadParams,
    seen_raw: Array2<f64>,
    z: Array1<f64>,
    zm: Array3<f64>,
    target: usize,
    deltas: [f64; 4],
    mask: Array2<f64>,
}

fn random_point(rng: &mut ChaCha8Rng) -> Point {
    let (d, p, t, n, k) = (4, 5, 3, 3, 3);
    let mut u = |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
    let mut params = HeadParams::zeros(d, p, t, BackgroundMode::Learned(Array1::zeros(d)));
    params.w_cls = u((d, p));
    params.w_reg = std::array::from_fn(|_| u((d, p)));
    params.w_seg = u((d, t));
    let seen_raw = u((k, d));
    params.background = BackgroundMode::Learned(u((1, d)).row(0).to_owned());
    let z = u((1, p)).row(0).to_owned();
    let zm = Array3::from_shape_simple_fn((n, n, t), || rng.random_range(-1.0..1.0));
    let deltas = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
    let mask = Array2::from_shape_simple_fn((n, n), || if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let target = rng.random_range(0..=k);
    Point {
        params,
        seen_raw,
        z,
        zm,
        target,
        deltas,
        mask,
    }
}

fn seen_bg(params: &HeadParams, seen_raw: &Array2<f64>) -> Result<Array2<f64>> {
    normalize_rows(&augment_rows(seen_raw, &params.background))
}

fn objective(loss: SuiteLoss, pt: &Point, params: &HeadParams) -> Result<(f64, Vec<f64>)> {
    let rows = seen_bg(params, &pt.seen_raw)?;
    // regression and mask terms use a seen (non-background) category
    let cat = pt.target.min(pt.seen_raw.nrows() - 1);
    let (l, g) = match loss {
        SuiteLoss::CrossEntropy => ce_head_loss_grad(pt.z.view(), params, &rows, pt.target)?,
        SuiteLoss::MaxMargin => maxmargin_loss_grad(pt.z.view(), params, &rows, pt.target, MARGIN)?,
        SuiteLoss::L2Error => l2error_loss_grad(pt.z.view(), params, &rows, pt.target)?,
        SuiteLoss::SmoothL1 => {
            let (l, g, _) = regression_loss_grad(pt.z.view(), params, rows.row(cat), &pt.deltas)?;
            (l, g)
        }
        SuiteLoss::PixelBce => mask_loss_grad(&pt.zm, params, rows.row(cat), &pt.mask)?,
    };
    Ok((l, g.flat()))
}

/// True when `pt` sits within [`KINK_GAP`] of a non-differentiable point of `loss`.
fn near_kink(loss: SuiteLoss, pt: &Point) -> Result<bool> {
    let rows = seen_bg(&pt.params, &pt.seen_raw)?;
    match loss {
        SuiteLoss::SmoothL1 => {
            let cat = pt.target.min(pt.seen_raw.nrows() - 1);
            let (_, _, residual) = regression_loss_grad(pt.z.view(), &pt.params, rows.row(cat), &pt.deltas)?;
            Ok(residual.iter().any(|x| (x.abs() - 1.0).abs() < KINK_GAP))
        }
        SuiteLoss::MaxMargin => {
            let v = pt.params.w_cls.dot(&pt.z);
            let s = rows.dot(&(&v / v.dot(&v).sqrt()));
            Ok((0..s.len())
                .filter(|&c| c != pt.target)
                .any(|c| (MARGIN - s[pt.target] + s[c]).abs() < KINK_GAP))
        }
        _ => Ok(false),
    }
}

/// Checks every loss against central differences at `points` seeded random
/// parameter settings (redrawing points that fall next to a kink).
pub fn gradient_suite(points: usize, seed: u64, epsilon: f64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checker = GradCheck::new(epsilon);
    let mut out = Vec::new();
    for loss in SuiteLoss::ALL {
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < points {
            let pt = random_point(&mut rng);
            if near_kink(loss, &pt)? {
                continue;
            }
            let mut scratch = pt.params.clone();
            let err = checker.run(
                |theta| {
                    scratch.set_flat(theta)?;
                    objective(loss, &pt, &scratch)
                },
                &pt.params.flat(),
            )?;
            worst = worst.max(err);
            done += 1;
        }
        out.push(SuiteResult {
            loss,
            points,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
