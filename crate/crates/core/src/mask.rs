//! Square binary mask grids registered to a box, and their rasterization onto an image canvas.

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// An `n x n` binary grid stretched over a box. Row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    bits: Array2<bool>,
}

impl MaskGrid {
    pub fn new(bits: Array2<bool>) -> Result<Self> {
        let (h, w) = bits.dim();
        if h != w || h == 0 {
            return Err(Error::Shape(format!("mask grid must be square and non-empty, got {h}x{w}")));
        }
        Ok(MaskGrid { bits })
    }

    pub fn from_fn(n: usize, f: impl FnMut((usize, usize)) -> bool) -> Self {
        MaskGrid {
            bits: Array2::from_shape_fn((n.max(1), n.max(1)), f),
        }
    }

    /// Thresholds a probability grid: a cell is on when `p > threshold`.
    pub fn from_probabilities(probs: &Array2<f64>, threshold: f64) -> Result<Self> {
        MaskGrid::new(probs.mapv(|p| p > threshold))
    }

    pub fn size(&self) -> usize {
        self.bits.nrows()
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|b| if *b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(size: usize, bits: &str) -> Result<Self> {
        if bits.len() != size * size {
            return Err(Error::dim(size * size, bits.len(), "mask bitstring length"));
        }
        let v = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format {
                    what: "mask",
                    msg: format!("unexpected character {other:?} in bitstring"),
                }),
            })
            .collect::<Result<Vec<bool>>>()?;
        MaskGrid::new(Array2::from_shape_vec((size, size), v).map_err(|e| Error::Shape(e.to_string()))?)
    }

    /// Nearest-neighbour lookup of image point `(x, y)` through `frame`; false outside it.
    pub fn sample(&self, frame: &BBox, x: f64, y: f64) -> bool {
        if !frame.contains_point(x, y) {
            return false;
        }
        let n = self.size();
        let col = cell_index(x - frame.x1, frame.width(), n);
        let row = cell_index(y - frame.y1, frame.height(), n);
        self.bits[[row, col]]
    }

    /// Resamples this mask (registered to `frame`) onto an `n x n` grid over `target`,
    /// giving 0/1 targets for a proposal's mask head.
    pub fn resample(&self, frame: &BBox, target: &BBox, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(row, col)| {
            let x = target.x1 + (col as f64 + 0.5) / n as f64 * target.width();
            let y = target.y1 + (row as f64 + 0.5) / n as f64 * target.height();
            if self.sample(frame, x, y) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Full-canvas binary mask; pixel `(row, col)` is on when its center maps to an on cell.
    pub fn rasterize(&self, frame: &BBox, width: usize, height: usize) -> Array2<bool> {
        let mut canvas = Array2::from_elem((height, width), false);
        if frame.width() <= 0.0 || frame.height() <= 0.0 {
            return canvas;
        }
        let r0 = frame.y1.floor().max(0.0) as usize;
        let r1 = (frame.y2.ceil().max(0.0) as usize).min(height);
        let c0 = frame.x1.floor().max(0.0) as usize;
        let c1 = (frame.x2.ceil().max(0.0) as usize).min(width);
        for row in r0..r1 {
            for col in c0..c1 {
                if self.sample(frame, col as f64 + 0.5, row as f64 + 0.5) {
                    canvas[[row, col]] = true;
                }
            }
        }
        canvas
    }
}

fn cell_index(offset: f64, extent: f64, n: usize) -> usize {
    ((offset / extent * n as f64).floor().max(0.0) as usize).min(n - 1)
}

#[derive(Serialize, Deserialize)]
struct MaskGridRepr {
    size: usize,
    bits: String,
}

impl Serialize for MaskGrid {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskGridRepr {
            size: self.size(),
            bits: self.to_bitstring(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskGrid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MaskGridRepr::deserialize(d)?;
        MaskGrid::from_bitstring(repr.size, &repr.bits).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitstring_roundtrip() {
        let m = MaskGrid::from_fn(3, |(r, c)| (r + c) % 2 == 0);
        assert_eq!(m.to_bitstring(), "101010101");
        assert_eq!(MaskGrid::from_bitstring(3, "101010101").unwrap(), m);
        assert!(MaskGrid::from_bitstring(3, "10").is_err());
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"size":3,"bits":"101010101"}"#);
        assert_eq!(serde_json::from_str::<MaskGrid>(&json).unwrap(), m);
    }

    #[test]
    fn full_mask_rasterizes_to_box() {
        let m = MaskGrid::from_fn(4, |_| true);
        let canvas = m.rasterize(&BBox::new(2.0, 1.0, 6.0, 4.0), 10, 8);
        assert_eq!(canvas.iter().filter(|b| **b).count(), 12);
        assert!(canvas[[1, 2]] && canvas[[3, 5]]);
        assert!(!canvas[[0, 2]] && !canvas[[1, 6]]);
    }

    #[test]
    fn resample_onto_same_box_is_identity() {
        let m = MaskGrid::from_fn(5, |(r, c)| r >= c);
        let b = BBox::new(10.0, 10.0, 30.0, 30.0);
        let out = m.resample(&b, &b, 5);
        for ((r, c), v) in out.indexed_iter() {
            assert_eq!(*v == 1.0, r >= c);
        }
        // target outside the frame is empty
        let far = m.resample(&b, &BBox::new(50.0, 50.0, 60.0, 60.0), 5);
        assert!(far.iter().all(|v| *v == 0.0));
    }
}
