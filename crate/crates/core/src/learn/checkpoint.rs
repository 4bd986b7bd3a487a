//! JSON checkpoint container for [`HeadParams`].
//!
//! ```text
//! {
//!   "format": "zsdet-heads", "version": 1,
//!   "d": .., "p": .., "t": ..,
//!   "background": "fixed" | "mean" | "learned",
//!   "w_cls": [[..p..] x d],
//!   "w_reg": [[[..p..] x d] x 4],
//!   "w_seg": [[..t..] x d],
//!   "b": [..d..] | null,
//!   "checksum": "<sha256 hex of the compact JSON of every field above>"
//! }
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{BackgroundKind, BackgroundMode};
use crate::error::{Error, Result};
use crate::heads::HeadParams;

pub const FORMAT: &str = "zsdet-heads";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload {
    format: String,
    version: u32,
    d: usize,
    p: usize,
    t: usize,
    background: BackgroundKind,
    w_cls: Vec<Vec<f64>>,
    w_reg: Vec<Vec<Vec<f64>>>,
    w_seg: Vec<Vec<f64>>,
    b: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    #[serde(flatten)]
    payload: Payload,
    checksum: String,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(v: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<Array2<f64>> {
    if v.len() != shape.0 || v.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Format {
            what: "checkpoint",
            msg: format!("{what} is not {}x{}", shape.0, shape.1),
        });
    }
    Array2::from_shape_vec(shape, v.concat()).map_err(|e| Error::Shape(e.to_string()))
}

fn digest(payload: &Payload) -> Result<String> {
    let bytes = serde_json::to_vec(payload).map_err(|e| Error::Format {
        what: "checkpoint",
        msg: e.to_string(),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn to_json(params: &HeadParams) -> Result<String> {
    params.validate()?;
    let (d, p, t) = params.dims();
    let payload = Payload {
        format: FORMAT.into(),
        version: VERSION,
        d,
        p,
        t,
        background: params.background.kind(),
        w_cls: rows(&params.w_cls),
        w_reg: params.w_reg.iter().map(rows).collect(),
        w_seg: rows(&params.w_seg),
        b: params.background.learned().map(|b| b.to_vec()),
    };
    let checksum = digest(&payload)?;
    serde_json::to_string(&CheckpointFile { payload, checksum }).map_err(|e| Error::Format {
        what: "checkpoint",
        msg: e.to_string(),
    })
}

pub fn from_json(text: &str) -> Result<HeadParams> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Format {
        what: "checkpoint",
        msg: e.to_string(),
    })?;
    let p = &file.payload;
    if p.format != FORMAT || p.version != VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            msg: format!("unsupported format {} v{}", p.format, p.version),
        });
    }
    let expected = digest(p)?;
    if expected != file.checksum {
        return Err(Error::Checksum(format!("stored {}, computed {expected}", file.checksum)));
    }
    if p.w_reg.len() != 4 {
        return Err(Error::dim(4, p.w_reg.len(), "w_reg matrices"));
    }
    let mut w_reg = Vec::with_capacity(4);
    for (r, w) in p.w_reg.iter().enumerate() {
        w_reg.push(matrix(w, (p.d, p.p), &format!("w_reg[{r}]"))?);
    }
    let background = match (p.background, &p.b) {
        (BackgroundKind::Fixed, None) => BackgroundMode::Fixed,
        (BackgroundKind::Mean, None) => BackgroundMode::Mean,
        (BackgroundKind::Learned, Some(b)) if b.len() == p.d => BackgroundMode::Learned(Array1::from(b.clone())),
        _ => {
            return Err(Error::Format {
                what: "checkpoint",
                msg: "background kind and `b` disagree".into(),
            })
        }
    };
    let params = HeadParams {
        w_cls: matrix(&p.w_cls, (p.d, p.p), "w_cls")?,
        w_reg: w_reg.try_into().expect("four matrices"),
        w_seg: matrix(&p.w_seg, (p.d, p.t), "w_seg")?,
        background,
    };
    params.validate()?;
    Ok(params)
}

pub fn save(params: &HeadParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<HeadParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(kind: BackgroundKind) -> HeadParams {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seen = Array2::from_elem((2, 3), 0.25);
        HeadParams::init(3, 5, 2, kind, &seen, &mut rng)
    }

    #[test]
    fn roundtrip_is_exact() {
        for kind in BackgroundKind::ALL {
            let p = params(kind);
            let json = to_json(&p).unwrap();
            assert_eq!(from_json(&json).unwrap(), p);
            assert_eq!(to_json(&from_json(&json).unwrap()).unwrap(), json);
        }
    }

    #[test]
    fn tampering_is_detected() {
        let json = to_json(&params(BackgroundKind::Learned)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let old = v["w_cls"][0][0].as_f64().unwrap();
        let tampered = json.replacen(&serde_json::to_string(&old).unwrap(), "0.5", 1);
        assert!(matches!(from_json(&tampered), Err(Error::Checksum(_))));
    }
}
