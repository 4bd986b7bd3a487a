//! Category embedding tables, seen/unseen splits and background embeddings.
//!
//! Embedding file layout (UTF-8 text):
//!
//! ```text
//! <count> <dim>
//! <name> <v1> ... <vdim>
//! ...
//! ```
//!
//! Split file layout:
//!
//! ```text
//! seen: a,b,c
//! unseen: x,y
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named `d`-dimensional category vectors, one row per category.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    names: Vec<String>,
    vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if names.len() != vectors.nrows() {
            return Err(Error::dim(names.len(), vectors.nrows(), "embedding rows"));
        }
        if vectors.ncols() == 0 {
            return Err(Error::dim(1, 0, "embedding dimension"));
        }
        let mut seen = HashSet::new();
        for (name, row) in names.iter().zip(vectors.rows()) {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Format {
                    what: "embedding table",
                    msg: format!("invalid category name {name:?}"),
                });
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of `{name}`")));
            }
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::ZeroRow(name.clone()));
            }
        }
        Ok(EmbeddingTable { names, vectors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn row(&self, name: &str) -> Option<ArrayView1<'_, f64>> {
        self.index_of(name).map(|i| self.vectors.row(i))
    }

    /// Table restricted to `names`, in the order given.
    pub fn subset(&self, names: &[String]) -> Result<EmbeddingTable> {
        let d = self.dim();
        let mut out = Array2::zeros((names.len(), d));
        for (i, name) in names.iter().enumerate() {
            let row = self
                .row(name)
                .ok_or_else(|| Error::UnknownCategory(name.clone()))?;
            out.row_mut(i).assign(&row);
        }
        EmbeddingTable::new(names.to_vec(), out)
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&self) -> Result<EmbeddingTable> {
        let vectors = unit_rows(&self.vectors).map_err(|i| Error::ZeroRow(self.names[i].clone()))?;
        Ok(EmbeddingTable {
            names: self.names.clone(),
            vectors,
        })
    }

    pub fn parse(text: &str) -> Result<EmbeddingTable> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let header: Vec<&str> = header.split_whitespace().collect();
        if header.len() != 2 {
            return Err(Error::Parse {
                line: hline + 1,
                msg: "header must be `<count> <dim>`".into(),
            });
        }
        let parse_usize = |tok: &str| {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                line: hline + 1,
                msg: format!("expected an integer, got {tok:?}"),
            })
        };
        let count = parse_usize(header[0])?;
        let dim = parse_usize(header[1])?;
        if dim == 0 {
            return Err(Error::Parse {
                line: hline + 1,
                msg: "dimension must be positive".into(),
            });
        }

        let mut names = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * dim);
        let mut seen = HashSet::new();
        for (lineno, line) in lines {
            let mut toks = line.split_whitespace();
            let name = toks.next().unwrap_or_default().to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let mut n = 0;
            for tok in toks {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("non-numeric token {tok:?}"),
                })?;
                values.push(v);
                n += 1;
            }
            if n != dim {
                return Err(Error::dim(dim, n, format!("line {} (`{name}`)", lineno + 1)));
            }
            names.push(name);
        }
        if names.len() != count {
            return Err(Error::dim(count, names.len(), "embedding row count"));
        }
        let vectors = Array2::from_shape_vec((count, dim), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        EmbeddingTable::new(names, vectors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmbeddingTable::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim());
        for (name, row) in self.names.iter().zip(self.vectors.rows()) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Reads an embedding file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path)
}

/// Per-row L2 normalization of a bare matrix.
pub fn normalize_rows(m: &Array2<f64>) -> Result<Array2<f64>> {
    unit_rows(m).map_err(|i| Error::ZeroRow(format!("row {i}")))
}

fn unit_rows(m: &Array2<f64>) -> std::result::Result<Array2<f64>, usize> {
    let mut out = m.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(i);
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl CategorySplit {
    pub fn new(seen: Vec<String>, unseen: Vec<String>) -> Result<Self> {
        let split = CategorySplit { seen, unseen };
        split.check_disjoint()?;
        Ok(split)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut all = HashSet::new();
        for name in self.seen.iter().chain(&self.unseen) {
            if !all.insert(name) {
                return Err(Error::Split(format!(
                    "`{name}` listed twice or in both partitions"
                )));
            }
        }
        if self.seen.is_empty() {
            return Err(Error::Split("no seen categories".into()));
        }
        Ok(())
    }

    /// Checks disjointness and that every name exists in `table`.
    pub fn validate(&self, table: &EmbeddingTable) -> Result<()> {
        self.check_disjoint()?;
        for name in self.seen.iter().chain(&self.unseen) {
            if table.index_of(name).is_none() {
                return Err(Error::UnknownCategory(name.clone()));
            }
        }
        Ok(())
    }

    pub fn is_seen(&self, name: &str) -> bool {
        self.seen.iter().any(|n| n == name)
    }

    pub fn is_unseen(&self, name: &str) -> bool {
        self.unseen.iter().any(|n| n == name)
    }

    pub fn parse(text: &str) -> Result<CategorySplit> {
        let mut seen = None;
        let mut unseen = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(':').ok_or(Error::Parse {
                line: i + 1,
                msg: "expected `seen:` or `unseen:`".into(),
            })?;
            let names: Vec<String> = rest
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            let slot = match key.trim() {
                "seen" => &mut seen,
                "unseen" => &mut unseen,
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            };
            if slot.replace(names).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate `{}` line", key.trim()),
                });
            }
        }
        let seen = seen.ok_or(Error::Parse {
            line: 0,
            msg: "missing `seen:` line".into(),
        })?;
        CategorySplit::new(seen, unseen.unwrap_or_default())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CategorySplit> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CategorySplit::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "seen: {}\nunseen: {}\n",
            self.seen.join(","),
            self.unseen.join(",")
        )
    }
}

/// Which background embedding to use, without carrying state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    Fixed,
    Mean,
    #[default]
    Learned,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [
        BackgroundKind::Fixed,
        BackgroundKind::Mean,
        BackgroundKind::Learned,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BackgroundKind::Fixed => "fixed",
            BackgroundKind::Mean => "mean",
            BackgroundKind::Learned => "learned",
        }
    }
}

/// Background embedding in use by a set of heads. `Learned` carries the trainable vector.
#[derive(Debug, Clone, PartialEq)]
pub enum BackgroundMode {
    /// `(1, 0, ..., 0)`.
    Fixed,
    /// Mean of the unnormalized seen embeddings.
    Mean,
    Learned(Array1<f64>),
}

impl BackgroundMode {
    pub fn kind(&self) -> BackgroundKind {
        match self {
            BackgroundMode::Fixed => BackgroundKind::Fixed,
            BackgroundMode::Mean => BackgroundKind::Mean,
            BackgroundMode::Learned(_) => BackgroundKind::Learned,
        }
    }

    pub fn learned(&self) -> Option<&Array1<f64>> {
        match self {
            BackgroundMode::Learned(b) => Some(b),
            _ => None,
        }
    }
}

pub fn background_vector(mode: &BackgroundMode, seen_table: &EmbeddingTable) -> Array1<f64> {
    background_from_rows(mode, seen_table.vectors())
}

pub(crate) fn background_from_rows(mode: &BackgroundMode, seen_rows: &Array2<f64>) -> Array1<f64> {
    let d = seen_rows.ncols();
    match mode {
        BackgroundMode::Fixed => {
            let mut v = Array1::zeros(d);
            v[0] = 1.0;
            v
        }
        BackgroundMode::Mean => seen_rows
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(d)),
        BackgroundMode::Learned(b) => b.clone(),
    }
}

/// `[E^s ; background]` with the background appended as the last row. Not normalized.
pub fn augmented_seen_matrix(seen_table: &EmbeddingTable, mode: &BackgroundMode) -> Array2<f64> {
    augment_rows(seen_table.vectors(), mode)
}

pub(crate) fn augment_rows(seen_rows: &Array2<f64>, mode: &BackgroundMode) -> Array2<f64> {
    let bg = background_from_rows(mode, seen_rows);
    let mut out = Array2::zeros((seen_rows.nrows() + 1, seen_rows.ncols()));
    out.slice_mut(ndarray::s![..seen_rows.nrows(), ..])
        .assign(seen_rows);
    out.row_mut(seen_rows.nrows()).assign(&bg);
    out
}

/// Seen and unseen embeddings of one split, resolved and unit-normalized once.
#[derive(Debug, Clone)]
pub struct CategorySpace {
    pub seen_names: Vec<String>,
    pub unseen_names: Vec<String>,
    /// Raw seen rows; the `Mean` background averages these.
    pub seen_raw: Array2<f64>,
    pub seen_norm: Array2<f64>,
    pub unseen_norm: Array2<f64>,
}

impl CategorySpace {
    pub fn new(table: &EmbeddingTable, split: &CategorySplit) -> Result<Self> {
        split.validate(table)?;
        let seen = table.subset(&split.seen)?;
        let unseen_norm = if split.unseen.is_empty() {
            Array2::zeros((0, table.dim()))
        } else {
            table.subset(&split.unseen)?.row_normalize()?.vectors
        };
        Ok(CategorySpace {
            seen_names: split.seen.clone(),
            unseen_names: split.unseen.clone(),
            seen_norm: seen.row_normalize()?.vectors,
            seen_raw: seen.vectors,
            unseen_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.seen_raw.ncols()
    }

    pub fn num_seen(&self) -> usize {
        self.seen_names.len()
    }

    pub fn num_unseen(&self) -> usize {
        self.unseen_names.len()
    }

    /// Normalized `[E^s ; b]`, shape `(|C^s| + 1) x d`.
    pub fn seen_with_background(&self, mode: &BackgroundMode) -> Result<Array2<f64>> {
        let n = self.num_seen();
        unit_rows(&augment_rows(&self.seen_raw, mode)).map_err(|i| {
            Error::ZeroRow(if i == n {
                "background".into()
            } else {
                self.seen_names[i].clone()
            })
        })
    }
}
