//! Guide (project onto) and ignore (project away from) transforms.
//!
//! Outputs are not re-normalized: cosine scoring is per-vector scale
//! invariant, and ignore can legitimately annihilate a row.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::subspace::ConceptSubspace;
use crate::tensor_io::{dot, EmbeddingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Guide,
    Ignore,
}

impl Mode {
    /// Default number of concept axes for the mode.
    pub fn default_d(self) -> usize {
        match self {
            Mode::Guide => crate::subspace::DEFAULT_GUIDE_D,
            Mode::Ignore => crate::subspace::DEFAULT_IGNORE_D,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Guide => "guide",
            Mode::Ignore => "ignore",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "guide" => Ok(Mode::Guide),
            "ignore" => Ok(Mode::Ignore),
            _ => Err(format!("unknown mode {s:?}, expected guide or ignore")),
        }
    }
}

/// Ordered list of projection steps sharing one ambient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    steps: Vec<(Mode, ConceptSubspace)>,
}

impl TransformSpec {
    pub fn new(steps: Vec<(Mode, ConceptSubspace)>) -> Result<Self> {
        let Some((_, first)) = steps.first() else {
            return Err(Error::EmptyTransform);
        };
        let dim = first.dim();
        if let Some((_, s)) = steps.iter().find(|(_, s)| s.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: s.dim(),
            });
        }
        Ok(TransformSpec { steps })
    }

    pub fn single(mode: Mode, subspace: ConceptSubspace) -> Self {
        TransformSpec {
            steps: vec![(mode, subspace)],
        }
    }

    pub fn steps(&self) -> &[(Mode, ConceptSubspace)] {
        &self.steps
    }

    pub fn dim(&self) -> usize {
        self.steps[0].1.dim()
    }

    /// `mode:digest` per step, joined with `|`.
    pub fn digest_chain(&self) -> String {
        self.steps
            .iter()
            .map(|(mode, s)| format!("{mode}:{}", s.digest()))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Component of `row` inside the subspace, accumulated in ascending axis order.
fn project_row(row: &[f64], s: &ConceptSubspace, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for axis in s.axes() {
        let coef = dot(row, axis) / dot(axis, axis);
        for (o, c) in out.iter_mut().zip(axis) {
            *o += coef * c;
        }
    }
}

fn check_dim(v: &EmbeddingMatrix, s: &ConceptSubspace) -> Result<()> {
    if v.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            found: v.dim(),
        });
    }
    Ok(())
}

/// Projects every row onto the span of `s`.
pub fn guide(v: &EmbeddingMatrix, s: &ConceptSubspace) -> Result<EmbeddingMatrix> {
    check_dim(v, s)?;
    let dim = v.dim();
    let mut data = vec![0.0; v.rows() * dim];
    for (row, out) in v.iter_rows().zip(data.chunks_exact_mut(dim)) {
        project_row(row, s, out);
    }
    EmbeddingMatrix::new(data, v.rows(), dim)
}

/// Removes the component of every row that lies in the span of `s`.
pub fn ignore(v: &EmbeddingMatrix, s: &ConceptSubspace) -> Result<EmbeddingMatrix> {
    check_dim(v, s)?;
    let dim = v.dim();
    let mut data = vec![0.0; v.rows() * dim];
    let mut projected = vec![0.0; dim];
    for (row, out) in v.iter_rows().zip(data.chunks_exact_mut(dim)) {
        project_row(row, s, &mut projected);
        for ((o, x), p) in out.iter_mut().zip(row).zip(&projected) {
            *o = x - p;
        }
    }
    EmbeddingMatrix::new(data, v.rows(), dim)
}

pub fn apply(v: &EmbeddingMatrix, mode: Mode, s: &ConceptSubspace) -> Result<EmbeddingMatrix> {
    match mode {
        Mode::Guide => guide(v, s),
        Mode::Ignore => ignore(v, s),
    }
}

/// Applies the steps left to right.
pub fn apply_transform(v: &EmbeddingMatrix, t: &TransformSpec) -> Result<EmbeddingMatrix> {
    let mut steps = t.steps.iter();
    let (mode, s) = steps.next().ok_or(Error::EmptyTransform)?;
    let mut out = apply(v, *mode, s)?;
    for (mode, s) in steps {
        out = apply(&out, *mode, s)?;
    }
    Ok(out)
}
