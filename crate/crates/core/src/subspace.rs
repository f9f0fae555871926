//! Concept subspaces: principal axes of the pairwise differences between
//! concept-prompt text features.
//!
//! Differencing cancels anything shared by two prompts (most notably an
//! offset contributed by a common template), and the leading right singular
//! vectors of the difference matrix span the directions along which the
//! concept values actually vary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Fnv1a, PromptSet};
use crate::tensor_io::{self, EmbeddingMatrix, NORM_TOLERANCE};

/// Default component count for guide projections.
pub const DEFAULT_GUIDE_D: usize = 16;
/// Default component count for ignore projections.
pub const DEFAULT_IGNORE_D: usize = 128;

/// All `v_i - v_j` for `i < j`, in lexicographic `(i, j)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSet {
    diffs: EmbeddingMatrix,
    source_rows: usize,
}

impl DifferenceSet {
    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.diffs
    }

    pub fn rows(&self) -> usize {
        self.diffs.rows()
    }

    pub fn dim(&self) -> usize {
        self.diffs.dim()
    }

    /// Number of feature rows the differences were taken over.
    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    /// Row index of the pair `(i, j)`, `i < j`.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.source_rows);
        let n = self.source_rows;
        i * (2 * n - i - 1) / 2 + (j - i - 1)
    }
}

pub fn pairwise_differences(features: &EmbeddingMatrix) -> Result<DifferenceSet> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::InvalidComponents(format!(
            "pairwise differences need at least 2 rows, got {n}"
        )));
    }
    let dim = features.dim();
    let mut data = Vec::with_capacity(n * (n - 1) / 2 * dim);
    for i in 0..n {
        let a = features.row(i);
        for j in i + 1..n {
            data.extend(a.iter().zip(features.row(j)).map(|(x, y)| x - y));
        }
    }
    Ok(DifferenceSet {
        diffs: EmbeddingMatrix::new(data, n * (n - 1) / 2, dim)?,
        source_rows: n,
    })
}

/// Averages each run of `templates` consecutive rows (one run per concept value).
pub fn average_templates(features: &EmbeddingMatrix, templates: usize) -> Result<EmbeddingMatrix> {
    if templates == 0 || !features.rows().is_multiple_of(templates) {
        return Err(Error::Prompt(format!(
            "{} feature rows do not split into groups of {templates} templates",
            features.rows()
        )));
    }
    let dim = features.dim();
    let groups = features.rows() / templates;
    let mut data = vec![0.0; groups * dim];
    for (g, out) in data.chunks_exact_mut(dim).enumerate() {
        for t in 0..templates {
            for (o, x) in out.iter_mut().zip(features.row(g * templates + t)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= templates as f64);
    }
    EmbeddingMatrix::new(data, groups, dim)
}

/// Orthonormal basis (`d x dim`, row-major) of a concept subspace plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSubspace {
    basis: Vec<f64>,
    d: usize,
    dim: usize,
    source_digest: String,
    centered: bool,
    singular_values: Vec<f64>,
}

impl ConceptSubspace {
    /// Validates shape, orthonormality (within 1e-6) and singular value ordering.
    pub fn from_parts(
        basis: Vec<f64>,
        d: usize,
        dim: usize,
        source_digest: String,
        centered: bool,
        singular_values: Vec<f64>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidComponents("d must be at least 1".into()));
        }
        if d > dim {
            return Err(Error::InvalidComponents(format!(
                "d exceeds dimension ({d} > {dim})"
            )));
        }
        if basis.len() != d * dim {
            return Err(Error::Shape(format!(
                "basis has {} values, expected {d}x{dim}",
                basis.len()
            )));
        }
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotOrthonormal(f64::INFINITY));
        }
        if singular_values.len() != d {
            return Err(Error::Metadata(format!(
                "{} singular values for d = {d}",
                singular_values.len()
            )));
        }
        if singular_values.iter().any(|s| s.is_nan() || *s < 0.0)
            || singular_values.windows(2).any(|w| w[0] < w[1])
        {
            return Err(Error::Metadata(
                "singular values must be non-negative and non-increasing".into(),
            ));
        }
        let s = ConceptSubspace {
            basis,
            d,
            dim,
            source_digest,
            centered,
            singular_values,
        };
        let deviation = s.orthonormality_error();
        if deviation > NORM_TOLERANCE {
            return Err(Error::NotOrthonormal(deviation));
        }
        Ok(s)
    }

    /// An arbitrary orthonormal basis with no provenance (singular values all 1).
    pub fn from_orthonormal_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = EmbeddingMatrix::from_rows(rows)?;
        let (d, dim) = (m.rows(), m.dim());
        Self::from_parts(m.into_vec(), d, dim, String::new(), false, vec![1.0; d])
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.basis[k * self.dim..(k + 1) * self.dim]
    }

    pub fn axes(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.basis.chunks_exact(self.dim)
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn with_source_digest(mut self, digest: impl Into<String>) -> Self {
        self.source_digest = digest.into();
        self
    }

    /// `max |<c_k, c_l> - delta_kl|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.d {
            for l in k..self.d {
                let target = if k == l { 1.0 } else { 0.0 };
                worst = worst.max((tensor_io::dot(self.axis(k), self.axis(l)) - target).abs());
            }
        }
        worst
    }

    /// Orthogonal projector `basis^T basis` as a row-major `dim x dim` matrix.
    pub fn projector(&self) -> Vec<f64> {
        let n = self.dim;
        let mut p = vec![0.0; n * n];
        for axis in self.axes() {
            for (i, &ai) in axis.iter().enumerate() {
                for (pij, &aj) in p[i * n..(i + 1) * n].iter_mut().zip(axis) {
                    *pij += ai * aj;
                }
            }
        }
        p
    }

    /// FNV-1a digest over the basis bytes and metadata.
    pub fn digest(&self) -> String {
        let mut h = Fnv1a::new();
        h.write(&(self.d as u64).to_le_bytes());
        h.write(&(self.dim as u64).to_le_bytes());
        h.write(&[self.centered as u8]);
        h.write(self.source_digest.as_bytes());
        for v in &self.basis {
            h.write(&v.to_le_bytes());
        }
        h.hex()
    }
}

/// Top-`d` right singular vectors of the (optionally column-centered) difference matrix.
///
/// Each axis is sign-normalized so its largest-magnitude coordinate is
/// positive (lowest index wins ties). `d` may not exceed the ambient
/// dimension, the number of differences, or the numerical rank.
pub fn extract_axes(diffs: &DifferenceSet, d: usize, centered: bool) -> Result<ConceptSubspace> {
    let (rows, dim) = (diffs.rows(), diffs.dim());
    if d == 0 {
        return Err(Error::InvalidComponents("d must be at least 1".into()));
    }
    if d > dim {
        return Err(Error::InvalidComponents(format!(
            "d exceeds dimension ({d} > {dim})"
        )));
    }
    if d > rows {
        return Err(Error::InvalidComponents(format!(
            "d exceeds number of difference vectors ({d} > {rows})"
        )));
    }
    if diffs.matrix().as_slice().iter().all(|&v| v == 0.0) {
        return Err(Error::IdenticalPrompts);
    }

    let data = diffs.matrix().as_slice();
    let mut m = Mat::<f64>::from_fn(rows, dim, |i, j| data[i * dim + j]);
    if centered {
        for j in 0..dim {
            let mean = (0..rows).map(|i| m[(i, j)]).sum::<f64>() / rows as f64;
            (0..rows).for_each(|i| m[(i, j)] -= mean);
        }
    }

    let svd = m
        .thin_svd()
        .map_err(|e| Error::Decomposition(format!("SVD did not converge ({e:?})")))?;
    let v = svd.V();
    let sigma: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    if sigma_max == 0.0 {
        return Err(Error::IdenticalPrompts);
    }
    let tolerance = rows.max(dim) as f64 * f64::EPSILON * sigma_max;
    let rank = sigma.iter().filter(|&&s| s > tolerance).count();
    if d > rank {
        return Err(Error::InvalidComponents(format!(
            "d exceeds numerical rank of the differences ({d} > {rank})"
        )));
    }

    let mut basis = Vec::with_capacity(d * dim);
    for k in 0..d {
        let mut axis: Vec<f64> = (0..dim).map(|j| v[(j, k)]).collect();
        let norm = tensor_io::l2_norm(&axis);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Decomposition(format!(
                "degenerate singular vector {k}"
            )));
        }
        axis.iter_mut().for_each(|v| *v /= norm);
        let pivot =
            axis.iter().enumerate().fold(
                0,
                |best, (i, v)| if v.abs() > axis[best].abs() { i } else { best },
            );
        if axis[pivot] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        basis.extend(axis);
    }
    let singular_values = sigma.iter().take(d).copied().collect();
    ConceptSubspace::from_parts(basis, d, dim, String::new(), centered, singular_values).map_err(
        |e| match e {
            Error::NotOrthonormal(dev) => {
                Error::Decomposition(format!("singular vectors not orthonormal ({dev:.3e})"))
            }
            other => other,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubspaceOptions {
    pub d: usize,
    pub centered: bool,
    /// Average the template embeddings of each value before differencing.
    pub average_templates: bool,
}

/// Differences + axis extraction for a prompt grid whose text features are
/// given in rendered (value-major) order; stamps the prompt digest.
pub fn build_subspace(
    prompts: &PromptSet,
    text_features: &EmbeddingMatrix,
    opts: SubspaceOptions,
) -> Result<ConceptSubspace> {
    if text_features.rows() != prompts.len() {
        return Err(Error::Prompt(format!(
            "{} text feature rows for {} rendered prompts",
            text_features.rows(),
            prompts.len()
        )));
    }
    let diffs = if opts.average_templates {
        pairwise_differences(&average_templates(
            text_features,
            prompts.templates().len(),
        )?)?
    } else {
        pairwise_differences(text_features)?
    };
    Ok(extract_axes(&diffs, opts.d, opts.centered)?.with_source_digest(prompts.digest()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    d: usize,
    centered: bool,
    source_digest: String,
    singular_values: Vec<f64>,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<prefix>.npy` (basis) and `<prefix>.json` (metadata).
pub fn save_subspace(s: &ConceptSubspace, path_prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = path_prefix.as_ref();
    let basis = EmbeddingMatrix::new(s.basis.clone(), s.d, s.dim)?;
    tensor_io::save_matrix(&basis, with_suffix(prefix, ".npy"))?;
    let sidecar = Sidecar {
        d: s.d,
        centered: s.centered,
        source_digest: s.source_digest.clone(),
        singular_values: s.singular_values.clone(),
    };
    let json_path = with_suffix(prefix, ".json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&json_path, e))?;
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn load_subspace(path_prefix: impl AsRef<Path>) -> Result<ConceptSubspace> {
    let prefix = path_prefix.as_ref();
    let json_path = with_suffix(prefix, ".json");
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    let basis = tensor_io::load_matrix(with_suffix(prefix, ".npy"), false)?;
    if basis.rows() != sidecar.d {
        return Err(Error::Metadata(format!(
            "sidecar d = {} but basis has {} rows",
            sidecar.d,
            basis.rows()
        )));
    }
    let (d, dim) = (basis.rows(), basis.dim());
    ConceptSubspace::from_parts(
        basis.into_vec(),
        d,
        dim,
        sidecar.source_digest,
        sidecar.centered,
        sidecar.singular_values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn diff_set(rows: &[Vec<f64>]) -> DifferenceSet {
        DifferenceSet {
            diffs: EmbeddingMatrix::from_rows(rows).unwrap(),
            source_rows: 0,
        }
    }

    #[test]
    fn axis_differences() {
        let m = EmbeddingMatrix::from_rows(&[unit(3, 0), unit(3, 1), unit(3, 2)]).unwrap();
        let d = pairwise_differences(&m).unwrap();
        assert_eq!(d.rows(), 3);
        assert_eq!(d.matrix().row(0), &[1.0, -1.0, 0.0]);
        assert_eq!(d.matrix().row(1), &[1.0, 0.0, -1.0]);
        assert_eq!(d.matrix().row(2), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn difference_counts_and_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random()).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let d = pairwise_differences(&m).unwrap();
        assert_eq!(d.rows(), 6);
        for i in 0..4 {
            for j in i + 1..4 {
                let expected: Vec<f64> = rows[i].iter().zip(&rows[j]).map(|(a, b)| a - b).collect();
                assert_eq!(d.matrix().row(d.pair_index(i, j)), &expected[..]);
            }
        }
        let single = EmbeddingMatrix::from_rows(&[unit(3, 0)]).unwrap();
        assert!(pairwise_differences(&single).is_err());
    }

    #[test]
    fn identical_rows_give_zero_difference() {
        let m = EmbeddingMatrix::from_rows(&[unit(3, 0), unit(3, 0), unit(3, 1)]).unwrap();
        let d = pairwise_differences(&m).unwrap();
        assert_eq!(d.matrix().row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_one_differences() {
        let e1 = unit(4, 0);
        let rows: Vec<Vec<f64>> = [2.0, -3.0, 0.5]
            .iter()
            .map(|a| e1.iter().map(|x| a * x).collect())
            .collect();
        let s = extract_axes(&diff_set(&rows), 1, false).unwrap();
        assert_eq!(s.d(), 1);
        for (got, want) in s.axis(0).iter().zip(&e1) {
            assert!((got - want).abs() < 1e-12);
        }
        let expected_sigma = (4.0f64 + 9.0 + 0.25).sqrt();
        assert!((s.singular_values()[0] - expected_sigma).abs() < 1e-12);
        let err = extract_axes(&diff_set(&rows), 2, false).unwrap_err();
        assert!(err.to_string().contains("rank"), "{err}");
    }

    #[test]
    fn planar_differences_match_gram_oracle() {
        // Rows a*e1 + b*e2 with |a| >> |b|; the right singular vectors are the
        // eigenvectors of the 2x2 Gram matrix [[Saa, Sab], [Sab, Sbb]].
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dim = 5;
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let a: f64 = rng.random_range(-10.0..10.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                let mut v = vec![0.0; dim];
                v[0] = a;
                v[1] = b;
                v
            })
            .collect();
        let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
        for r in &rows {
            saa += r[0] * r[0];
            sab += r[0] * r[1];
            sbb += r[1] * r[1];
        }
        // closed-form symmetric 2x2 eigen-decomposition
        let mean = (saa + sbb) / 2.0;
        let radius = (((saa - sbb) / 2.0).powi(2) + sab * sab).sqrt();
        let (l1, l2) = (mean + radius, mean - radius);
        let v1 = {
            let (x, y) = (sab, l1 - saa);
            let n = (x * x + y * y).sqrt();
            [x / n, y / n]
        };

        let s = extract_axes(&diff_set(&rows), 2, false).unwrap();
        assert!(s.orthonormality_error() < 1e-6);
        assert!((s.singular_values()[0] - l1.sqrt()).abs() < 1e-9);
        assert!((s.singular_values()[1] - l2.sqrt()).abs() < 1e-9);
        let c0 = s.axis(0);
        let align = (c0[0] * v1[0] + c0[1] * v1[1]).abs();
        assert!((align - 1.0).abs() < 1e-9);
        // dominant axis is e1-like with positive largest coordinate
        assert!(c0[0] > 0.0 && c0[0].abs() > c0[1].abs());
        for axis in s.axes() {
            assert!(axis[2..].iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn d_range_errors() {
        let rows = vec![unit(3, 0), unit(3, 1), unit(3, 2), vec![1.0, 1.0, 1.0]];
        let err = extract_axes(&diff_set(&rows), 4, false).unwrap_err();
        assert!(err.to_string().contains("d exceeds dimension"), "{err}");
        assert!(extract_axes(&diff_set(&rows), 0, false).is_err());
        let zeros = vec![vec![0.0; 3]; 3];
        assert!(matches!(
            extract_axes(&diff_set(&zeros), 1, false),
            Err(Error::IdenticalPrompts)
        ));
        let two = vec![unit(3, 0), unit(3, 1)];
        assert!(extract_axes(&diff_set(&two), 3, false).is_err());
    }

    #[test]
    fn sign_convention() {
        let rows = vec![vec![0.0, -3.0, 1.0], vec![0.0, 6.0, -2.0]];
        let s = extract_axes(&diff_set(&rows), 1, false).unwrap();
        assert!(s.axis(0)[1] > 0.0);
        assert!(s.axis(0)[2] < 0.0);
    }

    #[test]
    fn centering_changes_result() {
        // all differences share a common offset along e1, varying along e2
        let rows = vec![
            vec![1.0, 0.5, 0.0],
            vec![1.0, -0.5, 0.0],
            vec![1.0, 0.2, 0.0],
        ];
        let plain = extract_axes(&diff_set(&rows), 1, false).unwrap();
        let centered = extract_axes(&diff_set(&rows), 1, true).unwrap();
        assert!(plain.axis(0)[0] > 0.9);
        assert!((centered.axis(0)[1] - 1.0).abs() < 1e-12);
        assert!(centered.centered());
    }

    #[test]
    fn template_averaging() {
        let m =
            EmbeddingMatrix::from_rows(&[[1.0, 0.0], [3.0, 2.0], [0.0, 4.0], [2.0, 0.0]]).unwrap();
        let avg = average_templates(&m, 2).unwrap();
        assert_eq!(avg.as_slice(), &[2.0, 1.0, 1.0, 2.0]);
        assert!(average_templates(&m, 3).is_err());
    }

    fn random_subspace(seed: u64, d: usize, dim: usize) -> ConceptSubspace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..d * 3)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        extract_axes(&diff_set(&rows), d, false)
            .unwrap()
            .with_source_digest("00ff00ff00ff00ff")
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("concept.v1");
        let s = random_subspace(4, 8, 512);
        save_subspace(&s, &prefix).unwrap();
        assert!(dir.path().join("concept.v1.npy").exists());
        let back = load_subspace(&prefix).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
    }

    #[test]
    fn load_rejects_bad_sidecar_and_basis() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("s");
        let s = random_subspace(5, 3, 16);
        save_subspace(&s, &prefix).unwrap();

        let sidecar = dir.path().join("s.json");
        let text = std::fs::read_to_string(&sidecar).unwrap();
        std::fs::write(&sidecar, text.replace("\"d\": 3", "\"d\": 4")).unwrap();
        assert!(matches!(load_subspace(&prefix), Err(Error::Metadata(_))));
        std::fs::write(&sidecar, text).unwrap();

        let mut data = s.basis().to_vec();
        data[..16].iter_mut().for_each(|v| *v *= 2.0);
        let tampered = EmbeddingMatrix::new(data, 3, 16).unwrap();
        tensor_io::save_matrix(&tampered, dir.path().join("s.npy")).unwrap();
        let err = load_subspace(&prefix).unwrap_err();
        assert!(err.to_string().contains("basis not orthonormal"), "{err}");

        std::fs::remove_file(&sidecar).unwrap();
        assert!(matches!(load_subspace(&prefix), Err(Error::Io { .. })));
    }

    #[test]
    fn build_checks_row_count_and_stamps_digest() {
        let prompts = crate::prompt::render_prompts(&["a {}", "the {}"], &["x", "y"]).unwrap();
        let text = EmbeddingMatrix::from_rows(&[
            [1.0, 0.1, 0.0],
            [1.0, 0.0, 0.1],
            [0.0, 1.1, 0.0],
            [0.0, 1.0, 0.1],
        ])
        .unwrap();
        let opts = SubspaceOptions {
            d: 1,
            centered: false,
            average_templates: false,
        };
        let s = build_subspace(&prompts, &text, opts).unwrap();
        assert_eq!(s.source_digest(), prompts.digest());
        let avg = build_subspace(
            &prompts,
            &text,
            SubspaceOptions {
                average_templates: true,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(avg.d(), 1);
        let short = text.select_rows(&[0, 1, 2]).unwrap();
        assert!(build_subspace(&prompts, &short, opts).is_err());
    }
}
