//! Labeled embedding matrices on the unit sphere and the spectral summary
//! metrics computed from them.
//!
//! Conventions used throughout the crate:
//! - rows are vectors, the row label is the class id;
//! - cosine similarities are clamped to `[-1, 1]` before any downstream use
//!   (rounding can push dot products marginally out of range, which breaks
//!   acos-based metrics);
//! - a row counts as zero-norm when its L2 norm is `<= 1e-12`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, symmetric_eigenvalues, Matrix};

pub type ClassId = u32;

/// Per-class feature bundles, keyed by class id. BTreeMap keeps every
/// iteration order deterministic.
pub type FeaturesByClass = BTreeMap<ClassId, Matrix>;

pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Row-stacked d-dimensional vectors with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    labels: Vec<ClassId>,
    matrix: Matrix,
}

impl EmbeddingMatrix {
    /// All rows must be finite and the label count must match the row count.
    pub fn new(labels: Vec<ClassId>, matrix: Matrix) -> Result<Self> {
        if matrix.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if labels.len() != matrix.rows() {
            return Err(Error::DimensionMismatch {
                expected: matrix.rows(),
                got: labels.len(),
            });
        }
        if !matrix.is_finite() {
            return Err(Error::MalformedFile("non-finite entry".into()));
        }
        Ok(EmbeddingMatrix { labels, matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    /// Row index of a class, scanning in order (first match wins).
    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.labels.iter().position(|&l| l == class)
    }

    /// Label → row index map; errors if a label repeats, which is the
    /// contract when the matrix holds per-class prototypes.
    pub fn label_index(&self) -> Result<BTreeMap<ClassId, usize>> {
        let mut map = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if map.insert(l, i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate prototype label {l}"
                )));
            }
        }
        Ok(map)
    }

    /// Writes `label,x0,...,x{d-1}` rows. Floats are printed with 17
    /// significant digits so the file round-trips bit-stable.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("label");
        for j in 0..self.dim() {
            out.push_str(&format!(",x{j}"));
        }
        out.push('\n');
        for (i, row) in self.matrix.iter_rows().enumerate() {
            out.push_str(&self.labels[i].to_string());
            for v in row {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedFile(format!("{}: empty file", path.display())))?;
        let dim = header.split(',').count().saturating_sub(1);
        if dim == 0 || !header.starts_with("label") {
            return Err(Error::MalformedFile(format!(
                "{}: bad header {header:?}",
                path.display()
            )));
        }
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let label: ClassId = parts
                .next()
                .unwrap()
                .parse()
                .map_err(|_| Error::MalformedFile(format!("line {}: bad label", n + 2)))?;
            let row: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::MalformedFile(format!("line {}: bad float", n + 2)))
                })
                .collect::<Result<_>>()?;
            if row.len() != dim {
                return Err(Error::MalformedFile(format!(
                    "line {}: expected {dim} values, got {}",
                    n + 2,
                    row.len()
                )));
            }
            labels.push(label);
            rows.push(row);
        }
        EmbeddingMatrix::new(labels, Matrix::from_rows(&rows)?)
    }
}

/// Symmetric k×k matrix of cosine similarities in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    /// Validates squareness and symmetry (within 1e-9); entries are clamped
    /// to `[-1, 1]`.
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::DimensionMismatch {
                expected: values.rows(),
                got: values.cols(),
            });
        }
        if !values.is_finite() {
            return Err(Error::MalformedFile("non-finite similarity".into()));
        }
        let n = values.rows();
        let mut m = values;
        for i in 0..n {
            for j in (i + 1)..n {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-9 {
                    return Err(Error::MalformedFile(format!(
                        "similarity matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, m.get(i, j).clamp(-1.0, 1.0));
            }
        }
        Ok(SimilarityMatrix { values: m })
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Rescales every row to unit L2 norm. Direction is preserved; rows with
/// norm `<= 1e-12` are rejected.
pub fn normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let normalized = normalize_matrix(m.matrix())?;
    EmbeddingMatrix::new(m.labels().to_vec(), normalized)
}

pub(crate) fn normalize_matrix(m: &Matrix) -> Result<Matrix> {
    let (unit, _) = normalize_matrix_with_norms(m)?;
    Ok(unit)
}

pub(crate) fn normalize_matrix_with_norms(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n <= ZERO_NORM_EPS {
            return Err(Error::ZeroNormRow(i));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na <= ZERO_NORM_EPS {
        return Err(Error::ZeroNormRow(0));
    }
    if nb <= ZERO_NORM_EPS {
        return Err(Error::ZeroNormRow(1));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine Gram matrix of the rows. Rows are normalized internally, so the
/// result has unit diagonal and is exactly symmetric.
pub fn gram_matrix(m: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    gram_of_matrix(m.matrix())
}

pub(crate) fn gram_of_matrix(m: &Matrix) -> Result<SimilarityMatrix> {
    let unit = normalize_matrix(m)?;
    let k = unit.rows();
    let mut g = Matrix::zeros(k, k);
    for i in 0..k {
        g.set(i, i, 1.0);
        for j in (i + 1)..k {
            let v = dot(unit.row(i), unit.row(j)).clamp(-1.0, 1.0);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    SimilarityMatrix::new(g)
}

/// Exponential of the Shannon entropy of the normalized singular-value
/// distribution. Ranges over `[1, k]`; equals `k` iff the spectrum is
/// uniform. A zero matrix returns 1 by convention. Singular values below
/// `1e-12` times the largest are treated as zero.
pub fn effective_rank(s: &SimilarityMatrix) -> Result<f64> {
    let eig = symmetric_eigenvalues(s.values())?;
    let sigma: Vec<f64> = eig.iter().map(|e| e.abs()).collect();
    let max = sigma.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Ok(1.0);
    }
    let kept: Vec<f64> = sigma.into_iter().filter(|&v| v > 1e-12 * max).collect();
    let total: f64 = kept.iter().sum();
    let mut entropy = 0.0;
    for v in &kept {
        let p = v / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp().clamp(1.0, s.size() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn em(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        let labels: Vec<ClassId> = (0..rows.len() as u32).collect();
        EmbeddingMatrix::new(labels, Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn normalize_scales_to_unit_direction() {
        let m = em(&[vec![3.0, 4.0]]);
        let n = normalize_rows(&m).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_axis_vectors() {
        let m = em(&[vec![1.0, 0.0], vec![0.0, -2.0]]);
        let n = normalize_rows(&m).unwrap();
        assert_eq!(n.row(0), &[1.0, 0.0]);
        assert_eq!(n.row(1), &[0.0, -1.0]);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = em(&[vec![0.0, 0.0]]);
        assert!(matches!(normalize_rows(&m), Err(Error::ZeroNormRow(0))));
    }

    #[test]
    fn cosine_orthogonal_and_antipodal() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
    }

    #[test]
    fn cosine_45_degrees() {
        // oracle: (1*1 + 1*0) / (sqrt(2) * 1) = 1/sqrt(2)
        let v = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 0.7071067811865475).abs() < 1e-6);
    }

    #[test]
    fn gram_of_axes_and_antipodal() {
        let g = gram_matrix(&em(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(g.get(0, 0), 1.0);
        assert_eq!(g.get(0, 1), 0.0);
        let g = gram_matrix(&em(&[vec![1.0, 0.0], vec![-1.0, 0.0]])).unwrap();
        assert_eq!(g.get(0, 1), -1.0);
        assert_eq!(g.get(1, 0), -1.0);
    }

    #[test]
    fn gram_of_planar_simplex() {
        // explicit 120-degree coordinates
        let s3 = 3.0f64.sqrt() / 2.0;
        let g = gram_matrix(&em(&[vec![1.0, 0.0], vec![-0.5, s3], vec![-0.5, -s3]])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(
                        (g.get(i, j) + 0.5).abs() < 1e-6,
                        "({i},{j}) = {}",
                        g.get(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn effective_rank_identity_and_rank_one() {
        let id = SimilarityMatrix::new(
            Matrix::from_rows(&[
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ])
            .unwrap(),
        )
        .unwrap();
        assert!((effective_rank(&id).unwrap() - 4.0).abs() < 1e-9);

        let ones = SimilarityMatrix::new(Matrix::from_flat(4, 4, vec![1.0; 16]).unwrap()).unwrap();
        assert!((effective_rank(&ones).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn effective_rank_of_block_diagonal() {
        // two 2x2 all-ones blocks: spectrum {2, 2, 0, 0} -> rank 2
        let m = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ])
        .unwrap();
        let s = SimilarityMatrix::new(m).unwrap();
        assert!((effective_rank(&s).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip_is_bit_stable() {
        let dir = std::env::temp_dir().join("cpt_embed_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let m = em(&[
            vec![0.123_456_789_123_456_78, -1.5e-7],
            vec![std::f64::consts::PI, 2.0 / 3.0],
        ]);
        m.write_csv(&path).unwrap();
        let back = EmbeddingMatrix::read_csv(&path).unwrap();
        assert_eq!(m, back);
        // write again: identical bytes
        let first = std::fs::read(&path).unwrap();
        back.write_csv(&path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn finite_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-10.0f64..10.0, d).prop_filter("nonzero", |v| norm(v) > 1e-6)
        }

        proptest! {
            #[test]
            fn normalize_is_idempotent(rows in proptest::collection::vec(finite_vec(4), 1..6)) {
                let m = em(&rows);
                let once = normalize_rows(&m).unwrap();
                let twice = normalize_rows(&once).unwrap();
                for i in 0..once.len() {
                    for (a, b) in once.row(i).iter().zip(twice.row(i)) {
                        prop_assert!((a - b).abs() <= 1e-12);
                    }
                }
            }

            #[test]
            fn cosine_symmetric_and_scale_invariant(
                a in finite_vec(5),
                b in finite_vec(5),
                s in 0.01f64..100.0,
            ) {
                let ab = cosine_sim(&a, &b).unwrap();
                let ba = cosine_sim(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12);
                let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
                let s_ab = cosine_sim(&scaled, &b).unwrap();
                prop_assert!((ab - s_ab).abs() <= 1e-9);
            }

            #[test]
            fn gram_is_positive_semidefinite(rows in proptest::collection::vec(finite_vec(3), 2..7)) {
                let g = gram_matrix(&em(&rows)).unwrap();
                let eig = symmetric_eigenvalues(g.values()).unwrap();
                prop_assert!(*eig.last().unwrap() >= -1e-8);
            }

            #[test]
            fn effective_rank_permutation_invariant(rows in proptest::collection::vec(finite_vec(4), 2..7)) {
                let m = em(&rows);
                let g = gram_matrix(&m).unwrap();
                let r0 = effective_rank(&g).unwrap();
                // conjugate by the reversal permutation
                let k = g.size();
                let mut p = Matrix::zeros(k, k);
                for i in 0..k {
                    for j in 0..k {
                        p.set(i, j, g.get(k - 1 - i, k - 1 - j));
                    }
                }
                let gp = SimilarityMatrix::new(p).unwrap();
                let r1 = effective_rank(&gp).unwrap();
                prop_assert!((r0 - r1).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn similarity_matrix_rejects_asymmetry() {
        let m = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.2, 1.0]]).unwrap();
        assert!(SimilarityMatrix::new(m).is_err());
    }
}
