//! Dense linear-algebra helpers shared by the fitting and metric code.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. Rank decisions use a
//! relative cutoff against the largest singular value.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Default relative cutoff for pseudo-inverses.
pub const DEFAULT_PINV_RCOND: f64 = 1e-10;

/// Default relative tolerance for rank decisions on function evaluations.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Thin SVD split into the parts retained under a relative cutoff.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Left singular vectors, `rows x rank`.
    pub u: DMatrix<f64>,
    /// Retained singular values, descending.
    pub sigma: DVector<f64>,
    /// Right singular vectors, `cols x rank`.
    pub v: DMatrix<f64>,
    /// All singular values, descending.
    pub all_sigma: Vec<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

/// Singular value decomposition keeping singular values above `rcond * sigma_max`.
pub fn truncated_svd(a: &DMatrix<f64>, rcond: f64) -> TruncatedSvd {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return TruncatedSvd {
            u: DMatrix::zeros(rows, 0),
            sigma: DVector::zeros(0),
            v: DMatrix::zeros(cols, 0),
            all_sigma: vec![],
        };
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let all_sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = all_sigma.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > rcond * smax)
        .collect();
    let r = keep.len();
    let mut uk = DMatrix::zeros(rows, r);
    let mut vk = DMatrix::zeros(cols, r);
    let mut sk = DVector::zeros(r);
    for (c, &i) in keep.iter().enumerate() {
        uk.set_column(c, &u.column(i));
        vk.set_column(c, &v_t.row(i).transpose());
        sk[c] = svd.singular_values[i];
    }
    TruncatedSvd {
        u: uk,
        sigma: sk,
        v: vk,
        all_sigma,
    }
}

/// Moore-Penrose pseudo-inverse with relative singular-value cutoff.
pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let svd = truncated_svd(a, rcond);
    let mut vs = svd.v.clone();
    for (c, s) in svd.sigma.iter().enumerate() {
        vs.column_mut(c).scale_mut(1.0 / s);
    }
    vs * svd.u.transpose()
}

/// Numerical rank under a relative tolerance.
pub fn rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    truncated_svd(a, rtol).rank()
}

/// Orthonormal basis (as columns) of the row space of `a`.
pub fn row_space_basis(a: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    truncated_svd(a, rcond).v
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (vec![], DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Largest absolute entry of `a - a^T` relative to the largest entry of `a`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    (a - a.transpose()).amax() / scale
}

/// Solves the symmetric positive definite system `c x = b`, falling back to
/// the pseudo-inverse when Cholesky fails.
pub fn spd_solve(c: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match c.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => pinv(c, DEFAULT_PINV_RCOND) * b,
    }
}

/// Inverse of a symmetric positive definite matrix (pseudo-inverse fallback).
pub fn spd_inverse(c: &DMatrix<f64>) -> DMatrix<f64> {
    match c.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => pinv(c, DEFAULT_PINV_RCOND),
    }
}

/// Stacks matrices with equal column counts on top of each other.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r0, 0), (b.nrows(), cols)).copy_from(b);
        r0 += b.nrows();
    }
    out
}

/// Places matrices with equal row counts side by side.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c0), (rows, b.ncols())).copy_from(b);
        c0 += b.ncols();
    }
    out
}

/// Frobenius norm.
pub fn fro(a: &DMatrix<f64>) -> f64 {
    a.norm()
}

/// Serde adapter writing a matrix as a list of rows.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err("matrix rows have unequal lengths".into());
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }
}

/// [`matrix_rows`] for a list of matrices.
pub mod matrix_rows_vec {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    use super::matrix_rows::{from_rows, to_rows};

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        all.iter()
            .map(|r| from_rows(r).map_err(D::Error::custom))
            .collect()
    }
}

/// [`matrix_rows`] for an optional matrix.
pub mod opt_matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    use super::matrix_rows::{from_rows, to_rows};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        let rows = Option::<Vec<Vec<f64>>>::deserialize(d)?;
        rows.map(|r| from_rows(&r).map_err(D::Error::custom))
            .transpose()
    }
}
