//! Differentiable surrogates of the consistency index and of the baseline
//! regression residual.
//!
//! With `A = Phi(Z)`, `B = Phi(Z+)` (`s x N`), `C_A = A A^T + eps_A I`,
//! `C_B = B B^T + eps_B I` and `S = A B^T`:
//!
//! ```text
//! trace   = s - Tr(S^T C_A^-1 S C_B^-1)
//! max_eig = lambda_max(I - L^-1 (B A^T C_A^-1 A B^T) L^-T),  C_B = L L^T
//! ```
//!
//! `eps = ridge * Tr(Phi Phi^T) / s`, so `ridge = 0` gives the plain index.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KcfError, Result};
use crate::linalg::{spd_inverse, sym_eigen_desc};

/// Default relative ridge inside the training loss.
pub const DEFAULT_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Trace,
    MaxEig,
}

fn gram(a: &DMatrix<f64>, ridge: f64) -> (DMatrix<f64>, f64) {
    let s = a.nrows() as f64;
    let mut c = a * a.transpose();
    let eps = ridge * c.trace() / s;
    for i in 0..a.nrows() {
        c[(i, i)] += eps;
    }
    (c, eps)
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() || a.nrows() == 0 || a.ncols() == 0 {
        return Err(KcfError::DimensionMismatch(format!(
            "Phi(Z) is {:?} and Phi(Z+) is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(non_finite_loss(f64::NAN, a, b));
    }
    Ok(())
}

fn non_finite_loss(loss: f64, a: &DMatrix<f64>, b: &DMatrix<f64>) -> KcfError {
    KcfError::NonFiniteLoss {
        loss,
        param_norm: (a.norm_squared() + b.norm_squared()).sqrt(),
    }
}

/// Ridge-regularized consistency loss of the pair `(Phi(Z), Phi(Z+))`.
pub fn consistency_loss(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mode: LossMode,
    ridge: f64,
) -> Result<f64> {
    check_shapes(a, b)?;
    let s = a.nrows();
    let (ca, _) = gram(a, ridge);
    let (cb, _) = gram(b, ridge);
    let p = spd_inverse(&ca);
    let loss = match mode {
        LossMode::Trace => {
            let sm = a * b.transpose();
            let q = spd_inverse(&cb);
            s as f64 - (sm.transpose() * &p * &sm * q).trace()
        }
        LossMode::MaxEig => {
            let n = b * a.transpose() * &p * a * b.transpose();
            let l = match cb.clone().cholesky() {
                Some(ch) => ch.l(),
                None => return Err(non_finite_loss(f64::NAN, a, b)),
            };
            let li = l
                .try_inverse()
                .ok_or_else(|| non_finite_loss(f64::NAN, a, b))?;
            let mut m = -(&li * n * li.transpose());
            for i in 0..s {
                m[(i, i)] += 1.0;
            }
            let m = (&m + m.transpose()) * 0.5;
            sym_eigen_desc(&m).0[0]
        }
    };
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(non_finite_loss(loss, a, b))
    }
}

/// Trace loss and its gradients with respect to `Phi(Z)` and `Phi(Z+)`.
pub fn trace_loss_grad(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ridge: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    check_shapes(a, b)?;
    let s = a.nrows() as f64;
    let (ca, _) = gram(a, ridge);
    let (cb, _) = gram(b, ridge);
    let p = spd_inverse(&ca);
    let q = spd_inverse(&cb);
    let sm = a * b.transpose();
    let psq = &p * &sm * &q;
    let f = (sm.transpose() * &psq).trace();
    let loss = s - f;
    if !loss.is_finite() {
        return Err(non_finite_loss(loss, a, b));
    }
    // f = Tr(S^T P S Q); the loss gradient is -df.
    let wa = &psq * sm.transpose() * &p;
    let qsp = psq.transpose();
    let wb = &qsp * &sm * &q;
    let mut ga = (&wa * a - &psq * b) * 2.0;
    let mut gb = (&wb * b - &qsp * a) * 2.0;
    if ridge != 0.0 {
        ga += a * (2.0 * ridge / s * wa.trace());
        gb += b * (2.0 * ridge / s * wb.trace());
    }
    if ga.iter().chain(gb.iter()).any(|v| !v.is_finite()) {
        return Err(KcfError::NonFiniteGradient {
            param_norm: (a.norm_squared() + b.norm_squared()).sqrt(),
        });
    }
    Ok((loss, ga, gb))
}

/// Regression design for the baselines: `[Psi; U]` (linear) or
/// `[Psi; Psi .* u_1; ...]` (bilinear).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Linear,
    Bilinear,
}

fn regressor(kind: BaselineKind, psi: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    match kind {
        BaselineKind::Linear => crate::linalg::vstack(&[psi, u]),
        BaselineKind::Bilinear => crate::model::bilinear_regressor(psi, u, false),
    }
}

/// Folds a regressor gradient back onto `Psi`.
fn regressor_grad(
    kind: BaselineKind,
    g: &DMatrix<f64>,
    u: &DMatrix<f64>,
    p: usize,
) -> DMatrix<f64> {
    let mut out = g.rows(0, p).into_owned();
    if kind == BaselineKind::Bilinear {
        for i in 0..u.nrows() {
            let block = g.rows(p * (1 + i), p);
            for j in 0..out.ncols() {
                let ui = u[(i, j)];
                for r in 0..p {
                    out[(r, j)] += block[(r, j)] * ui;
                }
            }
        }
    }
    out
}

/// `min_K ||Psi(X+) - K R||_F^2 / N` with `R` the baseline regressor built
/// from `Psi(X)` and `U`, and its gradients with respect to `Psi(X)` and
/// `Psi(X+)`. The inner least squares uses a relative ridge.
pub fn baseline_loss_grad(
    kind: BaselineKind,
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
    u: &DMatrix<f64>,
    ridge: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    check_shapes(psi_x, psi_xplus)?;
    let n = psi_x.ncols() as f64;
    let p = psi_x.nrows();
    let r = regressor(kind, psi_x, u);
    let y = psi_xplus;
    let (c, _) = gram(&r, ridge);
    let ci = spd_inverse(&c);
    let t = &r * y.transpose();
    let cit = &ci * &t;
    let loss = (y.norm_squared() - (t.transpose() * &cit).trace()) / n;
    if !loss.is_finite() {
        return Err(non_finite_loss(loss, psi_x, psi_xplus));
    }
    let v = &cit * cit.transpose();
    let gy = (y - cit.transpose() * &r) * (2.0 / n);
    let mut gr = (&v * &r - &cit * y) * (2.0 / n);
    if ridge != 0.0 {
        gr += &r * (2.0 * ridge / r.nrows() as f64 * v.trace() / n);
    }
    let gx = regressor_grad(kind, &gr, u, p);
    Ok((loss, gx, gy))
}

/// Baseline residual loss without gradients.
pub fn baseline_loss(
    kind: BaselineKind,
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
    u: &DMatrix<f64>,
    ridge: f64,
) -> Result<f64> {
    baseline_loss_grad(kind, psi_x, psi_xplus, u, ridge).map(|r| r.0)
}

/// Scales rows in place; an empty scale leaves the matrix unchanged.
pub(crate) fn scale_rows_mut(m: &mut DMatrix<f64>, scale: &[f64]) {
    for (i, &c) in scale.iter().enumerate() {
        m.row_mut(i).scale_mut(c);
    }
}

/// Euclidean norm of a parameter vector.
pub fn param_norm(p: &[f64]) -> f64 {
    DVector::from_column_slice(p).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edmd::consistency_index;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn fd_check(
        f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> f64,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        ga: &DMatrix<f64>,
        gb: &DMatrix<f64>,
    ) {
        let h = 1e-6;
        for (which, g) in [(0, ga), (1, gb)] {
            for idx in [0, 3, 7, 11] {
                let (mut ap, mut am, mut bp, mut bm) = (a.clone(), a.clone(), b.clone(), b.clone());
                if which == 0 {
                    ap[idx] += h;
                    am[idx] -= h;
                } else {
                    bp[idx] += h;
                    bm[idx] -= h;
                }
                let fd = (f(&ap, &bp) - f(&am, &bm)) / (2.0 * h);
                assert!(
                    (fd - g[idx]).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "fd {fd} vs {}",
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn trace_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(4, 30, &mut rng);
        let b = random(4, 30, &mut rng);
        for ridge in [0.0, 1e-3] {
            let (_, ga, gb) = trace_loss_grad(&a, &b, ridge).unwrap();
            fd_check(
                |a, b| consistency_loss(a, b, LossMode::Trace, ridge).unwrap(),
                &a,
                &b,
                &ga,
                &gb,
            );
        }
    }

    #[test]
    fn baseline_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(3, 25, &mut rng);
        let b = random(3, 25, &mut rng);
        let u = random(2, 25, &mut rng);
        for kind in [BaselineKind::Linear, BaselineKind::Bilinear] {
            for ridge in [0.0, 1e-3] {
                let (_, ga, gb) = baseline_loss_grad(kind, &a, &b, &u, ridge).unwrap();
                fd_check(
                    |a, b| baseline_loss(kind, a, b, &u, ridge).unwrap(),
                    &a,
                    &b,
                    &ga,
                    &gb,
                );
            }
        }
    }

    #[test]
    fn baseline_loss_is_the_least_squares_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(3, 40, &mut rng);
        let b = random(3, 40, &mut rng);
        let u = random(1, 40, &mut rng);
        let (ka, kb) = crate::model::fit_linear_matrices(&a, &b, &u).unwrap();
        let direct = (&b - ka * &a - kb * &u).norm_squared() / 40.0;
        let loss = baseline_loss(BaselineKind::Linear, &a, &b, &u, 0.0).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn modes_match_the_plain_index_without_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let a = random(5, 40, &mut rng);
            let b = &a * 0.7 + random(5, 40, &mut rng) * 0.3;
            let report = consistency_index(&a, &b).unwrap();
            let tr = consistency_loss(&a, &b, LossMode::Trace, 0.0).unwrap();
            let me = consistency_loss(&a, &b, LossMode::MaxEig, 0.0).unwrap();
            assert!((me - report.index).abs() < 1e-9);
            assert!(tr + 1e-12 >= me && me + 1e-12 >= tr / 5.0);
        }
    }

    #[test]
    fn loss_is_basis_invariant_without_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(4, 50, &mut rng);
        let b = &a * 0.5 + random(4, 50, &mut rng) * 0.5;
        let t = random(4, 4, &mut rng) + DMatrix::identity(4, 4) * 2.0;
        for mode in [LossMode::Trace, LossMode::MaxEig] {
            let base = consistency_loss(&a, &b, mode, 1e-13).unwrap();
            let moved = consistency_loss(&(&t * &a), &(&t * &b), mode, 1e-13).unwrap();
            assert!((base - moved).abs() <= 1e-9, "{mode:?}: {base} vs {moved}");
        }
    }
}
