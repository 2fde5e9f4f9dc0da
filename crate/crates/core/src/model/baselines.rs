use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LiftedPredictor, StateReadout};
use crate::dynamics::SnapshotSet;
use crate::edmd::fit_edmd;
use crate::error::{KcfError, Result};
use crate::linalg::{
    matrix_rows, matrix_rows_vec, opt_matrix_rows, pinv, rank, vstack, DEFAULT_PINV_RCOND,
    DEFAULT_RANK_TOL,
};
use crate::observables::descriptor::DictionaryDescriptor;
use crate::observables::{eval_matrix, StateFeatures};

fn relative_residual(target: &DMatrix<f64>, fitted: &DMatrix<f64>) -> f64 {
    let denom = target.norm();
    if denom == 0.0 {
        0.0
    } else {
        (target - fitted).norm() / denom
    }
}

/// `[A, B] = Psi(X+) pinv([Psi(X); U])`.
pub fn fit_linear_matrices(
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let regressor = vstack(&[psi_x, u]);
    if regressor.iter().all(|&v| v == 0.0) {
        return Err(KcfError::DegenerateData(
            "regressor is identically zero".into(),
        ));
    }
    let m = psi_xplus * pinv(&regressor, DEFAULT_PINV_RCOND);
    let np = psi_x.nrows();
    Ok((
        m.columns(0, np).into_owned(),
        m.columns(np, u.nrows()).into_owned(),
    ))
}

/// `[Psi(X); Psi(X) .* u_1; ...; Psi(X) .* u_m]`, followed by `U` when `with_c`.
pub fn bilinear_regressor(psi_x: &DMatrix<f64>, u: &DMatrix<f64>, with_c: bool) -> DMatrix<f64> {
    let (np, cols, m) = (psi_x.nrows(), psi_x.ncols(), u.nrows());
    let rows = np * (1 + m) + if with_c { m } else { 0 };
    let mut out = DMatrix::zeros(rows, cols);
    out.rows_mut(0, np).copy_from(psi_x);
    for i in 0..m {
        for j in 0..cols {
            for r in 0..np {
                out[(np * (1 + i) + r, j)] = psi_x[(r, j)] * u[(i, j)];
            }
        }
    }
    if with_c {
        out.rows_mut(np * (1 + m), m).copy_from(u);
    }
    out
}

/// Bilinear least-squares fit: `(A, [B_1..B_m], C, regressor_full_rank)`.
pub fn fit_bilinear_matrices(
    psi_x: &DMatrix<f64>,
    psi_xplus: &DMatrix<f64>,
    u: &DMatrix<f64>,
    with_c: bool,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>, Option<DMatrix<f64>>, bool)> {
    let regressor = bilinear_regressor(psi_x, u, with_c);
    if regressor.iter().all(|&v| v == 0.0) {
        return Err(KcfError::DegenerateData(
            "regressor is identically zero".into(),
        ));
    }
    let full_rank = rank(&regressor, DEFAULT_RANK_TOL) == regressor.nrows();
    if !full_rank {
        log::warn!(
            "bilinear regressor is rank deficient; inputs may be collinear with the constant"
        );
    }
    let k = psi_xplus * pinv(&regressor, DEFAULT_PINV_RCOND);
    let (np, m) = (psi_x.nrows(), u.nrows());
    let a = k.columns(0, np).into_owned();
    let bs = (0..m)
        .map(|i| k.columns(np * (1 + i), np).into_owned())
        .collect();
    let c = with_c.then(|| k.columns(np * (1 + m), m).into_owned());
    Ok((a, bs, c, full_rank))
}

/// `psi(x+) = A psi(x) + B u`.
#[derive(Debug, Clone)]
pub struct LinearLiftedModel {
    pub psi: Arc<dyn StateFeatures>,
    pub descriptor: Option<DictionaryDescriptor>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub readout: Option<StateReadout>,
    /// Relative Frobenius residual on the fitting data.
    pub residual: f64,
}

/// Fits the linear lifted model on the state dictionary of `psi`.
pub fn fit_linear_baseline(
    psi: &DictionaryDescriptor,
    ss: &SnapshotSet,
) -> Result<LinearLiftedModel> {
    let h = psi.build()?.h;
    let px = eval_matrix(h.as_ref(), &ss.x)?;
    let pxp = eval_matrix(h.as_ref(), &ss.x_plus)?;
    let (a, b) = fit_linear_matrices(&px, &pxp, &ss.u)?;
    let residual = relative_residual(&pxp, &(&a * &px + &b * &ss.u));
    let readout = StateReadout::choose(&psi.fixed_head_coords()?, h.as_ref(), &ss.x)?;
    Ok(LinearLiftedModel {
        psi: h,
        descriptor: Some(psi.clone()),
        a,
        b,
        readout: Some(readout),
        residual,
    })
}

impl LinearLiftedModel {
    /// `[[A, B u], [0, 1]]` acting on `[psi; 1]`.
    pub fn separable_form(&self, u: &[f64]) -> DMatrix<f64> {
        let np = self.a.nrows();
        let mut out = DMatrix::zeros(np + 1, np + 1);
        out.view_mut((0, 0), (np, np)).copy_from(&self.a);
        let bu = &self.b * DVector::from_column_slice(u);
        out.view_mut((0, np), (np, 1)).copy_from(&bu);
        out[(np, np)] = 1.0;
        out
    }

    pub fn to_data(&self) -> Result<LinearModelData> {
        Ok(LinearModelData {
            a: self.a.clone(),
            b: self.b.clone(),
            dictionary: self
                .descriptor
                .clone()
                .ok_or_else(|| KcfError::Config("model has no dictionary descriptor".into()))?,
            readout: self.readout.clone(),
            residual: self.residual,
        })
    }

    pub fn from_data(d: &LinearModelData) -> Result<Self> {
        let h = d.dictionary.build()?.h;
        let np = h.dim();
        if d.a.shape() != (np, np) || d.b.nrows() != np {
            return Err(KcfError::Config(
                "linear model matrices do not match the dictionary".into(),
            ));
        }
        Ok(Self {
            psi: h,
            descriptor: Some(d.dictionary.clone()),
            a: d.a.clone(),
            b: d.b.clone(),
            readout: d.readout.clone(),
            residual: d.residual,
        })
    }
}

impl LiftedPredictor for LinearLiftedModel {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn state_dim(&self) -> usize {
        self.psi.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn lift(&self, x0: &[f64]) -> DVector<f64> {
        DVector::from_vec(self.psi.eval(x0))
    }

    fn step_lifted(&self, z: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>> {
        Ok(&self.a * z + &self.b * DVector::from_column_slice(u))
    }

    fn readout(&self) -> Option<&StateReadout> {
        self.readout.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelData {
    #[serde(rename = "A", with = "matrix_rows")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "matrix_rows")]
    pub b: DMatrix<f64>,
    pub dictionary: DictionaryDescriptor,
    #[serde(default)]
    pub readout: Option<StateReadout>,
    pub residual: f64,
}

/// `psi(x+) = A psi(x) + sum_i u_i B_i psi(x) (+ C u)`.
#[derive(Debug, Clone)]
pub struct BilinearLiftedModel {
    pub psi: Arc<dyn StateFeatures>,
    pub descriptor: Option<DictionaryDescriptor>,
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Option<DMatrix<f64>>,
    pub readout: Option<StateReadout>,
    pub residual: f64,
    /// Whether the stacked regressor had full row rank.
    pub regressor_full_rank: bool,
}

/// Fits the bilinear lifted model; `with_c` adds the `C u` term.
pub fn fit_bilinear_baseline(
    psi: &DictionaryDescriptor,
    ss: &SnapshotSet,
    with_c: bool,
) -> Result<BilinearLiftedModel> {
    let h = psi.build()?.h;
    let px = eval_matrix(h.as_ref(), &ss.x)?;
    let pxp = eval_matrix(h.as_ref(), &ss.x_plus)?;
    let (a, b, c, regressor_full_rank) = fit_bilinear_matrices(&px, &pxp, &ss.u, with_c)?;
    let readout = StateReadout::choose(&psi.fixed_head_coords()?, h.as_ref(), &ss.x)?;
    let mut model = BilinearLiftedModel {
        psi: h,
        descriptor: Some(psi.clone()),
        a,
        b,
        c,
        readout: Some(readout),
        residual: 0.0,
        regressor_full_rank,
    };
    let fitted = model.step_matrix(&px, &ss.u);
    model.residual = relative_residual(&pxp, &fitted);
    Ok(model)
}

impl BilinearLiftedModel {
    fn input_matrix(&self, u: &[f64]) -> DMatrix<f64> {
        let mut a = self.a.clone();
        for (bi, ui) in self.b.iter().zip(u) {
            a += bi * *ui;
        }
        a
    }

    fn step_matrix(&self, px: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        let reg = bilinear_regressor(px, u, self.c.is_some());
        let mut k = self.a.clone();
        for bi in &self.b {
            k = crate::linalg::hstack(&[&k, bi]);
        }
        if let Some(c) = &self.c {
            k = crate::linalg::hstack(&[&k, c]);
        }
        k * reg
    }

    /// `[[A + sum u_i B_i, C u], [0, 1]]` acting on `[psi; 1]`.
    pub fn separable_form(&self, u: &[f64]) -> DMatrix<f64> {
        let np = self.a.nrows();
        let mut out = DMatrix::zeros(np + 1, np + 1);
        out.view_mut((0, 0), (np, np))
            .copy_from(&self.input_matrix(u));
        if let Some(c) = &self.c {
            let cu = c * DVector::from_column_slice(u);
            out.view_mut((0, np), (np, 1)).copy_from(&cu);
        }
        out[(np, np)] = 1.0;
        out
    }

    pub fn to_data(&self) -> Result<BilinearModelData> {
        Ok(BilinearModelData {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            dictionary: self
                .descriptor
                .clone()
                .ok_or_else(|| KcfError::Config("model has no dictionary descriptor".into()))?,
            readout: self.readout.clone(),
            residual: self.residual,
            regressor_full_rank: self.regressor_full_rank,
        })
    }

    pub fn from_data(d: &BilinearModelData) -> Result<Self> {
        let h = d.dictionary.build()?.h;
        let np = h.dim();
        if d.a.shape() != (np, np) || d.b.iter().any(|b| b.shape() != (np, np)) {
            return Err(KcfError::Config(
                "bilinear model matrices do not match the dictionary".into(),
            ));
        }
        Ok(Self {
            psi: h,
            descriptor: Some(d.dictionary.clone()),
            a: d.a.clone(),
            b: d.b.clone(),
            c: d.c.clone(),
            readout: d.readout.clone(),
            residual: d.residual,
            regressor_full_rank: d.regressor_full_rank,
        })
    }
}

impl LiftedPredictor for BilinearLiftedModel {
    fn kind(&self) -> &'static str {
        "bilinear"
    }

    fn state_dim(&self) -> usize {
        self.psi.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.b.len()
    }

    fn lift(&self, x0: &[f64]) -> DVector<f64> {
        DVector::from_vec(self.psi.eval(x0))
    }

    fn step_lifted(&self, z: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>> {
        let mut next = self.input_matrix(u) * z;
        if let Some(c) = &self.c {
            next += c * DVector::from_column_slice(u);
        }
        Ok(next)
    }

    fn readout(&self) -> Option<&StateReadout> {
        self.readout.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearModelData {
    #[serde(rename = "A", with = "matrix_rows")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "matrix_rows_vec")]
    pub b: Vec<DMatrix<f64>>,
    #[serde(rename = "C", with = "opt_matrix_rows", default)]
    pub c: Option<DMatrix<f64>>,
    pub dictionary: DictionaryDescriptor,
    #[serde(default)]
    pub readout: Option<StateReadout>,
    pub residual: f64,
    pub regressor_full_rank: bool,
}

/// `Psi(x+) = A_u Psi(x)` over a finite input set.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedLinearModel {
    pub inputs: Vec<Vec<f64>>,
    pub matrices: Vec<DMatrix<f64>>,
}

impl SwitchedLinearModel {
    /// Matrix of the mode whose input equals `u` exactly.
    pub fn matrix_for(&self, u: &[f64]) -> Result<&DMatrix<f64>> {
        self.inputs
            .iter()
            .position(|v| v.as_slice() == u)
            .map(|i| &self.matrices[i])
            .ok_or_else(|| KcfError::UnknownInputValue { input: u.to_vec() })
    }
}

/// One EDMD fit per constant-input subset.
pub fn switched_from_constant_inputs(
    psi: &dyn StateFeatures,
    subsets: &[(Vec<f64>, SnapshotSet)],
) -> Result<SwitchedLinearModel> {
    let mut inputs = Vec::new();
    let mut matrices = Vec::new();
    for (u, ss) in subsets {
        if ss.u.column_iter().any(|c| c.as_slice() != u.as_slice()) {
            return Err(KcfError::Config(format!(
                "subset for input {u:?} contains other input values"
            )));
        }
        let fit = fit_edmd(&eval_matrix(psi, &ss.x)?, &eval_matrix(psi, &ss.x_plus)?)?;
        inputs.push(u.clone());
        matrices.push(fit.k);
    }
    Ok(SwitchedLinearModel { inputs, matrices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{example_poly, PolyParams};
    use crate::model::AnyModel;
    use crate::observables::Monomials;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 3, &mut rng) * 0.5;
        let b = random(3, 2, &mut rng);
        let z = random(3, 40, &mut rng);
        let u = random(2, 40, &mut rng);
        let zp = &a * &z + &b * &u;
        let (ah, bh) = fit_linear_matrices(&z, &zp, &u).unwrap();
        assert!((ah - a).amax() < 1e-9 && (bh - b).amax() < 1e-9);
    }

    #[test]
    fn linear_zero_input_reduces_to_edmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(3, 30, &mut rng);
        let zp = random(3, 30, &mut rng);
        let u = DMatrix::zeros(1, 30);
        let (a, b) = fit_linear_matrices(&z, &zp, &u).unwrap();
        assert!(b.amax() == 0.0);
        assert!((a - fit_edmd(&z, &zp).unwrap().k).amax() < 1e-12);
    }

    #[test]
    fn linear_fit_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(3, 30, &mut rng);
        let zp = random(3, 30, &mut rng);
        let u = random(1, 30, &mut rng);
        let (a, b) = fit_linear_matrices(&z, &zp, &u).unwrap();
        let base = (&zp - &a * &z - &b * &u).norm();
        for _ in 0..20 {
            let da = random(3, 3, &mut rng) * 0.01;
            let db = random(3, 1, &mut rng) * 0.01;
            assert!((&zp - (&a + da) * &z - (&b + db) * &u).norm() >= base);
        }
    }

    #[test]
    fn bilinear_exact_recovery_and_nesting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(3, 3, &mut rng) * 0.5;
        let b = random(3, 3, &mut rng) * 0.5;
        let z = random(3, 60, &mut rng);
        let u = random(1, 60, &mut rng);
        let mut zp = &a * &z;
        for j in 0..60 {
            let col = &b * z.column(j) * u[(0, j)];
            let updated = zp.column(j) + col;
            zp.set_column(j, &updated);
        }
        let (ah, bh, c, full) = fit_bilinear_matrices(&z, &zp, &u, false).unwrap();
        assert!(full && c.is_none());
        assert!((ah - &a).amax() < 1e-9 && (&bh[0] - &b).amax() < 1e-9);

        let target = random(3, 60, &mut rng);
        let (la, lb) = fit_linear_matrices(&z, &target, &u).unwrap();
        let lin_res = (&target - la * &z - lb * &u).norm();
        let (ba, bb, bc, _) = fit_bilinear_matrices(&z, &target, &u, true).unwrap();
        let reg = bilinear_regressor(&z, &u, true);
        let k = crate::linalg::hstack(&[&ba, &bb[0], bc.as_ref().unwrap()]);
        let bil_res = (&target - k * reg).norm();
        assert!(bil_res <= lin_res + 1e-12);
    }

    #[test]
    fn constant_unit_input_is_collinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random(2, 20, &mut rng);
        let u = DMatrix::from_element(1, 20, 1.0);
        let (.., full) = fit_bilinear_matrices(&z, &random(2, 20, &mut rng), &u, false).unwrap();
        assert!(!full);
    }

    fn poly_snapshots(n: usize, seed: u64, input: Option<f64>) -> SnapshotSet {
        let sys = example_poly(PolyParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0));
        let u = DMatrix::from_fn(1, n, |_, _| {
            input.unwrap_or_else(|| rng.gen_range(-2.0..2.0))
        });
        let mut xp = DMatrix::zeros(2, n);
        for j in 0..n {
            let next = sys.step(&[x[(0, j)], x[(1, j)]], &[u[(0, j)]]).unwrap();
            xp.set_column(j, &DVector::from_vec(next));
        }
        SnapshotSet::new(x, xp, u).unwrap()
    }

    #[test]
    fn block_embedding_reproduces_predictions() {
        let h = Monomials::total_degree(2, 2);
        let desc = DictionaryDescriptor::analytic(&h, None, 1);
        let ss = poly_snapshots(200, 6, None);
        let bil = fit_bilinear_baseline(&desc, &ss, true).unwrap();
        let lin = fit_linear_baseline(&desc, &ss).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let u = [rng.gen_range(-2.0..2.0)];
            for model in [&bil as &dyn LiftedPredictor, &lin] {
                let z = model.lift(&x);
                let direct = model.step_lifted(&z, &u).unwrap();
                let form = match model.kind() {
                    "bilinear" => bil.separable_form(&u),
                    _ => lin.separable_form(&u),
                };
                let mut zaug = DVector::zeros(z.len() + 1);
                zaug.rows_mut(0, z.len()).copy_from(&z);
                zaug[z.len()] = 1.0;
                let embedded = form * zaug;
                assert!(
                    (embedded.rows(0, z.len()) - &direct).amax() <= 1e-12 * (1.0 + direct.amax())
                );
                assert_eq!(embedded[z.len()], 1.0);
            }
        }
    }

    #[test]
    fn baseline_json_round_trip() {
        let h = Monomials::total_degree(2, 1);
        let desc =
            DictionaryDescriptor::analytic(&Monomials::new(2, h.exponents[1..].to_vec()), None, 1);
        let ss = poly_snapshots(50, 8, None);
        let bil = fit_bilinear_baseline(&desc, &ss, false).unwrap();
        let text = AnyModel::Bilinear(bil.clone()).to_json_string().unwrap();
        let AnyModel::Bilinear(back) = AnyModel::from_json_str(&text).unwrap() else {
            panic!("wrong kind");
        };
        assert_eq!(back.a, bil.a);
        assert_eq!(back.b, bil.b);
        let lin = fit_linear_baseline(&desc, &ss).unwrap();
        let AnyModel::Linear(back) =
            AnyModel::from_json_str(&AnyModel::Linear(lin.clone()).to_json_string().unwrap())
                .unwrap()
        else {
            panic!("wrong kind");
        };
        assert_eq!(back.a, lin.a);
        assert_eq!(
            back.readout,
            Some(StateReadout::FixedHead { coords: vec![0, 1] })
        );
    }

    #[test]
    fn switched_modes_match_separable_form() {
        let h = Monomials::new(2, vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![0, 0]]);
        let subsets = vec![
            (vec![-1.5], poly_snapshots(40, 9, Some(-1.5))),
            (vec![0.5], poly_snapshots(40, 10, Some(0.5))),
        ];
        let sw = switched_from_constant_inputs(&h, &subsets).unwrap();
        let (model, _) = crate::model::SeparableModel::identify(
            &DictionaryDescriptor::example_poly(),
            &crate::dynamics::to_augmented(&poly_snapshots(300, 11, None)).unwrap(),
        )
        .unwrap();
        for (u, _) in &subsets {
            assert!((sw.matrix_for(u).unwrap() - model.a_of(u)).amax() < 1e-8);
        }
        assert_eq!(
            sw.matrix_for(&[0.25]).unwrap_err(),
            KcfError::UnknownInputValue { input: vec![0.25] }
        );
        let single = switched_from_constant_inputs(&h, &subsets[..1]).unwrap();
        let plain = fit_edmd(
            &eval_matrix(&h, &subsets[0].1.x).unwrap(),
            &eval_matrix(&h, &subsets[0].1.x_plus).unwrap(),
        )
        .unwrap();
        assert_eq!(single.matrices[0], plain.k);
    }
}
