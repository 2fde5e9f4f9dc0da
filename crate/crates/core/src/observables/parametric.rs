//! Trainable dictionaries in normal form: `H(x) = [x_head; NN_H(D_x x)]` and
//! `G~(u) = reshape(NN_G(D_u u))`, with the identity top block fixed.
//!
//! `D_x` and `D_u` are constant diagonal pre-scalings. They are part of the
//! map, so a trained dictionary is evaluated directly in original
//! coordinates.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{FamilyKind, NetCache, Network};
use super::{InputMatrixFn, NormalDictionary, StateFeatures};
use crate::error::{KcfError, Result};

/// Shape and architecture of a parametric dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricSpec {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub s: usize,
    pub h_family: FamilyKind,
    pub g_family: FamilyKind,
    /// State coordinates (0-based) placed unchanged at the top of `H`.
    #[serde(default)]
    pub fixed_head: Vec<usize>,
    /// Per-coordinate state multipliers; empty means all ones.
    #[serde(default)]
    pub x_scale: Vec<f64>,
    /// Per-coordinate input multipliers; empty means all ones.
    #[serde(default)]
    pub u_scale: Vec<f64>,
}

impl ParametricSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(KcfError::Config(m));
        if self.n == 0 || self.m == 0 {
            return err("state and input dimensions must be positive".into());
        }
        if self.l == 0 || self.s < self.l {
            return err(format!(
                "need 1 <= l <= s, got l = {}, s = {}",
                self.l, self.s
            ));
        }
        if self.fixed_head.len() > self.l {
            return err(format!(
                "fixed head has {} entries but l = {}",
                self.fixed_head.len(),
                self.l
            ));
        }
        if let Some(&c) = self.fixed_head.iter().find(|&&c| c >= self.n) {
            return err(format!(
                "fixed head coordinate {c} out of range for n = {}",
                self.n
            ));
        }
        if !self.x_scale.is_empty() && self.x_scale.len() != self.n {
            return err(format!(
                "x_scale has {} entries, expected {}",
                self.x_scale.len(),
                self.n
            ));
        }
        if !self.u_scale.is_empty() && self.u_scale.len() != self.m {
            return err(format!(
                "u_scale has {} entries, expected {}",
                self.u_scale.len(),
                self.m
            ));
        }
        if self
            .x_scale
            .iter()
            .chain(&self.u_scale)
            .any(|v| !v.is_finite() || *v == 0.0)
        {
            return err("scales must be finite and nonzero".into());
        }
        self.h_family.validate()?;
        self.g_family.validate()
    }

    pub fn fixed_head_tags(&self) -> Vec<String> {
        self.fixed_head
            .iter()
            .map(|c| format!("x{}", c + 1))
            .collect()
    }
}

fn scale_rows(data: &DMatrix<f64>, scale: &[f64]) -> DMatrix<f64> {
    if scale.is_empty() {
        return data.clone();
    }
    let mut out = data.clone();
    for (i, &c) in scale.iter().enumerate() {
        out.row_mut(i).scale_mut(c);
    }
    out
}

/// Forward-pass values kept for the gradient.
#[derive(Debug, Clone)]
pub struct PhiCache {
    h: DMatrix<f64>,
    gflat: Option<DMatrix<f64>>,
    h_cache: Option<NetCache>,
    g_cache: Option<NetCache>,
}

impl PhiCache {
    /// Smallest `|pre-activation|` over both networks.
    pub fn min_abs_preactivation(&self) -> f64 {
        [&self.h_cache, &self.g_cache]
            .into_iter()
            .flatten()
            .map(Network::min_abs_preactivation)
            .fold(f64::INFINITY, f64::min)
    }
}

/// A normal-form dictionary with a flat trainable parameter vector
/// `[theta_H; theta_G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricDictionary {
    pub spec: ParametricSpec,
    h_net: Option<Network>,
    g_net: Option<Network>,
    params: Vec<f64>,
}

impl ParametricDictionary {
    /// Builds the networks and draws initial parameters from `seed`.
    pub fn new(spec: ParametricSpec, seed: u64) -> Result<Self> {
        let mut d = Self::with_params(spec, Vec::new())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(d.num_params());
        if let Some(net) = &d.h_net {
            params.extend(net.init_params(&mut rng));
        }
        if let Some(net) = &d.g_net {
            params.extend(net.init_params(&mut rng));
        }
        d.params = params;
        Ok(d)
    }

    /// Builds the networks with given parameters. An empty vector is
    /// accepted and leaves parameters unset (all zeros).
    pub fn with_params(spec: ParametricSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let h_out = spec.l - spec.fixed_head.len();
        let h_net = if h_out > 0 {
            Some(Network::new(spec.h_family.clone(), spec.n, h_out)?)
        } else {
            None
        };
        let g_net = if spec.s > spec.l {
            Some(Network::new(
                spec.g_family.clone(),
                spec.m,
                (spec.s - spec.l) * spec.l,
            )?)
        } else {
            None
        };
        let total = h_net.as_ref().map_or(0, Network::num_params)
            + g_net.as_ref().map_or(0, Network::num_params);
        let params = if params.is_empty() {
            vec![0.0; total]
        } else {
            params
        };
        if params.len() != total {
            return Err(KcfError::DimensionMismatch(format!(
                "parameter vector has {} entries, architecture needs {total}",
                params.len()
            )));
        }
        Ok(Self {
            spec,
            h_net,
            g_net,
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.h_net.as_ref().map_or(0, Network::num_params)
            + self.g_net.as_ref().map_or(0, Network::num_params)
    }

    fn h_len(&self) -> usize {
        self.h_net.as_ref().map_or(0, Network::num_params)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(KcfError::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn h_network(&self) -> Option<&Network> {
        self.h_net.as_ref()
    }

    pub fn g_network(&self) -> Option<&Network> {
        self.g_net.as_ref()
    }

    /// `Phi(X, U)` (`s x N`) with the cache needed by [`backward`](Self::backward).
    pub fn forward(&self, x: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, PhiCache)> {
        let sp = &self.spec;
        if x.nrows() != sp.n || u.nrows() != sp.m || x.ncols() != u.ncols() {
            return Err(KcfError::DimensionMismatch(format!(
                "expected X: {} x N and U: {} x N, got {} x {} and {} x {}",
                sp.n,
                sp.m,
                x.nrows(),
                x.ncols(),
                u.nrows(),
                u.ncols()
            )));
        }
        let cols = x.ncols();
        let (l, s, head) = (sp.l, sp.s, sp.fixed_head.len());
        let mut h = DMatrix::zeros(l, cols);
        for (r, &c) in sp.fixed_head.iter().enumerate() {
            h.row_mut(r).copy_from(&x.row(c));
        }
        let h_cache = self.h_net.as_ref().map(|net| {
            let (out, cache) =
                net.forward(&self.params[..self.h_len()], &scale_rows(x, &sp.x_scale));
            h.rows_mut(head, l - head).copy_from(&out);
            cache
        });
        let mut phi = DMatrix::zeros(s, cols);
        phi.rows_mut(0, l).copy_from(&h);
        let (gflat, g_cache) = match &self.g_net {
            None => (None, None),
            Some(net) => {
                let (gflat, cache) =
                    net.forward(&self.params[self.h_len()..], &scale_rows(u, &sp.u_scale));
                let r = s - l;
                for j in 0..cols {
                    let gj = gflat.column(j);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for c in 0..l {
                            acc += gj[i + c * r] * h[(c, j)];
                        }
                        phi[(l + i, j)] = acc;
                    }
                }
                (Some(gflat), Some(cache))
            }
        };
        Ok((
            phi,
            PhiCache {
                h,
                gflat,
                h_cache,
                g_cache,
            },
        ))
    }

    /// Gradient of `sum(grad_phi .* Phi)` with respect to the parameters.
    pub fn backward(&self, cache: &PhiCache, grad_phi: &DMatrix<f64>) -> Vec<f64> {
        let sp = &self.spec;
        let (l, s, head) = (sp.l, sp.s, sp.fixed_head.len());
        let cols = grad_phi.ncols();
        let mut grad = vec![0.0; self.num_params()];
        let mut dh = grad_phi.rows(0, l).into_owned();
        if let (Some(net), Some(gflat), Some(gc)) = (&self.g_net, &cache.gflat, &cache.g_cache) {
            let r = s - l;
            let mut dg = DMatrix::zeros(r * l, cols);
            for j in 0..cols {
                for c in 0..l {
                    let hc = cache.h[(c, j)];
                    let mut acc = 0.0;
                    for i in 0..r {
                        let gb = grad_phi[(l + i, j)];
                        dg[(i + c * r, j)] = gb * hc;
                        acc += gflat[(i + c * r, j)] * gb;
                    }
                    dh[(c, j)] += acc;
                }
            }
            let h_len = self.h_len();
            net.backward(&self.params[h_len..], gc, &dg, &mut grad[h_len..]);
        }
        if let (Some(net), Some(hc)) = (&self.h_net, &cache.h_cache) {
            let h_len = self.h_len();
            let upstream = dh.rows(head, l - head).into_owned();
            net.backward(&self.params[..h_len], hc, &upstream, &mut grad[..h_len]);
        }
        grad
    }

    /// A frozen copy usable wherever a [`NormalDictionary`] is expected.
    pub fn to_normal_dictionary(&self) -> NormalDictionary {
        let sp = &self.spec;
        let h = ParamH {
            n: sp.n,
            l: sp.l,
            head: sp.fixed_head.clone(),
            net: self.h_net.clone(),
            params: self.params[..self.h_len()].to_vec(),
            x_scale: sp.x_scale.clone(),
        };
        let g = self.g_net.as_ref().map(|net| {
            Arc::new(ParamG {
                m: sp.m,
                rows: sp.s - sp.l,
                cols: sp.l,
                net: net.clone(),
                params: self.params[self.h_len()..].to_vec(),
                u_scale: sp.u_scale.clone(),
            }) as Arc<dyn InputMatrixFn>
        });
        NormalDictionary::new(Arc::new(h), g, sp.m).expect("shapes are consistent by construction")
    }
}

#[derive(Debug, Clone)]
struct ParamH {
    n: usize,
    l: usize,
    head: Vec<usize>,
    net: Option<Network>,
    params: Vec<f64>,
    x_scale: Vec<f64>,
}

impl StateFeatures for ParamH {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.l
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let data = DMatrix::from_column_slice(self.n, 1, x);
        out.copy_from_slice(self.eval_columns(&data).as_slice());
    }

    fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.head.iter().map(|c| format!("x{}", c + 1)).collect();
        tags.extend((tags.len() + 1..=self.l).map(|i| format!("h{i}")));
        tags
    }

    fn eval_columns(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.l, data.ncols());
        for (r, &c) in self.head.iter().enumerate() {
            h.row_mut(r).copy_from(&data.row(c));
        }
        if let Some(net) = &self.net {
            let (out, _) = net.forward(&self.params, &scale_rows(data, &self.x_scale));
            h.rows_mut(self.head.len(), out.nrows()).copy_from(&out);
        }
        h
    }
}

#[derive(Debug, Clone)]
struct ParamG {
    m: usize,
    rows: usize,
    cols: usize,
    net: Network,
    params: Vec<f64>,
    u_scale: Vec<f64>,
}

impl InputMatrixFn for ParamG {
    fn input_dim(&self) -> usize {
        self.m
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn eval(&self, u: &[f64]) -> DMatrix<f64> {
        let data = DMatrix::from_column_slice(self.m, 1, u);
        self.eval_many(&data).pop().expect("one column")
    }

    fn eval_many(&self, inputs: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let (out, _) = self
            .net
            .forward(&self.params, &scale_rows(inputs, &self.u_scale));
        out.column_iter()
            .map(|c| DMatrix::from_column_slice(self.rows, self.cols, c.as_slice()))
            .collect()
    }
}
