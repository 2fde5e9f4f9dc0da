//! Small feed-forward networks over a flat parameter vector, evaluated on
//! batches stored column-wise, with exact reverse-mode parameter gradients.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::analytic::{monomial, Monomials};
use crate::error::{KcfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `ln(1 + e^z)`, smooth everywhere.
    #[default]
    Softplus,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Tanh => z.tanh(),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

/// Architecture of a trainable map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FamilyKind {
    /// Linear combinations of all monomials up to `degree`.
    Polynomial { degree: u32 },
    /// Dense layers of the given widths, then a linear output layer.
    Mlp {
        widths: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    /// Input layer, `blocks` residual blocks `h + W2 act(W1 h + b1) + b2`,
    /// then a linear output layer.
    ResidualMlp {
        blocks: usize,
        width: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl FamilyKind {
    pub fn residual_mlp(blocks: usize, width: usize) -> Self {
        FamilyKind::ResidualMlp {
            blocks,
            width,
            activation: Activation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FamilyKind::Polynomial { degree } if *degree == 0 => Err(KcfError::Config(
                "polynomial degree must be positive".into(),
            )),
            FamilyKind::Mlp { widths, .. } if widths.is_empty() || widths.contains(&0) => Err(
                KcfError::Config("mlp widths must be a non-empty list of positive integers".into()),
            ),
            FamilyKind::ResidualMlp { width, .. } if *width == 0 => Err(KcfError::Config(
                "residual_mlp width must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Dense layer `W a + b` located in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    rows: usize,
    cols: usize,
    offset: usize,
    bias: bool,
}

impl Dense {
    fn len(&self) -> usize {
        self.rows * self.cols + if self.bias { self.rows } else { 0 }
    }

    fn weight<'a>(&self, p: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(
            &p[self.offset..self.offset + self.rows * self.cols],
            self.rows,
            self.cols,
        )
    }

    fn apply(&self, p: &[f64], a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = self.weight(p) * a;
        if self.bias {
            let b = &p[self.offset + self.rows * self.cols..self.offset + self.len()];
            for mut col in z.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(b) {
                    *v += bi;
                }
            }
        }
        z
    }

    /// Accumulates parameter gradients for upstream `g` (`rows x N`) and
    /// layer input `a`; returns the gradient with respect to `a`.
    fn backward(
        &self,
        p: &[f64],
        a: &DMatrix<f64>,
        g: &DMatrix<f64>,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<DMatrix<f64>> {
        let dw = g * a.transpose();
        let wlen = self.rows * self.cols;
        for (dst, v) in grad[self.offset..self.offset + wlen]
            .iter_mut()
            .zip(dw.iter())
        {
            *dst += v;
        }
        if self.bias {
            let db = g.column_sum();
            for (dst, v) in grad[self.offset + wlen..self.offset + self.len()]
                .iter_mut()
                .zip(db.iter())
            {
                *dst += v;
            }
        }
        need_input.then(|| self.weight(p).transpose() * g)
    }
}

/// Intermediate values from [`Network::forward`], consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct NetCache {
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

/// A trainable map `R^input_dim -> R^output_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub kind: FamilyKind,
    pub input_dim: usize,
    pub output_dim: usize,
    layers: Vec<Dense>,
    monomials: Option<Monomials>,
}

impl Network {
    pub fn new(kind: FamilyKind, input_dim: usize, output_dim: usize) -> Result<Self> {
        kind.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |rows: usize, cols: usize, bias: bool| {
            layers.push(Dense {
                rows,
                cols,
                offset,
                bias,
            });
            offset += rows * cols + if bias { rows } else { 0 };
        };
        let mut monomials = None;
        match &kind {
            FamilyKind::Polynomial { degree } => {
                let mons = Monomials::total_degree(input_dim, *degree);
                push(output_dim, mons.exponents.len(), false);
                monomials = Some(mons);
            }
            FamilyKind::Mlp { widths, .. } => {
                let mut prev = input_dim;
                for &w in widths {
                    push(w, prev, true);
                    prev = w;
                }
                push(output_dim, prev, true);
            }
            FamilyKind::ResidualMlp { blocks, width, .. } => {
                push(*width, input_dim, true);
                for _ in 0..*blocks {
                    push(*width, *width, true);
                    push(*width, *width, true);
                }
                push(output_dim, *width, true);
            }
        }
        Ok(Self {
            kind,
            input_dim,
            output_dim,
            layers,
            monomials,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// Number of monomial features for the polynomial kind, hidden width otherwise.
    pub fn feature_dim(&self) -> usize {
        match &self.monomials {
            Some(m) => m.exponents.len(),
            None => self.layers.last().map_or(0, |d| d.cols),
        }
    }

    /// Monomial features of the polynomial kind, in weight-column order.
    pub fn monomials(&self) -> Option<&Monomials> {
        self.monomials.as_ref()
    }

    /// Number of residual blocks and their width, for the residual kind.
    pub fn residual_shape(&self) -> Option<(usize, usize)> {
        match self.kind {
            FamilyKind::ResidualMlp { blocks, width, .. } => Some((blocks, width)),
            _ => None,
        }
    }

    /// Uniform Glorot-style weights and zero biases. The second weight of
    /// every residual block is shrunk so that blocks start near identity.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params()];
        let blocks = self.residual_shape().map_or(0, |(b, _)| b);
        for (i, d) in self.layers.iter().enumerate() {
            let mut bound = (6.0 / (d.rows + d.cols) as f64).sqrt();
            if blocks > 0 && i >= 1 && i <= 2 * blocks && i % 2 == 0 {
                bound *= 0.1;
            }
            for v in &mut p[d.offset..d.offset + d.rows * d.cols] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    fn activation(&self) -> Activation {
        match self.kind {
            FamilyKind::Polynomial { .. } => Activation::Relu,
            FamilyKind::Mlp { activation, .. } | FamilyKind::ResidualMlp { activation, .. } => {
                activation
            }
        }
    }

    /// Evaluates on `input` (`input_dim x N`), returning `output_dim x N`.
    pub fn forward(&self, params: &[f64], input: &DMatrix<f64>) -> (DMatrix<f64>, NetCache) {
        assert_eq!(params.len(), self.num_params(), "parameter vector length");
        assert_eq!(input.nrows(), self.input_dim, "network input rows");
        let act = self.activation();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let layers = &self.layers;
        let out = match &self.kind {
            FamilyKind::Polynomial { .. } => {
                let mons = self.monomials.as_ref().expect("polynomial features");
                let feats = DMatrix::from_fn(mons.exponents.len(), input.ncols(), |i, j| {
                    let x: Vec<f64> = input.column(j).iter().copied().collect();
                    monomial(&x, &mons.exponents[i])
                });
                let out = layers[0].apply(params, &feats);
                post.push(feats);
                out
            }
            FamilyKind::Mlp { .. } => {
                let mut a = input.clone();
                for layer in &layers[..layers.len() - 1] {
                    let z = layer.apply(params, &a);
                    a = z.map(|v| act.apply(v));
                    pre.push(z);
                    post.push(a.clone());
                }
                layers[layers.len() - 1].apply(params, &a)
            }
            FamilyKind::ResidualMlp { blocks, .. } => {
                let z0 = layers[0].apply(params, input);
                let mut h = z0.map(|v| act.apply(v));
                pre.push(z0);
                post.push(h.clone());
                for b in 0..*blocks {
                    let z1 = layers[1 + 2 * b].apply(params, &h);
                    let a1 = z1.map(|v| act.apply(v));
                    h += layers[2 + 2 * b].apply(params, &a1);
                    pre.push(z1);
                    post.push(a1);
                    post.push(h.clone());
                }
                layers[layers.len() - 1].apply(params, &h)
            }
        };
        let cache = NetCache {
            input: input.clone(),
            pre,
            post,
        };
        (out, cache)
    }

    /// Adds `d(sum grad_out .* output)/d(params)` into `grad`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &NetCache,
        grad_out: &DMatrix<f64>,
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), self.num_params(), "gradient vector length");
        let act = self.activation();
        let layers = &self.layers;
        match &self.kind {
            FamilyKind::Polynomial { .. } => {
                layers[0].backward(params, &cache.post[0], grad_out, grad, false);
            }
            FamilyKind::Mlp { .. } => {
                let hidden = layers.len() - 1;
                let mut g = layers[hidden]
                    .backward(params, &cache.post[hidden - 1], grad_out, grad, true)
                    .expect("input gradient");
                for i in (0..hidden).rev() {
                    let gz = g.zip_map(&cache.pre[i], |gv, z| gv * act.derivative(z));
                    let a_prev = if i == 0 {
                        &cache.input
                    } else {
                        &cache.post[i - 1]
                    };
                    if let Some(next) = layers[i].backward(params, a_prev, &gz, grad, i > 0) {
                        g = next;
                    }
                }
            }
            FamilyKind::ResidualMlp { blocks, .. } => {
                let last = layers.len() - 1;
                let mut gh = layers[last]
                    .backward(
                        params,
                        cache.post.last().expect("cache"),
                        grad_out,
                        grad,
                        true,
                    )
                    .expect("input gradient");
                for b in (0..*blocks).rev() {
                    // post layout: [h0, a1_0, h1, a1_1, h2, ...]
                    let a1 = &cache.post[1 + 2 * b];
                    let h_prev = &cache.post[2 * b];
                    let g_a1 = layers[2 + 2 * b]
                        .backward(params, a1, &gh, grad, true)
                        .expect("input gradient");
                    let gz1 = g_a1.zip_map(&cache.pre[1 + b], |gv, z| gv * act.derivative(z));
                    gh += layers[1 + 2 * b]
                        .backward(params, h_prev, &gz1, grad, true)
                        .expect("input gradient");
                }
                let gz0 = gh.zip_map(&cache.pre[0], |gv, z| gv * act.derivative(z));
                layers[0].backward(params, &cache.input, &gz0, grad, false);
            }
        }
    }

    /// Smallest `|pre-activation|` seen in a forward pass; used to keep
    /// finite-difference checks away from ReLU kinks.
    pub fn min_abs_preactivation(cache: &NetCache) -> f64 {
        cache
            .pre
            .iter()
            .flat_map(|m| m.iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }

    /// Single-point evaluation.
    pub fn eval(&self, params: &[f64], x: &[f64]) -> DVector<f64> {
        let input = DMatrix::from_column_slice(self.input_dim, 1, x);
        self.forward(params, &input).0.column(0).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(kind: FamilyKind, d_in: usize, d_out: usize, seed: u64) {
        let net = Network::new(kind, d_in, d_out).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let p = net.init_params(&mut rng);
            let x = DMatrix::from_fn(d_in, 7, |_, _| rng.gen_range(-1.0..1.0));
            let c = DMatrix::from_fn(d_out, 7, |_, _| rng.gen_range(-1.0..1.0));
            let readout = |q: &[f64]| net.forward(q, &x).0.component_mul(&c).sum();
            let (_, cache) = net.forward(&p, &x);
            let mut grad = vec![0.0; p.len()];
            net.backward(&p, &cache, &c, &mut grad);
            let h = 1e-5;
            let mut q = p.clone();
            let mut fd = vec![0.0; p.len()];
            for i in 0..p.len() {
                q[i] = p[i] + h;
                let up = readout(&q);
                q[i] = p[i] - h;
                let dn = readout(&q);
                q[i] = p[i];
                fd[i] = (up - dn) / (2.0 * h);
            }
            let diff: f64 = grad
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                diff <= 1e-4 * norm.max(1e-12),
                "relative gradient error {}",
                diff / norm
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(FamilyKind::Polynomial { degree: 3 }, 2, 3, 1);
        fd_check(
            FamilyKind::Mlp {
                widths: vec![6, 5],
                activation: Activation::Softplus,
            },
            2,
            3,
            2,
        );
        fd_check(
            FamilyKind::Mlp {
                widths: vec![4],
                activation: Activation::Tanh,
            },
            1,
            2,
            3,
        );
        fd_check(FamilyKind::residual_mlp(2, 5), 2, 4, 4);
    }

    #[test]
    fn relu_gradient_away_from_kinks() {
        let kind = FamilyKind::ResidualMlp {
            blocks: 2,
            width: 6,
            activation: Activation::Relu,
        };
        let net = Network::new(kind, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 5 {
            let p = net.init_params(&mut rng);
            let x = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
            let (_, cache) = net.forward(&p, &x);
            if Network::min_abs_preactivation(&cache) < 1e-3 {
                continue;
            }
            let c = DMatrix::from_element(2, 3, 1.0);
            let mut grad = vec![0.0; p.len()];
            net.backward(&p, &cache, &c, &mut grad);
            let i = rng.gen_range(0..p.len());
            let mut q = p.clone();
            q[i] += 1e-6;
            let up = net.forward(&q, &x).0.sum();
            q[i] -= 2e-6;
            let dn = net.forward(&q, &x).0.sum();
            assert!(((up - dn) / 2e-6 - grad[i]).abs() < 1e-6 * (1.0 + grad[i].abs()));
            checked += 1;
        }
    }

    #[test]
    fn residual_architecture_size() {
        let net = Network::new(FamilyKind::residual_mlp(5, 64), 2, 10).unwrap();
        assert_eq!(net.residual_shape(), Some((5, 64)));
        let expected = (64 * 2 + 64) + 5 * 2 * (64 * 64 + 64) + (10 * 64 + 10);
        assert_eq!(net.num_params(), expected);
        assert_eq!(net.feature_dim(), 64);
    }

    #[test]
    fn polynomial_feature_count() {
        let net = Network::new(FamilyKind::Polynomial { degree: 2 }, 2, 4).unwrap();
        assert_eq!(net.feature_dim(), 6);
        assert_eq!(net.num_params(), 24);
    }

    #[test]
    fn invalid_kinds_are_config_errors() {
        for kind in [
            FamilyKind::Polynomial { degree: 0 },
            FamilyKind::Mlp {
                widths: vec![3, 0],
                activation: Activation::Relu,
            },
            FamilyKind::Mlp {
                widths: vec![],
                activation: Activation::Relu,
            },
            FamilyKind::residual_mlp(2, 0),
        ] {
            assert!(matches!(Network::new(kind, 2, 2), Err(KcfError::Config(_))));
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let net = Network::new(FamilyKind::residual_mlp(2, 8), 1, 3).unwrap();
        let a = net.init_params(&mut ChaCha8Rng::seed_from_u64(11));
        let b = net.init_params(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn softplus_is_stable() {
        let sp = Activation::Softplus;
        assert!((sp.apply(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sp.apply(-800.0), 0.0);
        assert_eq!(sp.apply(800.0), 800.0);
        assert!((sp.derivative(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kind_json() {
        let k: FamilyKind =
            serde_json::from_str(r#"{"type":"residual_mlp","blocks":2,"width":32}"#).unwrap();
        assert_eq!(k, FamilyKind::residual_mlp(2, 32));
    }
}
