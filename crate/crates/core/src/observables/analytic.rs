use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{InputMatrixFn, NormalDictionary, StateFeatures};

/// State monomials `prod_i x_i^{e_i}`, one per exponent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomials {
    pub n: usize,
    pub exponents: Vec<Vec<u32>>,
}

impl Monomials {
    pub fn new(n: usize, exponents: Vec<Vec<u32>>) -> Self {
        assert!(
            exponents.iter().all(|e| e.len() == n),
            "exponent length must equal n"
        );
        Self { n, exponents }
    }

    /// All monomials of total degree at most `degree`, graded order.
    pub fn total_degree(n: usize, degree: u32) -> Self {
        let mut exps = Vec::new();
        for d in 0..=degree {
            let mut cur = vec![0u32; n];
            push_degree(&mut exps, &mut cur, 0, d);
        }
        Self { n, exponents: exps }
    }
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, idx: usize, remaining: u32) {
    if idx + 1 == cur.len() {
        cur[idx] = remaining;
        out.push(cur.clone());
        return;
    }
    if cur.is_empty() {
        out.push(vec![]);
        return;
    }
    for k in (0..=remaining).rev() {
        cur[idx] = k;
        push_degree(out, cur, idx + 1, remaining - k);
    }
    cur[idx] = 0;
}

pub(crate) fn monomial(x: &[f64], exps: &[u32]) -> f64 {
    x.iter().zip(exps).map(|(v, &e)| v.powi(e as i32)).product()
}

pub(crate) fn monomial_tag(exps: &[u32], var: char) -> String {
    let parts: Vec<String> = exps
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 0)
        .map(|(i, &e)| {
            if e == 1 {
                format!("{var}{}", i + 1)
            } else {
                format!("{var}{}^{e}", i + 1)
            }
        })
        .collect();
    if parts.is_empty() {
        "1".to_string()
    } else {
        parts.join("*")
    }
}

impl StateFeatures for Monomials {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.exponents.len()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = monomial(x, e);
        }
    }

    fn tags(&self) -> Vec<String> {
        self.exponents
            .iter()
            .map(|e| monomial_tag(e, 'x'))
            .collect()
    }
}

/// Scalar input functions used to build `G~` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum InputFn {
    Const { value: f64 },
    Power { coord: usize, exp: u32 },
    Sin { coord: usize },
    Cos { coord: usize },
    Tanh { coord: usize },
}

impl InputFn {
    pub fn eval(&self, u: &[f64]) -> f64 {
        match *self {
            InputFn::Const { value } => value,
            InputFn::Power { coord, exp } => u[coord].powi(exp as i32),
            InputFn::Sin { coord } => u[coord].sin(),
            InputFn::Cos { coord } => u[coord].cos(),
            InputFn::Tanh { coord } => u[coord].tanh(),
        }
    }
}

/// One additive contribution `coeff * f(u)` to entry `(row, col)` of `G~`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputTerm {
    pub row: usize,
    pub col: usize,
    #[serde(default = "one")]
    pub coeff: f64,
    #[serde(flatten)]
    pub func: InputFn,
}

fn one() -> f64 {
    1.0
}

/// `G~(u)` assembled from sparse analytic entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputTerms {
    pub m: usize,
    pub rows: usize,
    pub cols: usize,
    pub terms: Vec<InputTerm>,
}

impl InputMatrixFn for InputTerms {
    fn input_dim(&self) -> usize {
        self.m
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn eval(&self, u: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.rows, self.cols);
        for t in &self.terms {
            g[(t.row, t.col)] += t.coeff * t.func.eval(u);
        }
        g
    }
}

/// State dictionary backed by an arbitrary closure.
#[derive(Clone)]
pub struct FnStateFeatures {
    pub n: usize,
    pub l: usize,
    pub tags: Vec<String>,
    f: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl FnStateFeatures {
    pub fn new(n: usize, l: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            n,
            l,
            tags: (1..=l).map(|i| format!("h{i}")).collect(),
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnStateFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnStateFeatures")
            .field("n", &self.n)
            .field("l", &self.l)
            .field("tags", &self.tags)
            .finish()
    }
}

impl StateFeatures for FnStateFeatures {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.l
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }

    fn tags(&self) -> Vec<String> {
        self.tags.clone()
    }
}

/// `H` and `G~` of the exact dictionary for the polynomial example.
pub(crate) fn example_poly_parts() -> (Monomials, InputTerms) {
    let h = Monomials::new(2, vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![0, 0]]);
    let term = |row, col, func| InputTerm {
        row,
        col,
        coeff: 1.0,
        func,
    };
    let g = InputTerms {
        m: 1,
        rows: 4,
        cols: 4,
        terms: vec![
            term(0, 0, InputFn::Power { coord: 0, exp: 1 }),
            term(1, 3, InputFn::Power { coord: 0, exp: 1 }),
            term(2, 3, InputFn::Power { coord: 0, exp: 2 }),
            term(3, 3, InputFn::Sin { coord: 0 }),
        ],
    };
    (h, g)
}

/// The exact 8-function dictionary for the polynomial example:
/// `H = [x1, x2, x1^2, 1]` and `G~(u)` carrying `x1 u, u, u^2, sin(u)`.
pub fn example_poly_dictionary() -> NormalDictionary {
    let (h, g) = example_poly_parts();
    NormalDictionary::new(Arc::new(h), Some(Arc::new(g)), 1).expect("consistent shapes")
}
