//! JSON descriptions of dictionaries.
//!
//! ```json
//! {"kind": "analytic", "dims": {"n": 2, "m": 1, "l": 4, "s": 8},
//!  "fixed_head": ["x1", "x2"], "h": [[1,0],[0,1],[2,0],[0,0]], "gtilde": {...}}
//! {"kind": "parametric", "dims": {...}, "fixed_head": [...], "spec": {...},
//!  "parameters": [...]}
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::analytic::{InputTerms, Monomials};
use super::parametric::{ParametricDictionary, ParametricSpec};
use super::{InputMatrixFn, NormalDictionary};
use crate::error::{KcfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictionaryDescriptor {
    /// Monomial `H` and a sparse analytic `G~`.
    Analytic {
        dims: Dims,
        #[serde(default)]
        fixed_head: Vec<String>,
        /// Exponent vectors of the monomials in `H`.
        h: Vec<Vec<u32>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gtilde: Option<InputTerms>,
    },
    /// Network-based dictionary with its flat parameter vector.
    Parametric {
        dims: Dims,
        #[serde(default)]
        fixed_head: Vec<String>,
        spec: ParametricSpec,
        parameters: Vec<f64>,
    },
}

impl DictionaryDescriptor {
    pub fn analytic(h: &Monomials, gtilde: Option<InputTerms>, m: usize) -> Self {
        let l = h.exponents.len();
        let s = l + gtilde.as_ref().map_or(0, |g| g.rows);
        // leading pure coordinates count as the fixed head
        let fixed_head = h
            .exponents
            .iter()
            .map_while(|e| {
                (e.iter().sum::<u32>() == 1)
                    .then(|| format!("x{}", e.iter().position(|&v| v == 1).unwrap_or(0) + 1))
            })
            .collect();
        DictionaryDescriptor::Analytic {
            dims: Dims { n: h.n, m, l, s },
            fixed_head,
            h: h.exponents.clone(),
            gtilde,
        }
    }

    pub fn from_parametric(d: &ParametricDictionary) -> Self {
        let sp = &d.spec;
        DictionaryDescriptor::Parametric {
            dims: Dims {
                n: sp.n,
                m: sp.m,
                l: sp.l,
                s: sp.s,
            },
            fixed_head: sp.fixed_head_tags(),
            spec: sp.clone(),
            parameters: d.params().to_vec(),
        }
    }

    /// The 8-function invariant dictionary of the polynomial example.
    pub fn example_poly() -> Self {
        let (h, g) = super::analytic::example_poly_parts();
        Self::analytic(&h, Some(g), 1)
    }

    pub fn dims(&self) -> Dims {
        match self {
            DictionaryDescriptor::Analytic { dims, .. }
            | DictionaryDescriptor::Parametric { dims, .. } => *dims,
        }
    }

    pub fn fixed_head(&self) -> &[String] {
        match self {
            DictionaryDescriptor::Analytic { fixed_head, .. }
            | DictionaryDescriptor::Parametric { fixed_head, .. } => fixed_head,
        }
    }

    /// State coordinates of the fixed head, in order.
    pub fn fixed_head_coords(&self) -> Result<Vec<usize>> {
        self.fixed_head()
            .iter()
            .map(|t| {
                t.strip_prefix('x')
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&i| i >= 1 && i <= self.dims().n)
                    .map(|i| i - 1)
                    .ok_or_else(|| KcfError::Config(format!("bad fixed head tag '{t}'")))
            })
            .collect()
    }

    /// Parametric form, when this describes a trainable dictionary.
    pub fn to_parametric(&self) -> Option<Result<ParametricDictionary>> {
        match self {
            DictionaryDescriptor::Parametric {
                spec, parameters, ..
            } => Some(ParametricDictionary::with_params(
                spec.clone(),
                parameters.clone(),
            )),
            DictionaryDescriptor::Analytic { .. } => None,
        }
    }

    pub fn build(&self) -> Result<NormalDictionary> {
        let dims = self.dims();
        let nd = match self {
            DictionaryDescriptor::Analytic { h, gtilde, .. } => {
                if h.iter().any(|e| e.len() != dims.n) {
                    return Err(KcfError::Config(format!(
                        "monomial exponents must have length n = {}",
                        dims.n
                    )));
                }
                let mons = Monomials::new(dims.n, h.clone());
                let g = match gtilde {
                    Some(g) => {
                        if let Some(t) = g.terms.iter().find(|t| t.row >= g.rows || t.col >= g.cols)
                        {
                            return Err(KcfError::Config(format!(
                                "G~ term at ({}, {}) outside {} x {}",
                                t.row, t.col, g.rows, g.cols
                            )));
                        }
                        Some(Arc::new(g.clone()) as Arc<dyn InputMatrixFn>)
                    }
                    None => None,
                };
                NormalDictionary::new(Arc::new(mons), g, dims.m)?
            }
            DictionaryDescriptor::Parametric { .. } => self
                .to_parametric()
                .expect("parametric variant")?
                .to_normal_dictionary(),
        };
        if nd.state_dim() != dims.n
            || nd.l() != dims.l
            || nd.s() != dims.s
            || nd.input_dim() != dims.m
        {
            return Err(KcfError::Config(format!(
                "declared dims {:?} do not match the dictionary (n={}, m={}, l={}, s={})",
                dims,
                nd.state_dim(),
                nd.input_dim(),
                nd.l(),
                nd.s()
            )));
        }
        self.fixed_head_coords()?;
        Ok(nd)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}
