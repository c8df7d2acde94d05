//! The shared basis: products of univariate polynomials in each underlying.
//!
//! Terms are ordered by total degree, and within a degree in descending
//! lexicographic order of their exponents: for two underlyings `x, y` and a
//! quadratic basis the order is `1, x, y, x², xy, y²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    #[default]
    Monomial,
    Chebyshev,
}

/// JSON form of a [`BasisSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default)]
    pub family: BasisFamily,
    /// Maximum degree per underlying.
    pub max_degree: Vec<u32>,
    #[serde(default = "default_true")]
    pub cross_terms: bool,
    /// Defaults to the largest per-underlying degree.
    #[serde(default)]
    pub max_total_degree: Option<u32>,
    /// Optional affine map per underlying: `u = (x − center) / half_width`.
    #[serde(default)]
    pub domain: Option<Vec<[f64; 2]>>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisConfig", into = "BasisConfig")]
pub struct BasisSpec {
    config: BasisConfig,
    terms: Vec<Vec<u32>>,
}

impl TryFrom<BasisConfig> for BasisSpec {
    type Error = Error;

    fn try_from(config: BasisConfig) -> Result<Self> {
        BasisSpec::new(config)
    }
}

impl From<BasisSpec> for BasisConfig {
    fn from(spec: BasisSpec) -> Self {
        spec.config
    }
}

/// Value, gradient and Hessian of every basis function at one state.
///
/// `gradient[l·n + b]` is `∂f_l/∂x_b`; `hessian[(l·n + b)·n + c]` is
/// `∂²f_l/∂x_b∂x_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisDerivatives {
    pub values: Vec<f64>,
    pub gradient: Vec<f64>,
    pub hessian: Option<Vec<f64>>,
}

impl BasisSpec {
    pub fn new(config: BasisConfig) -> Result<Self> {
        let n = config.max_degree.len();
        if n == 0 {
            return Err(Error::config("basis needs at least one underlying"));
        }
        let top = *config.max_degree.iter().max().expect("non-empty");
        let total = config.max_total_degree.unwrap_or(top);
        if let Some(domain) = &config.domain {
            if domain.len() != n {
                return Err(Error::config("basis domain must have one entry per underlying"));
            }
            if domain
                .iter()
                .any(|[c, h]| !c.is_finite() || !(h.is_finite() && *h > 0.0))
            {
                return Err(Error::config("basis domain needs finite centers and half-widths > 0"));
            }
        }
        let mut terms = Vec::new();
        for degree in 0..=total {
            let mut exps = vec![0u32; n];
            enumerate(&mut exps, 0, degree, &config, &mut terms);
        }
        Ok(Self { config, terms })
    }

    /// Monomials up to total degree 2 with cross terms.
    pub fn quadratic(n_underlyings: usize) -> Self {
        Self::new(BasisConfig {
            family: BasisFamily::Monomial,
            max_degree: vec![2; n_underlyings],
            cross_terms: true,
            max_total_degree: Some(2),
            domain: None,
        })
        .expect("valid quadratic basis")
    }

    pub fn config(&self) -> &BasisConfig {
        &self.config
    }

    pub fn family(&self) -> BasisFamily {
        self.config.family
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_underlyings(&self) -> usize {
        self.config.max_degree.len()
    }

    /// Exponent vector of every basis function.
    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    fn check(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.n_underlyings() {
            return Err(Error::config(format!(
                "state has {} underlyings, basis expects {}",
                state.len(),
                self.n_underlyings()
            )));
        }
        Ok(())
    }

    /// Univariate tables: value, first and second derivative in `x` for
    /// every degree up to the maximum of each underlying.
    fn tables(&self, state: &[f64], order: u8) -> Vec<[Vec<f64>; 3]> {
        state
            .iter()
            .enumerate()
            .map(|(b, &x)| {
                let deg = self.config.max_degree[b] as usize;
                let (u, scale) = match &self.config.domain {
                    Some(d) => ((x - d[b][0]) / d[b][1], 1.0 / d[b][1]),
                    None => (x, 1.0),
                };
                let mut v = vec![0.0; deg + 1];
                let mut d1 = vec![0.0; deg + 1];
                let mut d2 = vec![0.0; deg + 1];
                match self.config.family {
                    BasisFamily::Monomial => {
                        v[0] = 1.0;
                        for d in 1..=deg {
                            v[d] = v[d - 1] * u;
                            if order >= 1 {
                                d1[d] = d as f64 * v[d - 1];
                            }
                            if order >= 2 && d >= 2 {
                                d2[d] = (d * (d - 1)) as f64 * v[d - 2];
                            }
                        }
                    }
                    BasisFamily::Chebyshev => {
                        v[0] = 1.0;
                        if deg >= 1 {
                            v[1] = u;
                            d1[1] = 1.0;
                        }
                        for d in 1..deg {
                            v[d + 1] = 2.0 * u * v[d] - v[d - 1];
                            d1[d + 1] = 2.0 * v[d] + 2.0 * u * d1[d] - d1[d - 1];
                            d2[d + 1] = 4.0 * d1[d] + 2.0 * u * d2[d] - d2[d - 1];
                        }
                    }
                }
                for d in 0..=deg {
                    d1[d] *= scale;
                    d2[d] *= scale * scale;
                }
                [v, d1, d2]
            })
            .collect()
    }

    /// Values of every basis function at `state`.
    pub fn eval(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check(state)?;
        let mut out = vec![0.0; self.len()];
        self.eval_into(state, &mut out);
        Ok(out)
    }

    /// Unchecked [`BasisSpec::eval`] into a caller-provided buffer.
    pub(crate) fn eval_into(&self, state: &[f64], out: &mut [f64]) {
        let tables = self.tables(state, 0);
        for (slot, term) in out.iter_mut().zip(&self.terms) {
            let mut p = 1.0;
            for (b, &e) in term.iter().enumerate() {
                if e > 0 {
                    p *= tables[b][0][e as usize];
                }
            }
            *slot = p;
        }
    }

    /// Analytic derivatives of every basis function. `order` is 1 or 2.
    pub fn derivatives(&self, state: &[f64], order: u8) -> Result<BasisDerivatives> {
        self.check(state)?;
        if !(1..=2).contains(&order) {
            return Err(Error::config("derivative order must be 1 or 2"));
        }
        Ok(self.derivatives_unchecked(state, order))
    }

    pub(crate) fn derivatives_unchecked(&self, state: &[f64], order: u8) -> BasisDerivatives {
        let n = self.n_underlyings();
        let t = self.tables(state, order);
        let m = self.len();
        let mut values = vec![0.0; m];
        let mut gradient = vec![0.0; m * n];
        let mut hessian = if order >= 2 {
            Some(vec![0.0; m * n * n])
        } else {
            None
        };
        // factor table per term: pick value/d1/d2 per underlying
        let factor = |term: &[u32], b: usize, which: usize| t[b][which][term[b] as usize];
        for (l, term) in self.terms.iter().enumerate() {
            values[l] = (0..n).map(|b| factor(term, b, 0)).product();
            for b in 0..n {
                gradient[l * n + b] = (0..n)
                    .map(|c| factor(term, c, if c == b { 1 } else { 0 }))
                    .product();
            }
            if let Some(h) = hessian.as_mut() {
                for b in 0..n {
                    for c in 0..n {
                        h[(l * n + b) * n + c] = (0..n)
                            .map(|e| {
                                let which = match (e == b, e == c) {
                                    (true, true) => 2,
                                    (true, false) | (false, true) => 1,
                                    (false, false) => 0,
                                };
                                factor(term, e, which)
                            })
                            .product();
                    }
                }
            }
        }
        BasisDerivatives {
            values,
            gradient,
            hessian,
        }
    }
}

fn enumerate(
    exps: &mut Vec<u32>,
    pos: usize,
    remaining: u32,
    config: &BasisConfig,
    out: &mut Vec<Vec<u32>>,
) {
    let n = exps.len();
    if pos == n - 1 {
        if remaining <= config.max_degree[pos] {
            exps[pos] = remaining;
            let nonzero = exps.iter().filter(|&&e| e > 0).count();
            if config.cross_terms || nonzero <= 1 {
                out.push(exps.clone());
            }
            exps[pos] = 0;
        }
        return;
    }
    let top = remaining.min(config.max_degree[pos]);
    for e in (0..=top).rev() {
        exps[pos] = e;
        enumerate(exps, pos + 1, remaining - e, config, out);
    }
    exps[pos] = 0;
}

/// `Σ_l a_l f_l` for precomputed basis values.
#[inline]
pub fn dot(coefficients: &[f64], basis_values: &[f64]) -> f64 {
    coefficients
        .iter()
        .zip(basis_values)
        .fold(0.0, |acc, (a, f)| acc + a * f)
}

/// Evaluates a regression at `state`.
pub fn evaluate_regression(coefficients: &[f64], spec: &BasisSpec, state: &[f64]) -> Result<f64> {
    if coefficients.len() != spec.len() {
        return Err(Error::config(format!(
            "{} coefficients for a basis of {} functions",
            coefficients.len(),
            spec.len()
        )));
    }
    Ok(dot(coefficients, &spec.eval(state)?))
}

/// Gradient `∂f/∂x_b` of a regression from precomputed derivatives.
pub fn regression_gradient(coefficients: &[f64], d: &BasisDerivatives, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n];
    for (l, a) in coefficients.iter().enumerate() {
        for b in 0..n {
            g[b] += a * d.gradient[l * n + b];
        }
    }
    g
}

/// Hessian `∂²f/∂x_b∂x_c` (row-major `n×n`) of a regression.
pub fn regression_hessian(coefficients: &[f64], d: &BasisDerivatives, n: usize) -> Vec<f64> {
    let h = d.hessian.as_ref().expect("second-order derivatives");
    let mut out = vec![0.0; n * n];
    for (l, a) in coefficients.iter().enumerate() {
        for bc in 0..n * n {
            out[bc] += a * h[l * n * n + bc];
        }
    }
    out
}
