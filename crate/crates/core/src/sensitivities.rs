//! Chain-rule sensitivities under frozen conditioning sets.
//!
//! A regression `f(x) = Σ_l a_l f_l(x)` depends on a calibration instrument
//! `s` only through the underlyings, so `∂f/∂s = ∇f · ∂x/∂s` and
//! `∂²f/∂s∂r = (∂x/∂r)ᵀ ∇²f (∂x/∂s) + ∇f · ∂²x/∂s∂r`. Conditioning sets are
//! taken from the unbumped portfolio and held fixed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{dot, regression_gradient, regression_hessian, BasisDerivatives, BasisSpec};
use crate::conditioning::{ConditioningSet, PathTable};
use crate::error::{Error, Result};
use crate::market::{generate_shock_scenarios, ScenarioCube, ShockSet, ShockSpec, UnderlyingJacobian};
use crate::numeric::{fsum, NeumaierSum};
use crate::regression::RegressionSet;
use crate::xva::{set_average, CreditWeights, LifetimeMargin};

/// One sensitivity with its per-date pieces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    /// Correctly rounded sum of `per_date`.
    pub total: f64,
    pub per_date: Vec<f64>,
    /// For adjustments: the total split by which factor is differentiated.
    /// First order: (f, LGD, PD). Second order: (f only, mixed, LGD/PD only).
    pub terms: [f64; 3],
}

impl Sensitivity {
    fn from_rows(rows: Vec<[f64; 3]>) -> Self {
        let per_date: Vec<f64> = rows.iter().map(|t| t[0] + t[1] + t[2]).collect();
        let terms = [0, 1, 2].map(|i| fsum(rows.iter().map(|t| t[i])));
        Sensitivity {
            total: fsum(per_date.iter().copied()),
            per_date,
            terms,
        }
    }
}

/// Sensitivities of one measure to one instrument (or pair), with an
/// optional per-trade breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub measure: String,
    pub instrument: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instrument2: Option<String>,
    pub total: f64,
    pub per_date: Vec<f64>,
    pub dates: Vec<f64>,
    pub conditioning_hash: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_trade: Vec<(String, f64)>,
}

/// Value and derivatives along `s`, `r` and `s, r` of a scalar function of
/// the state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Dual2 {
    v: f64,
    s: f64,
    r: f64,
    sr: f64,
}

impl Dual2 {
    fn constant(v: f64) -> Self {
        Dual2 {
            v,
            ..Default::default()
        }
    }
}

/// Directional derivatives of `∇f`, `∇²f` along the underlying Jacobian.
#[derive(Clone, Copy)]
struct Directions<'a> {
    dx_s: &'a [f64],
    dx_r: &'a [f64],
    d2x: Option<&'a [f64]>,
}

fn directional(coefficients: &[f64], d: &BasisDerivatives, n: usize, dir: Directions) -> Dual2 {
    let grad = regression_gradient(coefficients, d, n);
    let v = dot(coefficients, &d.values);
    let s = dot(&grad, dir.dx_s);
    let r = dot(&grad, dir.dx_r);
    let sr = match dir.d2x {
        Some(d2x) => {
            let h = regression_hessian(coefficients, d, n);
            let mut curvature = 0.0;
            for b in 0..n {
                for c in 0..n {
                    curvature += dir.dx_r[b] * h[b * n + c] * dir.dx_s[c];
                }
            }
            curvature + dot(&grad, d2x)
        }
        None => 0.0,
    };
    Dual2 { v, s, r, sr }
}

/// First order: `[f_s L P, f L_s P, f L P_s]`. Second order:
/// `[f_sr L P, cross terms, f (L_sr P + L P_sr)]`.
fn product_terms(f: Dual2, l: Dual2, p: Dual2, second: bool) -> [f64; 3] {
    if !second {
        return [f.s * l.v * p.v, f.v * l.s * p.v, f.v * l.v * p.s];
    }
    let cross = f.s * l.r * p.v
        + f.r * l.s * p.v
        + f.s * l.v * p.r
        + f.r * l.v * p.s
        + f.v * l.s * p.r
        + f.v * l.r * p.s;
    [f.sr * l.v * p.v, cross, f.v * (l.sr * p.v + l.v * p.sr)]
}

fn check_inputs(
    coefficients: &[Vec<f64>],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    set: &ConditioningSet,
) -> Result<()> {
    if jac.cube_identity() != cube.identity() {
        return Err(Error::StateMismatch("jacobian belongs to another cube".into()));
    }
    if coefficients.len() != cube.n_dates() || coefficients.iter().any(|c| c.len() != basis.len()) {
        return Err(Error::config("coefficients must cover every date on the basis"));
    }
    if set.n_dates() != cube.n_dates() || set.n_total() != cube.n_original() {
        return Err(Error::config("conditioning set does not match the cube"));
    }
    Ok(())
}

/// Per-date derivative integrands for several coefficient sets at once,
/// sharing basis and credit-factor derivatives per path. Returns
/// `[coefficient set][date] -> terms`, each term already carrying
/// `weight_k / n`.
#[allow(clippy::too_many_arguments)]
fn derivative_integrands(
    coefficient_sets: &[&[Vec<f64>]],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    set: &ConditioningSet,
    weights: &[f64],
    credit: Option<&CreditWeights>,
    s: usize,
    r: Option<usize>,
) -> Result<Vec<Vec<[f64; 3]>>> {
    let second = r.is_some();
    let r_idx = r.unwrap_or(s);
    if second && !jac.has_second_order() {
        return Err(Error::config("second-order sensitivities need a second-order jacobian"));
    }
    let n_und = cube.n_underlyings();
    let n = set.n_total() as f64;
    let order = if second { 2 } else { 1 };
    let regression = credit.filter(|c| c.has_regression());
    let by_date: Vec<Vec<[f64; 3]>> = (0..cube.n_dates())
        .into_par_iter()
        .map(|k| {
            let mut sums = vec![[NeumaierSum::new(), NeumaierSum::new(), NeumaierSum::new()]; coefficient_sets.len()];
            for &j in set.indices(k) {
                let d = basis.derivatives_unchecked(cube.state(k, j), order);
                let dir = Directions {
                    dx_s: jac.dx(s, k, j),
                    dx_r: jac.dx(r_idx, k, j),
                    d2x: if second { Some(jac.d2x(s, r_idx, k, j)) } else { None },
                };
                let (l, p) = match regression {
                    Some(cw) => {
                        let (factor, _) = cw.factor(k, &d.values);
                        let reg = cw.regression.expect("regression present");
                        let l = match (&reg.lgd, factor.lgd_active) {
                            (Some(c), true) => directional(&c[k], &d, n_und, dir),
                            _ => Dual2::constant(factor.lgd),
                        };
                        let p = match (&reg.pd, factor.pd_active) {
                            (Some(c), true) => directional(&c[k], &d, n_und, dir),
                            _ => Dual2::constant(factor.pd),
                        };
                        (l, p)
                    }
                    None => (Dual2::constant(1.0), Dual2::constant(1.0)),
                };
                for (coeffs, acc) in coefficient_sets.iter().zip(sums.iter_mut()) {
                    let f = directional(&coeffs[k], &d, n_und, dir);
                    let terms = product_terms(f, l, p, second);
                    for i in 0..3 {
                        acc[i].add(terms[i]);
                    }
                }
            }
            sums.iter()
                .map(|acc| [0, 1, 2].map(|i| weights[k] * (acc[i].value() / n)))
                .collect()
        })
        .collect();
    // transpose to [coefficient set][date]
    Ok((0..coefficient_sets.len())
        .map(|c| by_date.iter().map(|row| row[c]).collect())
        .collect())
}

/// `(1/n) Σ_{j∈set_k} ∂f/∂s` per date.
pub fn value_delta(
    coefficients: &[Vec<f64>],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    instrument: &str,
    set: &ConditioningSet,
) -> Result<Sensitivity> {
    check_inputs(coefficients, basis, cube, jac, set)?;
    let s = jac.instrument_index(instrument)?;
    let ones = vec![1.0; cube.n_dates()];
    let rows = derivative_integrands(&[coefficients], basis, cube, jac, set, &ones, None, s, None)?;
    Ok(Sensitivity::from_rows(rows.into_iter().next().expect("one set")))
}

/// `(1/n) Σ_{j∈set_k} ∂²f/∂s∂r` per date.
pub fn value_gamma(
    coefficients: &[Vec<f64>],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    instruments: (&str, &str),
    set: &ConditioningSet,
) -> Result<Sensitivity> {
    check_inputs(coefficients, basis, cube, jac, set)?;
    let s = jac.instrument_index(instruments.0)?;
    let r = jac.instrument_index(instruments.1)?;
    let ones = vec![1.0; cube.n_dates()];
    let rows = derivative_integrands(&[coefficients], basis, cube, jac, set, &ones, None, s, Some(r))?;
    Ok(Sensitivity::from_rows(rows.into_iter().next().expect("one set")))
}

/// Adjustment sensitivity to one instrument (or, with `instrument2`, the
/// mixed second derivative) for several coefficient sets over one frozen
/// set. Credit curves are held constant.
#[allow(clippy::too_many_arguments)]
pub fn xva_sensitivities(
    coefficient_sets: &[&[Vec<f64>]],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    credit: &CreditWeights,
    set: &ConditioningSet,
    instrument: &str,
    instrument2: Option<&str>,
) -> Result<Vec<Sensitivity>> {
    for coeffs in coefficient_sets {
        check_inputs(coeffs, basis, cube, jac, set)?;
    }
    let s = jac.instrument_index(instrument)?;
    let r = instrument2.map(|name| jac.instrument_index(name)).transpose()?;
    let weights = credit.weights();
    let rows = derivative_integrands(coefficient_sets, basis, cube, jac, set, &weights, Some(credit), s, r)?;
    Ok(rows.into_iter().map(Sensitivity::from_rows).collect())
}

/// `∂xVA/∂s` by the product rule on `g = f · LGD · PD`.
pub fn xva_delta(
    coefficients: &[Vec<f64>],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    credit: &CreditWeights,
    set: &ConditioningSet,
    instrument: &str,
) -> Result<Sensitivity> {
    let mut out = xva_sensitivities(&[coefficients], basis, cube, jac, credit, set, instrument, None)?;
    Ok(out.remove(0))
}

/// `∂²xVA/∂s∂r` by the product rule on `g = f · LGD · PD`.
pub fn xva_gamma(
    coefficients: &[Vec<f64>],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    credit: &CreditWeights,
    set: &ConditioningSet,
    instruments: (&str, &str),
) -> Result<Sensitivity> {
    let mut out = xva_sensitivities(
        &[coefficients],
        basis,
        cube,
        jac,
        credit,
        set,
        instruments.0,
        Some(instruments.1),
    )?;
    Ok(out.remove(0))
}

/// Pathwise derivatives of the base state of a shock set.
#[derive(Clone, Copy, Debug)]
pub struct BaseDerivatives<'a> {
    pub dx_s: &'a [f64],
    pub dx_r: Option<&'a [f64]>,
    pub d2x: Option<&'a [f64]>,
}

/// Sensitivity of ES (or VaR) to an instrument with the shock set held
/// fixed. Each loss `V(base) − V(shock_i)` is differentiated through both
/// states; a shocked underlying moves with its base by the shift slope.
/// With `dx_r` and `d2x` set, returns the mixed second derivative.
pub fn es_sensitivity(
    coefficients: &[f64],
    basis: &BasisSpec,
    shocks: &ShockSet,
    set: &[usize],
    base: BaseDerivatives,
) -> Result<f64> {
    let n = basis.n_underlyings();
    if coefficients.len() != basis.len() {
        return Err(Error::config("coefficient vector does not match the basis"));
    }
    if base.dx_s.len() != n || set.iter().any(|&i| i >= shocks.len()) || set.is_empty() {
        return Err(Error::config("ES sensitivity inputs do not match the shock set"));
    }
    let second = base.d2x.is_some();
    let order = if second { 2 } else { 1 };
    let dx_r = base.dx_r.unwrap_or(base.dx_s);
    let at = |state: &[f64], dx_s: &[f64], dx_r: &[f64], d2x: Option<&[f64]>| -> Result<f64> {
        let d = basis.derivatives(state, order)?;
        let f = directional(
            coefficients,
            &d,
            n,
            Directions {
                dx_s,
                dx_r,
                d2x,
            },
        );
        Ok(if second { f.sr } else { f.s })
    };
    let base_term = at(shocks.base(), base.dx_s, dx_r, base.d2x)?;
    let per_scenario = (0..shocks.len())
        .map(|i| {
            if !set.contains(&i) {
                return Ok(0.0);
            }
            let slopes = shocks.slopes(i);
            let scale = |v: &[f64]| v.iter().zip(&slopes).map(|(a, b)| a * b).collect::<Vec<f64>>();
            let (ss, sr) = (scale(base.dx_s), scale(dx_r));
            let s2 = base.d2x.map(scale);
            Ok(base_term - at(shocks.state(i), &ss, &sr, s2.as_deref())?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(set_average(&per_scenario, set, shocks.weights()))
}

/// Derivative of every basis function along the jacobian directions:
/// `∇φ_l·dx_s`, or with `d2x` set `dx_rᵀ ∇²φ_l dx_s + ∇φ_l·d2x`.
fn basis_directional(d: &BasisDerivatives, n: usize, dir: Directions) -> Vec<f64> {
    let n_basis = d.values.len();
    match dir.d2x {
        None => (0..n_basis).map(|l| dot(&d.gradient[l * n..(l + 1) * n], dir.dx_s)).collect(),
        Some(d2x) => {
            let h = d.hessian.as_ref().expect("second-order derivatives");
            (0..n_basis)
                .map(|l| {
                    let hl = &h[l * n * n..(l + 1) * n * n];
                    let mut curvature = 0.0;
                    for b in 0..n {
                        for c in 0..n {
                            curvature += dir.dx_r[b] * hl[b * n + c] * dir.dx_s[c];
                        }
                    }
                    curvature + dot(&d.gradient[l * n..(l + 1) * n], d2x)
                })
                .collect()
        }
    }
}

fn instrument_indices(jac: &UnderlyingJacobian, s: &str, r: Option<&str>) -> Result<(usize, Option<usize>)> {
    let s = jac.instrument_index(s)?;
    let r = r.map(|name| jac.instrument_index(name)).transpose()?;
    if r.is_some() && !jac.has_second_order() {
        return Err(Error::config("second-order sensitivities need a second-order jacobian"));
    }
    Ok((s, r))
}

fn split_tables(rows: Vec<Vec<Vec<f64>>>, n_trades: usize, n_dates: usize, width: usize) -> Vec<PathTable> {
    (0..n_trades)
        .map(|i| {
            let values = rows.iter().flat_map(|r| r[i].iter().copied()).collect();
            PathTable::new(n_dates, width, values).expect("shape")
        })
        .collect()
}

/// `∂f_i/∂s` of every trade on the simulated paths, sharing basis
/// derivatives across trades.
pub fn trade_derivative_tables(
    set: &RegressionSet,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    instrument: &str,
) -> Result<Vec<PathTable>> {
    trade_directional_tables(set, cube, jac, instrument, None)
}

/// `∂²f_i/∂s∂r` of every trade on the simulated paths.
pub fn trade_second_derivative_tables(
    set: &RegressionSet,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    instruments: (&str, &str),
) -> Result<Vec<PathTable>> {
    trade_directional_tables(set, cube, jac, instruments.0, Some(instruments.1))
}

fn trade_directional_tables(
    set: &RegressionSet,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    instrument: &str,
    instrument2: Option<&str>,
) -> Result<Vec<PathTable>> {
    if jac.cube_identity() != cube.identity() || set.cube_identity() != cube.identity() {
        return Err(Error::StateMismatch("jacobian or regressions belong to another cube".into()));
    }
    let (s, r) = instrument_indices(jac, instrument, instrument2)?;
    let basis = set.basis();
    let n_und = cube.n_underlyings();
    let (n_dates, n_paths) = (set.n_dates(), cube.n_original());
    let order = if r.is_some() { 2 } else { 1 };
    let rows: Vec<Vec<Vec<f64>>> = (0..n_dates)
        .into_par_iter()
        .map(|k| {
            let mut out = vec![vec![0.0; n_paths]; set.len()];
            for j in 0..n_paths {
                let d = basis.derivatives_unchecked(cube.state(k, j), order);
                let dir = Directions {
                    dx_s: jac.dx(s, k, j),
                    dx_r: jac.dx(r.unwrap_or(s), k, j),
                    d2x: r.map(|r| jac.d2x(s, r, k, j)),
                };
                // shared by every trade
                let dphi = basis_directional(&d, n_und, dir);
                for (i, row) in out.iter_mut().enumerate() {
                    row[j] = dot(set.coefficients(i, k), &dphi);
                }
            }
            out
        })
        .collect();
    Ok(split_tables(rows, set.len(), n_dates, n_paths))
}

/// Per-trade margin losses `f(x) − f(shocked x)` for every date, path and
/// scenario, or with `instruments` their first (`(s, None)`) or mixed
/// second derivative. Row `k` of a table holds path `j`, scenario `m` at
/// column `j·M + m`.
pub fn trade_shock_tables(
    set: &RegressionSet,
    cube: &ScenarioCube,
    jac: Option<&UnderlyingJacobian>,
    spec: &ShockSpec,
    instruments: Option<(&str, Option<&str>)>,
) -> Result<Vec<PathTable>> {
    if set.cube_identity() != cube.identity() {
        return Err(Error::StateMismatch("regressions belong to another cube".into()));
    }
    let directions = match instruments {
        None => None,
        Some((s, r)) => {
            let jac = jac.ok_or_else(|| Error::config("shock derivatives need a jacobian"))?;
            if jac.cube_identity() != cube.identity() {
                return Err(Error::StateMismatch("jacobian belongs to another cube".into()));
            }
            Some((jac, instrument_indices(jac, s, r)?))
        }
    };
    let basis = set.basis();
    let n_und = cube.n_underlyings();
    let (n_dates, n_paths, m) = (set.n_dates(), cube.n_original(), spec.len());
    let rows: Vec<Vec<Vec<f64>>> = (0..n_dates)
        .into_par_iter()
        .map(|k| {
            let mut out = vec![vec![0.0; n_paths * m]; set.len()];
            for j in 0..n_paths {
                let shocks = generate_shock_scenarios(cube.state(k, j), cube.underlyings(), spec)?;
                // basis functions (or their derivatives) at the base state,
                // then at every shocked state
                let mut phis = Vec::with_capacity(m + 1);
                match directions {
                    None => {
                        phis.push(basis.eval(shocks.base())?);
                        for i in 0..m {
                            phis.push(basis.eval(shocks.state(i))?);
                        }
                    }
                    Some((jac, (s, r))) => {
                        let order = if r.is_some() { 2 } else { 1 };
                        let dx_s = jac.dx(s, k, j);
                        let dx_r = jac.dx(r.unwrap_or(s), k, j);
                        let d2x = r.map(|r| jac.d2x(s, r, k, j));
                        let d = basis.derivatives(shocks.base(), order)?;
                        phis.push(basis_directional(&d, n_und, Directions { dx_s, dx_r, d2x }));
                        for i in 0..m {
                            let slopes = shocks.slopes(i);
                            let scale = |v: &[f64]| v.iter().zip(&slopes).map(|(a, b)| a * b).collect::<Vec<f64>>();
                            let (ss, sr) = (scale(dx_s), scale(dx_r));
                            let s2 = d2x.map(scale);
                            let d = basis.derivatives(shocks.state(i), order)?;
                            let dir = Directions {
                                dx_s: &ss,
                                dx_r: &sr,
                                d2x: s2.as_deref(),
                            };
                            phis.push(basis_directional(&d, n_und, dir));
                        }
                    }
                }
                for (t, row) in out.iter_mut().enumerate() {
                    let a = set.coefficients(t, k);
                    let base = dot(a, &phis[0]);
                    for i in 0..m {
                        row[j * m + i] = base - dot(a, &phis[i + 1]);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(split_tables(rows, set.len(), n_dates, n_paths * m))
}

/// `(1/n) Σ_j ES_{j,k}` per date from a per-trade shock table, with every
/// ES set held at its lifetime selection, scaled by `weights`.
pub fn margin_rows_from_shock_table(table: &PathTable, lifetime: &LifetimeMargin, scenario_weights: &[f64], weights: &[f64]) -> Vec<f64> {
    let m = scenario_weights.len();
    let n = table.n_paths() / m;
    (0..table.n_dates())
        .map(|k| {
            let row = table.row(k);
            let mut acc = NeumaierSum::new();
            for j in 0..n {
                acc.add(set_average(&row[j * m..(j + 1) * m], lifetime.set(k, j), scenario_weights));
            }
            weights[k] * (acc.value() / n as f64)
        })
        .collect()
}

/// Derivatives of `LGD·PD` on the simulated paths.
#[derive(Clone, Debug, PartialEq)]
pub struct CreditTables {
    pub m: PathTable,
    pub m_s: PathTable,
    pub m_r: PathTable,
    pub m_sr: PathTable,
}

/// `∂(LGD·PD)/∂s` on the simulated paths, or `None` without regressions.
pub fn credit_derivative_table(
    credit: &CreditWeights,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    instrument: &str,
) -> Result<Option<PathTable>> {
    credit_directional_table(credit, cube, jac, instrument, None)
}

/// `LGD·PD` and its first and mixed second derivatives along `s`, `r`, or
/// `None` without regressions.
pub fn credit_tables(
    credit: &CreditWeights,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    instruments: (&str, &str),
) -> Result<Option<CreditTables>> {
    let Some((m, _)) = credit.multipliers(cube) else {
        return Ok(None);
    };
    let (s, r) = instruments;
    let (Some(m_s), Some(m_r), Some(m_sr)) = (
        credit_directional_table(credit, cube, jac, s, None)?,
        credit_directional_table(credit, cube, jac, r, None)?,
        credit_directional_table(credit, cube, jac, s, Some(r))?,
    ) else {
        return Ok(None);
    };
    Ok(Some(CreditTables { m, m_s, m_r, m_sr }))
}

fn credit_directional_table(
    credit: &CreditWeights,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    instrument: &str,
    instrument2: Option<&str>,
) -> Result<Option<PathTable>> {
    let Some(reg) = credit.regression.filter(|_| credit.has_regression()) else {
        return Ok(None);
    };
    let (s, r) = instrument_indices(jac, instrument, instrument2)?;
    let order = if r.is_some() { 2 } else { 1 };
    let n_und = cube.n_underlyings();
    let n_paths = cube.n_original();
    let rows: Vec<Vec<f64>> = (0..cube.n_dates())
        .into_par_iter()
        .map(|k| {
            (0..n_paths)
                .map(|j| {
                    let d = credit.basis.derivatives_unchecked(cube.state(k, j), order);
                    let dir = Directions {
                        dx_s: jac.dx(s, k, j),
                        dx_r: jac.dx(r.unwrap_or(s), k, j),
                        d2x: r.map(|r| jac.d2x(s, r, k, j)),
                    };
                    let (factor, _) = credit.factor(k, &d.values);
                    let l = match (&reg.lgd, factor.lgd_active) {
                        (Some(c), true) => directional(&c[k], &d, n_und, dir),
                        _ => Dual2::constant(factor.lgd),
                    };
                    let p = match (&reg.pd, factor.pd_active) {
                        (Some(c), true) => directional(&c[k], &d, n_und, dir),
                        _ => Dual2::constant(factor.pd),
                    };
                    match r {
                        None => l.s * p.v + l.v * p.s,
                        Some(_) => l.sr * p.v + l.s * p.r + l.r * p.s + l.v * p.sr,
                    }
                })
                .collect()
        })
        .collect();
    Ok(Some(PathTable::new(cube.n_dates(), n_paths, rows.concat())?))
}

/// Per-date second-order adjustment integrands of one trade from stored
/// tables: `w_k (1/n) Σ_{j∈set_k} (f_sr·m + f_s·m_r + f_r·m_s + f·m_sr)`.
#[allow(clippy::too_many_arguments)]
pub fn second_order_from_tables(
    values: &PathTable,
    d_s: &PathTable,
    d_r: &PathTable,
    d_sr: &PathTable,
    set: &ConditioningSet,
    weights: &[f64],
    credit: Option<&CreditTables>,
) -> Vec<f64> {
    let n = set.n_total() as f64;
    (0..values.n_dates())
        .map(|k| {
            let mut acc = NeumaierSum::new();
            for &j in set.indices(k) {
                let term = match credit {
                    Some(c) => {
                        d_sr.get(k, j) * c.m.get(k, j)
                            + d_s.get(k, j) * c.m_r.get(k, j)
                            + d_r.get(k, j) * c.m_s.get(k, j)
                            + values.get(k, j) * c.m_sr.get(k, j)
                    }
                    None => d_sr.get(k, j),
                };
                acc.add(term);
            }
            weights[k] * (acc.value() / n)
        })
        .collect()
}

/// Per-date first-order adjustment integrands of one trade from its stored
/// values `f` and derivatives `f_s`:
/// `w_k (1/n) Σ_{j∈set_k} (f_s·m + f·m_s)` with `m = LGD·PD`.
pub fn first_order_from_tables(
    values: &PathTable,
    derivatives: &PathTable,
    set: &ConditioningSet,
    weights: &[f64],
    multipliers: Option<&PathTable>,
    credit_derivatives: Option<&PathTable>,
) -> Vec<f64> {
    let n = set.n_total() as f64;
    (0..values.n_dates())
        .map(|k| {
            let (v, dv) = (values.row(k), derivatives.row(k));
            let mut acc = NeumaierSum::new();
            for &j in set.indices(k) {
                let term = match (multipliers, credit_derivatives) {
                    (Some(m), Some(dm)) => dv[j] * m.row(k)[j] + v[j] * dm.row(k)[j],
                    (Some(m), None) => dv[j] * m.row(k)[j],
                    _ => dv[j],
                };
                acc.add(term);
            }
            weights[k] * (acc.value() / n)
        })
        .collect()
}

/// MVA sensitivity for several coefficient sets with every lifetime ES set
/// held fixed: `Σ_k w_k (1/n) Σ_j ∂ES_{j,k}/∂s`.
#[allow(clippy::too_many_arguments)]
pub fn mva_sensitivities(
    coefficient_sets: &[&[Vec<f64>]],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    jac: &UnderlyingJacobian,
    lifetime: &LifetimeMargin,
    spec: &ShockSpec,
    mva_weights: &[f64],
    instrument: &str,
    instrument2: Option<&str>,
) -> Result<Vec<Sensitivity>> {
    if jac.cube_identity() != cube.identity() {
        return Err(Error::StateMismatch("jacobian belongs to another cube".into()));
    }
    let s = jac.instrument_index(instrument)?;
    let r = instrument2.map(|name| jac.instrument_index(name)).transpose()?;
    if r.is_some() && !jac.has_second_order() {
        return Err(Error::config("second-order sensitivities need a second-order jacobian"));
    }
    let n = cube.n_original();
    let by_date: Vec<Vec<f64>> = (0..cube.n_dates())
        .into_par_iter()
        .map(|k| {
            let mut sums = vec![NeumaierSum::new(); coefficient_sets.len()];
            for j in 0..n {
                let shocks = generate_shock_scenarios(cube.state(k, j), cube.underlyings(), spec)?;
                let base = BaseDerivatives {
                    dx_s: jac.dx(s, k, j),
                    dx_r: r.map(|r| jac.dx(r, k, j)),
                    d2x: r.map(|r| jac.d2x(s, r, k, j)),
                };
                for (coeffs, acc) in coefficient_sets.iter().zip(sums.iter_mut()) {
                    acc.add(es_sensitivity(&coeffs[k], basis, &shocks, lifetime.set(k, j), base)?);
                }
            }
            Ok(sums.iter().map(|acc| mva_weights[k] * (acc.value() / n as f64)).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..coefficient_sets.len())
        .map(|c| Sensitivity::from_rows(by_date.iter().map(|row| [row[c], 0.0, 0.0]).collect()))
        .collect())
}
