//! Credit and funding adjustments, initial margin and MVA.
//!
//! An adjustment is the left-rectangle sum over stopping dates
//!
//! `xVA = −LGD Σ_k Δt_k λ(t_k) D_q(0, t_k) (1/n) Σ_{j ∈ set_k} V_{j,k}`
//!
//! with `Δt_k = t_k − t_{k−1}` (and `t_{−1} = 0`), `set_k` chosen by the sign
//! of the portfolio value, and `n` the number of simulated paths. Augmented
//! paths take part in fitting only.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{dot, BasisSpec};
use crate::conditioning::{
    loss_ranking, sign_condition, weighted_tail_size, ConditioningSet, PathTable, Selector, Sign,
};
use crate::credit::{CreditCurve, Party, SpreadCurve};
use crate::error::{Error, Result};
use crate::market::{generate_shock_scenarios, ScenarioCube, ShockSet, ShockSpec};
use crate::numeric::{fsum, NeumaierSum};

/// The adjustments, each a (party, exposure sign) selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XvaKind {
    Cva,
    Dva,
    Fca,
    Fva,
}

impl XvaKind {
    pub const ALL: [XvaKind; 4] = [XvaKind::Cva, XvaKind::Dva, XvaKind::Fca, XvaKind::Fva];

    pub fn party(self) -> Party {
        match self {
            XvaKind::Cva => Party::C,
            XvaKind::Dva | XvaKind::Fca | XvaKind::Fva => Party::B,
        }
    }

    pub fn sign(self) -> Sign {
        match self {
            XvaKind::Cva | XvaKind::Fca => Sign::Positive,
            XvaKind::Dva => Sign::Negative,
            XvaKind::Fva => Sign::All,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            XvaKind::Cva => "cva",
            XvaKind::Dva => "dva",
            XvaKind::Fca => "fca",
            XvaKind::Fva => "fva",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "cva" => Ok(XvaKind::Cva),
            "dva" => Ok(XvaKind::Dva),
            "fca" => Ok(XvaKind::Fca),
            "fva" => Ok(XvaKind::Fva),
            _ => Err(Error::lookup("measure", name)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginMeasure {
    #[default]
    Es,
    Var,
}

/// Year fractions `t_k − t_{k−1}` with `t_{−1} = 0`.
pub fn date_steps(dates: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    dates
        .iter()
        .map(|&t| {
            let dt = t - prev;
            prev = t;
            dt
        })
        .collect()
}

/// State-dependent loss given default and default probability of one party,
/// as regressions on the shared basis (one coefficient vector per date).
/// A missing regression falls back to the constant LGD, or to `λ(t_k) Δt_k`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LgdPdRegression {
    #[serde(default)]
    pub lgd: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub pd: Option<Vec<Vec<f64>>>,
}

/// LGD/PD regressions per party.
pub type CreditRegressions = BTreeMap<Party, LgdPdRegression>;

/// How often evaluated LGD or PD left `[0, 1]` and was clamped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampCounts {
    pub lgd_low: usize,
    pub lgd_high: usize,
    pub pd_low: usize,
    pub pd_high: usize,
}

impl ClampCounts {
    pub fn total(&self) -> usize {
        self.lgd_low + self.lgd_high + self.pd_low + self.pd_high
    }

    fn merge(self, o: ClampCounts) -> ClampCounts {
        ClampCounts {
            lgd_low: self.lgd_low + o.lgd_low,
            lgd_high: self.lgd_high + o.lgd_high,
            pd_low: self.pd_low + o.pd_low,
            pd_high: self.pd_high + o.pd_high,
        }
    }
}

/// Clamps to `[0, 1]`; returns the value and whether it was inside.
fn clamp_unit(v: f64) -> (f64, bool, bool) {
    if v < 0.0 {
        (0.0, false, true)
    } else if v > 1.0 {
        (1.0, false, false)
    } else {
        (v, true, false)
    }
}

/// The credit factors entering an adjustment at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CreditFactor {
    pub lgd: f64,
    pub pd: f64,
    /// LGD regression inside `[0, 1]` (its derivatives apply).
    pub lgd_active: bool,
    pub pd_active: bool,
}

/// Credit side of one adjustment: per-date weights, and per-path LGD·PD
/// multipliers when regressions are supplied.
#[derive(Clone, Debug)]
pub struct CreditWeights<'a> {
    pub credit: &'a CreditCurve,
    pub party: Party,
    pub regression: Option<&'a LgdPdRegression>,
    pub basis: &'a BasisSpec,
    pub dates: &'a [f64],
}

impl<'a> CreditWeights<'a> {
    pub fn new(
        credit: &'a CreditCurve,
        party: Party,
        regression: Option<&'a LgdPdRegression>,
        basis: &'a BasisSpec,
        dates: &'a [f64],
    ) -> Result<Self> {
        if let Some(reg) = regression {
            for coeffs in [&reg.lgd, &reg.pd].into_iter().flatten() {
                if coeffs.len() != dates.len() || coeffs.iter().any(|c| c.len() != basis.len()) {
                    return Err(Error::config(
                        "LGD/PD regressions need one coefficient vector per date on the shared basis",
                    ));
                }
            }
        }
        let regression = regression.filter(|r| r.lgd.is_some() || r.pd.is_some());
        Ok(Self {
            credit,
            party,
            regression,
            basis,
            dates,
        })
    }

    pub fn has_regression(&self) -> bool {
        self.regression.is_some()
    }

    /// `w_k`: the whole credit factor for constant LGD and PD, or just
    /// `−D_q(0, t_k)` when the per-path multiplier carries LGD·PD.
    pub fn weights(&self) -> Vec<f64> {
        let steps = date_steps(self.dates);
        self.dates
            .iter()
            .zip(steps)
            .map(|(&t, dt)| {
                let d = self.credit.discount_q(0.0, t);
                if self.regression.is_some() {
                    -d
                } else {
                    -self.credit.lgd(self.party) * dt * self.credit.lambda(self.party, t) * d
                }
            })
            .collect()
    }

    /// LGD and PD at path state `state` on date `k`; `basis_values` are the
    /// basis functions at `state`.
    pub fn factor(&self, k: usize, basis_values: &[f64]) -> (CreditFactor, ClampCounts) {
        let mut clamps = ClampCounts::default();
        let t = self.dates[k];
        let dt = t - if k == 0 { 0.0 } else { self.dates[k - 1] };
        let reg = self.regression.expect("factor requires a regression");
        let (lgd, lgd_active) = match &reg.lgd {
            Some(c) => {
                let (v, inside, low) = clamp_unit(dot(&c[k], basis_values));
                if !inside {
                    if low {
                        clamps.lgd_low += 1
                    } else {
                        clamps.lgd_high += 1
                    }
                }
                (v, inside)
            }
            None => (self.credit.lgd(self.party), false),
        };
        let (pd, pd_active) = match &reg.pd {
            Some(c) => {
                let (v, inside, low) = clamp_unit(dot(&c[k], basis_values));
                if !inside {
                    if low {
                        clamps.pd_low += 1
                    } else {
                        clamps.pd_high += 1
                    }
                }
                (v, inside)
            }
            None => (self.credit.lambda(self.party, t) * dt, false),
        };
        (
            CreditFactor {
                lgd,
                pd,
                lgd_active,
                pd_active,
            },
            clamps,
        )
    }

    /// LGD·PD per (date, simulated path), or `None` without regressions.
    pub fn multipliers(&self, cube: &ScenarioCube) -> Option<(PathTable, ClampCounts)> {
        self.regression?;
        let n = cube.n_original();
        let rows: Vec<(Vec<f64>, ClampCounts)> = (0..cube.n_dates())
            .into_par_iter()
            .map(|k| {
                let mut buf = vec![0.0; self.basis.len()];
                let mut clamps = ClampCounts::default();
                let row = (0..n)
                    .map(|j| {
                        self.basis.eval_into(cube.state(k, j), &mut buf);
                        let (f, c) = self.factor(k, &buf);
                        clamps = clamps.merge(c);
                        f.lgd * f.pd
                    })
                    .collect();
                (row, clamps)
            })
            .collect();
        let mut clamps = ClampCounts::default();
        let mut values = Vec::with_capacity(n * cube.n_dates());
        for (row, c) in rows {
            values.extend(row);
            clamps = clamps.merge(c);
        }
        Some((
            PathTable::new(cube.n_dates(), n, values).expect("shape"),
            clamps,
        ))
    }
}

/// An adjustment and the pieces it was summed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XvaResult {
    pub kind: XvaKind,
    /// Correctly rounded sum of `integrands`.
    pub total: f64,
    /// Per-date terms `w_k (1/n) Σ_{j∈set_k} V_{j,k} m_{j,k}`.
    pub integrands: Vec<f64>,
    pub weights: Vec<f64>,
    pub set_sizes: Vec<usize>,
    pub n_paths: usize,
    pub clamps: ClampCounts,
    /// Hash of the portfolio values the sets were selected from.
    pub conditioning_hash: String,
    /// For FVA: the same sum without any conditioning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_total: Option<f64>,
}

/// Per-date conditioned sums `w_k (1/n) Σ_{j∈set_k} values_{j,k} m_{j,k}`.
pub fn conditioned_integrands(
    values: &PathTable,
    set: &ConditioningSet,
    weights: &[f64],
    multipliers: Option<&PathTable>,
) -> Vec<f64> {
    let n = set.n_total() as f64;
    (0..values.n_dates())
        .map(|k| {
            let row = values.row(k);
            let sum: NeumaierSum = match multipliers {
                Some(m) => {
                    let mrow = m.row(k);
                    set.indices(k).iter().map(|&j| row[j] * mrow[j]).collect()
                }
                None => set.indices(k).iter().map(|&j| row[j]).collect(),
            };
            weights[k] * (sum.value() / n)
        })
        .collect()
}

/// Values of a regression (one coefficient vector per date) on the simulated
/// paths of the cube.
pub fn path_values(coefficients: &[Vec<f64>], basis: &BasisSpec, cube: &ScenarioCube) -> Result<PathTable> {
    if coefficients.len() != cube.n_dates() {
        return Err(Error::config(format!(
            "coefficients cover {} dates, the cube has {}",
            coefficients.len(),
            cube.n_dates()
        )));
    }
    if coefficients.iter().any(|c| c.len() != basis.len()) {
        return Err(Error::config("coefficient vectors do not match the basis"));
    }
    if basis.n_underlyings() != cube.n_underlyings() {
        return Err(Error::config("basis and cube disagree on the number of underlyings"));
    }
    let n = cube.n_original();
    let rows: Vec<Vec<f64>> = (0..cube.n_dates())
        .into_par_iter()
        .map(|k| {
            let mut buf = vec![0.0; basis.len()];
            (0..n)
                .map(|j| {
                    basis.eval_into(cube.state(k, j), &mut buf);
                    dot(&coefficients[k], &buf)
                })
                .collect()
        })
        .collect();
    PathTable::new(cube.n_dates(), n, rows.concat())
}

/// Adjustment from precomputed portfolio values and a fixed set.
pub fn xva_on_set(
    kind: XvaKind,
    values: &PathTable,
    set: &ConditioningSet,
    weights: &CreditWeights,
    multipliers: Option<&(PathTable, ClampCounts)>,
) -> XvaResult {
    let w = weights.weights();
    let integrands = conditioned_integrands(values, set, &w, multipliers.map(|m| &m.0));
    XvaResult {
        kind,
        total: fsum(integrands.iter().copied()),
        integrands,
        weights: w,
        set_sizes: (0..set.n_dates()).map(|k| set.indices(k).len()).collect(),
        n_paths: set.n_total(),
        clamps: multipliers.map(|m| m.1).unwrap_or_default(),
        conditioning_hash: set.source_hash().to_string(),
        direct_total: None,
    }
}

/// The sign sets of one portfolio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignSets {
    pub positive: ConditioningSet,
    pub negative: ConditioningSet,
    pub all: ConditioningSet,
}

impl SignSets {
    pub fn new(values: &PathTable, dates: &[f64]) -> Result<Self> {
        Ok(SignSets {
            positive: sign_condition(values, dates, Sign::Positive)?,
            negative: sign_condition(values, dates, Sign::Negative)?,
            all: sign_condition(values, dates, Sign::All)?,
        })
    }

    pub fn get(&self, sign: Sign) -> &ConditioningSet {
        match sign {
            Sign::Positive => &self.positive,
            Sign::Negative => &self.negative,
            Sign::All => &self.all,
        }
    }
}

/// CVA, DVA and FCA on their sign sets; FVA as DVA + FCA per date, with
/// the unconditioned sum kept alongside.
pub fn xva_on_sign_sets(
    kind: XvaKind,
    values: &PathTable,
    sets: &SignSets,
    weights: &CreditWeights,
    multipliers: Option<&(PathTable, ClampCounts)>,
) -> XvaResult {
    match kind {
        XvaKind::Fva => {
            let dva = xva_on_set(XvaKind::Dva, values, &sets.negative, weights, multipliers);
            let fca = xva_on_set(XvaKind::Fca, values, &sets.positive, weights, multipliers);
            let direct = xva_on_set(XvaKind::Fva, values, &sets.all, weights, multipliers);
            let integrands: Vec<f64> = dva
                .integrands
                .iter()
                .zip(&fca.integrands)
                .map(|(a, b)| a + b)
                .collect();
            // one rounding of the exact sum keeps the total within about
            // an ulp of dva + fca however many dates there are
            let total = fsum(dva.integrands.iter().chain(&fca.integrands).copied());
            XvaResult {
                kind,
                total,
                integrands,
                weights: dva.weights,
                set_sizes: direct.set_sizes,
                n_paths: direct.n_paths,
                clamps: direct.clamps,
                conditioning_hash: direct.conditioning_hash,
                direct_total: Some(direct.total),
            }
        }
        _ => xva_on_set(kind, values, sets.get(kind.sign()), weights, multipliers),
    }
}

/// The full conditioned computation from portfolio values.
pub fn xva_from_values(
    kind: XvaKind,
    values: &PathTable,
    dates: &[f64],
    credit: &CreditCurve,
    basis: &BasisSpec,
    regressions: Option<&CreditRegressions>,
    cube: &ScenarioCube,
) -> Result<XvaResult> {
    let party = kind.party();
    let weights = CreditWeights::new(credit, party, regressions.and_then(|r| r.get(&party)), basis, dates)?;
    let multipliers = weights.multipliers(cube);
    let sets = SignSets::new(values, dates)?;
    Ok(xva_on_sign_sets(kind, values, &sets, &weights, multipliers.as_ref()))
}

/// Adjustment of a portfolio given its coefficients per date.
pub fn compute_xva(
    coefficients: &[Vec<f64>],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    credit: &CreditCurve,
    kind: XvaKind,
    regressions: Option<&CreditRegressions>,
) -> Result<XvaResult> {
    let values = path_values(coefficients, basis, cube)?;
    xva_from_values(kind, &values, cube.dates(), credit, basis, regressions, cube)
}

/// `g = f · LGD · PD` at one state, with LGD and PD clamped to `[0, 1]`.
pub fn eval_g(
    coefficients: &[f64],
    basis: &BasisSpec,
    weights: &CreditWeights,
    k: usize,
    state: &[f64],
) -> Result<f64> {
    let values = basis.eval(state)?;
    let f = dot(coefficients, &values);
    if !weights.has_regression() {
        let t = weights.dates[k];
        let dt = t - if k == 0 { 0.0 } else { weights.dates[k - 1] };
        return Ok(f * weights.credit.lgd(weights.party) * weights.credit.lambda(weights.party, t) * dt);
    }
    let (c, _) = weights.factor(k, &values);
    Ok(f * c.lgd * c.pd)
}

/// Margin at one base state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginResult {
    pub margin: f64,
    /// `V(base) − V(shock_i)` per scenario.
    pub losses: Vec<f64>,
    pub set: Vec<usize>,
}

/// Scenarios entering the margin: the ES tail or the VaR boundary.
pub fn margin_set(losses: &[f64], weights: &[f64], alpha: f64, measure: MarginMeasure) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if losses.is_empty() {
        return Err(Error::config("no shock scenarios"));
    }
    let ranking = loss_ranking(losses);
    let size = weighted_tail_size(alpha, &ranking, weights);
    let mut set = match measure {
        MarginMeasure::Es => ranking[..size].to_vec(),
        MarginMeasure::Var => vec![ranking[size - 1]],
    };
    set.sort_unstable();
    Ok(set)
}

/// Average of `values` over `set`: plain mean for uniform weights, weighted
/// mean otherwise.
pub fn set_average(values: &[f64], set: &[usize], weights: &[f64]) -> f64 {
    let uniform = weights.iter().all(|&w| w == weights[0]);
    if uniform {
        let s: NeumaierSum = set.iter().map(|&i| values[i]).collect();
        s.value() / set.len() as f64
    } else {
        let s: NeumaierSum = set.iter().map(|&i| weights[i] * values[i]).collect();
        let w: NeumaierSum = set.iter().map(|&i| weights[i]).collect();
        s.value() / w.value()
    }
}

/// ES or VaR of the portfolio regression `coefficients` under `shocks`.
pub fn compute_initial_margin(
    coefficients: &[f64],
    basis: &BasisSpec,
    shocks: &ShockSet,
    alpha: f64,
    measure: MarginMeasure,
) -> Result<MarginResult> {
    if shocks.is_empty() {
        return Err(Error::config("no shock scenarios"));
    }
    let base = evaluate(coefficients, basis, shocks.base())?;
    let losses = (0..shocks.len())
        .map(|i| Ok(base - evaluate(coefficients, basis, shocks.state(i))?))
        .collect::<Result<Vec<f64>>>()?;
    let set = margin_set(&losses, shocks.weights(), alpha, measure)?;
    Ok(MarginResult {
        margin: set_average(&losses, &set, shocks.weights()),
        losses,
        set,
    })
}

fn evaluate(coefficients: &[f64], basis: &BasisSpec, state: &[f64]) -> Result<f64> {
    crate::basis::evaluate_regression(coefficients, basis, state)
}

/// Margins along every simulated path and date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifetimeMargin {
    /// `(1/n) Σ_j ES_{j,k}` per date.
    pub margins: Vec<f64>,
    /// Scenario-level margin per (date, path).
    pub scenario_margins: PathTable,
    /// Selected shocks per (date, path), flattened date-major.
    pub sets: Vec<Vec<usize>>,
    pub alpha: f64,
    pub measure: MarginMeasure,
}

impl LifetimeMargin {
    pub fn set(&self, k: usize, j: usize) -> &[usize] {
        &self.sets[k * self.scenario_margins.n_paths() + j]
    }
}

/// Margin at every (date, simulated path) state under the shocks of `spec`,
/// and its path average per date.
pub fn lifetime_margins(
    coefficients: &[Vec<f64>],
    basis: &BasisSpec,
    cube: &ScenarioCube,
    spec: &ShockSpec,
    alpha: f64,
    measure: MarginMeasure,
) -> Result<LifetimeMargin> {
    if coefficients.len() != cube.n_dates() {
        return Err(Error::config("coefficients must cover every date"));
    }
    let n = cube.n_original();
    let results: Vec<(f64, Vec<usize>)> = (0..cube.n_dates() * n)
        .into_par_iter()
        .map(|idx| {
            let (k, j) = (idx / n, idx % n);
            let shocks = generate_shock_scenarios(cube.state(k, j), cube.underlyings(), spec)?;
            let m = compute_initial_margin(&coefficients[k], basis, &shocks, alpha, measure)?;
            Ok((m.margin, m.set))
        })
        .collect::<Result<_>>()?;
    let (values, sets): (Vec<f64>, Vec<Vec<usize>>) = results.into_iter().unzip();
    let scenario_margins = PathTable::new(cube.n_dates(), n, values)?;
    let margins = (0..cube.n_dates())
        .map(|k| {
            let s: NeumaierSum = scenario_margins.row(k).iter().copied().collect();
            s.value() / n as f64
        })
        .collect();
    Ok(LifetimeMargin {
        margins,
        scenario_margins,
        sets,
        alpha,
        measure,
    })
}

/// How MVA discounts future margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvaDiscounting {
    /// `D_q`: riskless discounting times survival of both parties.
    #[default]
    Survival,
    /// Riskless discounting only.
    Riskless,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvaResult {
    pub total: f64,
    pub integrands: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Per-date MVA weights `Δt_k · spread(t_k) · D(0, t_k)`.
pub fn mva_weights(
    dates: &[f64],
    spread: &SpreadCurve,
    credit: &CreditCurve,
    discounting: MvaDiscounting,
) -> Vec<f64> {
    dates
        .iter()
        .zip(date_steps(dates))
        .map(|(&t, dt)| {
            let d = match discounting {
                MvaDiscounting::Survival => credit.discount_q(0.0, t),
                MvaDiscounting::Riskless => credit.discount_r(0.0, t),
            };
            dt * spread.at(t) * d
        })
        .collect()
}

/// `MVA = Σ_k Δt_k spread(t_k) D(0, t_k) margin_k`.
pub fn compute_mva(
    margins: &[f64],
    dates: &[f64],
    spread: &SpreadCurve,
    credit: &CreditCurve,
    discounting: MvaDiscounting,
) -> Result<MvaResult> {
    if margins.len() != dates.len() {
        return Err(Error::config("one margin per stopping date is required"));
    }
    spread.validate()?;
    let weights = mva_weights(dates, spread, credit, discounting);
    let integrands: Vec<f64> = weights.iter().zip(margins).map(|(w, m)| w * m).collect();
    Ok(MvaResult {
        total: fsum(integrands.iter().copied()),
        integrands,
        weights,
    })
}

/// Selector recorded for margin sets.
pub fn margin_selector(alpha: f64, measure: MarginMeasure) -> Selector {
    match measure {
        MarginMeasure::Es => Selector::Es { alpha },
        MarginMeasure::Var => Selector::Var { alpha },
    }
}
