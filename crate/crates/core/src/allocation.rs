//! Trade-level allocation over portfolio-level conditioning sets.
//!
//! Every allocation substitutes one trade's coefficients (or its stored
//! path values) into the portfolio formula while keeping the portfolio's
//! scenario selection. The contributions are linear in the trade, so they
//! add up to the portfolio figure up to rounding; the rounding residual is
//! stored with each report.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::dot;
use crate::conditioning::{ConditioningSet, PathTable};
use crate::error::{Error, Result};
use crate::market::{ScenarioCube, ShockSet};
use crate::numeric::{fsum, ulp};
use crate::regression::RegressionSet;
use crate::xva::{compute_initial_margin, conditioned_integrands, set_average, MarginMeasure};

/// Allocation tolerance in ulps of the summand scale.
pub const ALLOCATION_ULPS: f64 = 8.0;

/// Regression evaluations performed by an operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    /// Trade regressions evaluated at simulated path states.
    pub trade_path_evaluations: u64,
    /// Trade regressions evaluated at shocked states.
    pub trade_shock_evaluations: u64,
    /// Portfolio regressions evaluated, at path or shocked states.
    pub portfolio_evaluations: u64,
}

impl Work {
    pub fn add(&mut self, other: Work) {
        self.trade_path_evaluations += other.trade_path_evaluations;
        self.trade_shock_evaluations += other.trade_shock_evaluations;
        self.portfolio_evaluations += other.portfolio_evaluations;
    }

    pub fn trade_evaluations(&self) -> u64 {
        self.trade_path_evaluations + self.trade_shock_evaluations
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationEntry {
    pub name: String,
    pub value: f64,
}

/// Allocated values of one measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub measure: String,
    /// Hash of the portfolio values the conditioning was built from.
    pub conditioning_hash: String,
    /// Portfolio figure, computed from portfolio coefficients.
    pub total: f64,
    /// Per trade, or per group after [`regroup`].
    pub entries: Vec<AllocationEntry>,
    /// Trade-level values the entries were formed from.
    pub trades: Vec<AllocationEntry>,
    /// `total` minus the correctly rounded sum of trade-level values.
    pub residual: f64,
}

impl AllocationReport {
    /// Builds a trade-level report.
    pub fn new(measure: impl Into<String>, conditioning_hash: impl Into<String>, total: f64, trades: Vec<AllocationEntry>) -> Self {
        let allocated = fsum(trades.iter().map(|e| e.value));
        AllocationReport {
            measure: measure.into(),
            conditioning_hash: conditioning_hash.into(),
            total,
            entries: trades.clone(),
            trades,
            residual: total - allocated,
        }
    }

    /// Correctly rounded sum of the trade-level values; independent of any
    /// grouping.
    pub fn allocated_total(&self) -> f64 {
        fsum(self.trades.iter().map(|e| e.value))
    }

    /// Sum of absolute trade-level values, the scale of the rounding error.
    pub fn scale(&self) -> f64 {
        fsum(self.trades.iter().map(|e| e.value.abs())).max(self.total.abs())
    }

    /// Whether the residual is within 8 ulps of the summand scale plus
    /// `1e-15` absolute.
    pub fn is_exact(&self) -> bool {
        self.residual.abs() <= ALLOCATION_ULPS * ulp(self.scale()) + 1e-15
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }
}

/// Sums trade-level values into groups. Groups are listed by name; each
/// value is the correctly rounded sum of its members.
pub fn regroup(report: &AllocationReport, grouping: &BTreeMap<String, String>) -> Result<AllocationReport> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for e in &report.trades {
        let g = grouping
            .get(&e.name)
            .ok_or_else(|| Error::config(format!("trade {} has no group", e.name)))?;
        groups.entry(g).or_default().push(e.value);
    }
    Ok(AllocationReport {
        measure: report.measure.clone(),
        conditioning_hash: report.conditioning_hash.clone(),
        total: report.total,
        entries: groups
            .into_iter()
            .map(|(name, values)| AllocationEntry {
                name: name.to_string(),
                value: fsum(values),
            })
            .collect(),
        trades: report.trades.clone(),
        residual: report.residual,
    })
}

/// Values of every trade of `set` on the simulated paths of the cube.
/// Basis functions are evaluated once per state and shared across trades.
pub fn trade_path_values(set: &RegressionSet, cube: &ScenarioCube) -> Result<(Vec<PathTable>, Work)> {
    if set.cube_identity() != cube.identity() {
        return Err(Error::StateMismatch("regressions belong to another cube".into()));
    }
    let (n_dates, n_paths) = (set.n_dates(), cube.n_original());
    let basis = set.basis();
    let rows: Vec<Vec<Vec<f64>>> = (0..n_dates)
        .into_par_iter()
        .map(|k| {
            let mut out = vec![vec![0.0; n_paths]; set.len()];
            let mut phi = vec![0.0; basis.len()];
            for j in 0..n_paths {
                basis.eval_into(cube.state(k, j), &mut phi);
                for (i, row) in out.iter_mut().enumerate() {
                    row[j] = dot(set.coefficients(i, k), &phi);
                }
            }
            out
        })
        .collect();
    let tables = (0..set.len())
        .map(|i| {
            let values = rows.iter().flat_map(|per_trade| per_trade[i].iter().copied()).collect();
            PathTable::new(n_dates, n_paths, values).expect("shape")
        })
        .collect();
    let work = Work {
        trade_path_evaluations: (set.len() * n_dates * n_paths) as u64,
        ..Work::default()
    };
    Ok((tables, work))
}

/// Per-trade adjustment contributions from stored path values.
///
/// `tables[i]` holds trade `i`'s values on the simulated paths; `weights`
/// and `multipliers` are the credit factors of the adjustment. Returns the
/// per-date integrands of every trade.
pub fn contributions_from_tables(
    tables: &[&PathTable],
    set: &ConditioningSet,
    weights: &[f64],
    multipliers: Option<&PathTable>,
) -> Vec<Vec<f64>> {
    tables
        .par_iter()
        .map(|t| conditioned_integrands(t, set, weights, multipliers))
        .collect()
}

/// Allocation of an adjustment: trade `i` receives the conditioned sum of
/// its own values over the portfolio set.
///
/// `portfolio_hash` must match the set's source hash, i.e. the set must
/// have been built from the values of this very portfolio.
#[allow(clippy::too_many_arguments)]
pub fn allocate_value(
    measure: &str,
    trade_ids: &[String],
    tables: &[&PathTable],
    portfolio_hash: &str,
    set: &ConditioningSet,
    weights: &[f64],
    multipliers: Option<&PathTable>,
    total: f64,
) -> Result<AllocationReport> {
    if set.source_hash() != portfolio_hash {
        return Err(Error::Audit(format!(
            "{measure}: conditioning set was built from another portfolio"
        )));
    }
    let per_trade = contributions_from_tables(tables, set, weights, multipliers);
    let entries = trade_ids
        .iter()
        .zip(per_trade)
        .map(|(id, rows)| AllocationEntry {
            name: id.clone(),
            value: fsum(rows),
        })
        .collect();
    Ok(AllocationReport::new(measure, portfolio_hash, total, entries))
}

/// Allocation of a sensitivity from per-trade per-date contributions.
pub fn allocate_sensitivity(
    measure: &str,
    trade_ids: &[String],
    per_trade_per_date: &[Vec<f64>],
    conditioning_hash: &str,
    total: f64,
) -> AllocationReport {
    let entries = trade_ids
        .iter()
        .zip(per_trade_per_date)
        .map(|(id, rows)| AllocationEntry {
            name: id.clone(),
            value: fsum(rows.iter().copied()),
        })
        .collect();
    AllocationReport::new(measure, conditioning_hash, total, entries)
}

/// Portfolio margin at one base state and its allocation to trades.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsAllocation {
    pub report: AllocationReport,
    pub set: Vec<usize>,
    pub work: Work,
}

/// Allocates ES (or VaR) at base state `shocks.base()` on date `k`.
///
/// The portfolio regression is evaluated under every shock to fix the set;
/// trades are then evaluated only at the selected shocks. `base_values`
/// holds each trade's value at the base state, already known from the
/// path values.
pub fn allocate_es(
    set: &RegressionSet,
    k: usize,
    shocks: &ShockSet,
    base_values: &[f64],
    alpha: f64,
    measure: MarginMeasure,
) -> Result<EsAllocation> {
    if base_values.len() != set.len() {
        return Err(Error::config("one base value per trade is required"));
    }
    let basis = set.basis();
    let portfolio = set.total_coefficients();
    let margin = compute_initial_margin(&portfolio[k], basis, shocks, alpha, measure)?;
    let mut work = Work {
        portfolio_evaluations: shocks.len() as u64 + 1,
        ..Work::default()
    };
    let selected: Vec<Vec<f64>> = margin
        .set
        .iter()
        .map(|&m| basis.eval(shocks.state(m)))
        .collect::<Result<_>>()?;
    let entries = set
        .trade_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut losses = vec![0.0; shocks.len()];
            for (&m, phi) in margin.set.iter().zip(&selected) {
                losses[m] = base_values[i] - dot(set.coefficients(i, k), phi);
            }
            AllocationEntry {
                name: id.clone(),
                value: set_average(&losses, &margin.set, shocks.weights()),
            }
        })
        .collect();
    work.trade_shock_evaluations = (margin.set.len() * set.len()) as u64;
    let hash = crate::numeric::hash_f64_rows("es-losses", [margin.losses.as_slice()]);
    Ok(EsAllocation {
        report: AllocationReport::new(
            match measure {
                MarginMeasure::Es => "es",
                MarginMeasure::Var => "var",
            },
            hash,
            margin.margin,
            entries,
        ),
        set: margin.set,
        work,
    })
}
