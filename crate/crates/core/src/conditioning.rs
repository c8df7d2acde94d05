//! Scenario selection made once at portfolio level.
//!
//! A set is chosen from portfolio values and then reused, unchanged, for
//! every trade. Since a conditional mean over a fixed set is linear in the
//! values, trade-level figures over the set add up to the portfolio figure.
//!
//! Path indices are 0-based everywhere, including the JSON export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{hash_f64_rows, NeumaierSum};

/// Values per (date, path), date-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTable {
    n_dates: usize,
    n_paths: usize,
    values: Vec<f64>,
}

impl PathTable {
    pub fn new(n_dates: usize, n_paths: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_dates * n_paths {
            return Err(Error::config("path table size does not match its shape"));
        }
        Ok(Self {
            n_dates,
            n_paths,
            values,
        })
    }

    pub fn zeros(n_dates: usize, n_paths: usize) -> Self {
        Self {
            n_dates,
            n_paths,
            values: vec![0.0; n_dates * n_paths],
        }
    }

    pub fn from_fn(n_dates: usize, n_paths: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_dates * n_paths);
        for k in 0..n_dates {
            for j in 0..n_paths {
                values.push(f(k, j));
            }
        }
        Self {
            n_dates,
            n_paths,
            values,
        }
    }

    pub fn n_dates(&self) -> usize {
        self.n_dates
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.n_paths + j]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Bit-exact content hash.
    pub fn hash(&self) -> String {
        hash_f64_rows("path-table", [self.values.as_slice()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    /// `V ≥ 0`.
    Positive,
    /// `V < 0`.
    Negative,
    /// No restriction.
    All,
}

impl Sign {
    #[inline]
    pub fn admits(self, v: f64) -> bool {
        match self {
            Sign::Positive => v >= 0.0,
            Sign::Negative => v < 0.0,
            Sign::All => true,
        }
    }
}

/// What a set was selected by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    Sign { sign: Sign },
    Es { alpha: f64 },
    Var { alpha: f64 },
    /// Worst-loss ranks from the VaR(alpha) rank to the VaR(beta) rank,
    /// `beta ≤ alpha`. Equal levels give the VaR scenario.
    VarBand { alpha: f64, beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the total path count `n_j`.
    TotalPaths,
    /// Divide by the number of selected scenarios.
    SetSize,
}

/// Selected path indices per date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSet {
    selector: Selector,
    n_total: usize,
    dates: Vec<f64>,
    indices: Vec<Vec<usize>>,
    source_hash: String,
}

impl ConditioningSet {
    /// Builds a set from explicit indices. Indices are sorted and must be
    /// unique and below `n_total`.
    pub fn from_indices(
        selector: Selector,
        n_total: usize,
        dates: Vec<f64>,
        mut indices: Vec<Vec<usize>>,
        source_hash: String,
    ) -> Result<Self> {
        if dates.len() != indices.len() {
            return Err(Error::config("one index list per date is required"));
        }
        for list in indices.iter_mut() {
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) || list.last().is_some_and(|&j| j >= n_total) {
                return Err(Error::config("set indices must be unique and within the path count"));
            }
        }
        Ok(Self {
            selector,
            n_total,
            dates,
            indices,
            source_hash,
        })
    }

    pub fn selector(&self) -> Selector {
        self.selector
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn dates(&self) -> &[f64] {
        &self.dates
    }

    pub fn n_dates(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self, k: usize) -> &[usize] {
        &self.indices[k]
    }

    pub fn contains(&self, k: usize, j: usize) -> bool {
        self.indices[k].binary_search(&j).is_ok()
    }

    /// Hash of the values the set was built from.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// `{date, selector, indices}` records.
    pub fn to_json_value(&self) -> serde_json::Value {
        let selector = serde_json::to_value(self.selector).expect("selector serializes");
        serde_json::Value::Array(
            self.dates
                .iter()
                .zip(&self.indices)
                .map(|(d, idx)| {
                    serde_json::json!({
                        "date": d,
                        "selector": selector,
                        "indices": idx,
                    })
                })
                .collect(),
        )
    }
}

/// Paths whose portfolio value has the requested sign, per date.
pub fn sign_condition(values: &PathTable, dates: &[f64], sign: Sign) -> Result<ConditioningSet> {
    if dates.len() != values.n_dates() {
        return Err(Error::config("date grid does not match the value table"));
    }
    if values.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("portfolio values are not finite".into()));
    }
    let indices = (0..values.n_dates())
        .map(|k| {
            values
                .row(k)
                .iter()
                .enumerate()
                .filter(|(_, &v)| sign.admits(v))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    Ok(ConditioningSet {
        selector: Selector::Sign { sign },
        n_total: values.n_paths(),
        dates: dates.to_vec(),
        indices,
        source_hash: values.hash(),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha {alpha} must lie in (0, 1)")));
    }
    Ok(())
}

/// Number of scenarios in the ES(alpha) tail of `n` equally likely ones:
/// the largest count whose probability does not exceed `1 − alpha`, and at
/// least one.
pub fn es_set_size(alpha: f64, n: usize) -> usize {
    let raw = (1.0 - alpha) * n as f64;
    ((raw + 1e-9 * raw.max(1.0)).floor() as usize).clamp(1, n.max(1))
}

/// Scenario indices sorted from worst (largest loss) to best, ties by
/// ascending index.
pub fn loss_ranking(losses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order
}

/// Tail size when scenarios carry weights: worst scenarios are taken while
/// their cumulative weight stays within `1 − alpha`.
pub(crate) fn weighted_tail_size(alpha: f64, ranking: &[usize], weights: &[f64]) -> usize {
    let uniform = weights.iter().all(|&w| w == weights[0]);
    if uniform {
        return es_set_size(alpha, ranking.len());
    }
    let limit = (1.0 - alpha) * (1.0 + 1e-12);
    let mut cum = 0.0;
    let mut size = 0;
    for &i in ranking {
        if cum + weights[i] > limit {
            break;
        }
        cum += weights[i];
        size += 1;
    }
    size.max(1)
}

fn loss_set(losses: &[f64], alpha: f64, selector: Selector) -> Result<ConditioningSet> {
    check_alpha(alpha)?;
    if losses.is_empty() {
        return Err(Error::config("no scenarios to condition on"));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("losses are not finite".into()));
    }
    let ranking = loss_ranking(losses);
    let size = es_set_size(alpha, losses.len());
    let chosen: Vec<usize> = match selector {
        Selector::Es { .. } => ranking[..size].to_vec(),
        Selector::Var { .. } => vec![ranking[size - 1]],
        Selector::VarBand { beta, .. } => {
            check_alpha(beta)?;
            if beta > alpha {
                return Err(Error::config("VaR band needs beta <= alpha"));
            }
            let outer = es_set_size(beta, losses.len());
            ranking[size - 1..outer].to_vec()
        }
        Selector::Sign { .. } => unreachable!("loss sets are percentile sets"),
    };
    ConditioningSet::from_indices(
        selector,
        losses.len(),
        vec![0.0],
        vec![chosen],
        hash_f64_rows("losses", [losses]),
    )
}

/// The worst-loss tail of size [`es_set_size`]; ties broken by ascending
/// index. Loss is the negative of value change, so the worst scenario has
/// the largest loss.
pub fn es_condition(losses: &[f64], alpha: f64) -> Result<ConditioningSet> {
    loss_set(losses, alpha, Selector::Es { alpha })
}

/// The single scenario on the boundary of the ES(alpha) tail.
pub fn var_condition(losses: &[f64], alpha: f64) -> Result<ConditioningSet> {
    loss_set(losses, alpha, Selector::Var { alpha })
}

/// Scenarios ranked between the VaR(alpha) and VaR(beta) boundaries.
pub fn var_band_condition(losses: &[f64], alpha: f64, beta: f64) -> Result<ConditioningSet> {
    loss_set(losses, alpha, Selector::VarBand { alpha, beta })
}

/// Mean of `values` (one per path) over the set of date `k`.
pub fn conditional_mean(
    values: &[f64],
    set: &ConditioningSet,
    k: usize,
    normalization: Normalization,
) -> Result<f64> {
    if values.len() != set.n_total() {
        return Err(Error::config("values must cover every path"));
    }
    let idx = set.indices(k);
    let sum: NeumaierSum = idx.iter().map(|&j| values[j]).collect();
    match normalization {
        Normalization::TotalPaths => Ok(sum.value() / set.n_total() as f64),
        Normalization::SetSize => {
            if idx.is_empty() {
                return Err(Error::Numerical("set-size mean over an empty set".into()));
            }
            Ok(sum.value() / idx.len() as f64)
        }
    }
}

/// For sign sets: the value a new trade may take on each path before the
/// path changes membership. A path with portfolio value `V` is in the
/// positive set after adding a trade worth `d` iff `d ≥ −V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalBounds {
    /// `−V` per (date, path).
    pub thresholds: PathTable,
    /// True where the path is currently selected (it drops when the new
    /// value falls below the threshold); false where it joins when the new
    /// value reaches the threshold.
    pub selected: Vec<bool>,
    pub sign: Sign,
}

impl IncrementalBounds {
    pub fn threshold(&self, k: usize, j: usize) -> f64 {
        self.thresholds.get(k, j)
    }

    /// Whether adding values `delta` changes membership of path `j` at `k`.
    pub fn flips(&self, k: usize, j: usize, delta: f64) -> bool {
        let t = self.threshold(k, j);
        let now = self.selected[k * self.thresholds.n_paths() + j];
        let after = match self.sign {
            Sign::Positive => delta >= t,
            Sign::Negative => delta < t,
            Sign::All => true,
        };
        now != after
    }
}

/// Flip thresholds of every path for sign conditioning.
pub fn incremental_bounds(values: &PathTable, sign: Sign) -> IncrementalBounds {
    let thresholds = PathTable::from_fn(values.n_dates(), values.n_paths(), |k, j| {
        -values.get(k, j)
    });
    let selected = values.values().iter().map(|&v| sign.admits(v)).collect();
    IncrementalBounds {
        thresholds,
        selected,
        sign,
    }
}
