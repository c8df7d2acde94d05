//! Trade definitions and their per-date regression targets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{ModelConfig, ScenarioCube, UnderlyingModel};
use crate::oracle::DatePricer;
use crate::regression::{fit_bermudan, fit_trade, DesignFactorizations, RegressionSet, TradeFit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeType {
    /// Pays `S(T) − K` at `T`.
    Forward,
    /// Forward-rate agreement on a short-rate underlying: the floating
    /// rate over `[T1, T2]` against the fixed `rate`, settled at `T1`.
    Swaplet,
    EuropeanOption,
    BermudanOption,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Long,
    Short,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionType {
    #[default]
    Call,
    Put,
}

/// One trade of a portfolio file.
///
/// `dates` holds the maturity for forwards and European options, the
/// accrual start and end for swaplets, and the exercise dates for
/// Bermudan options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trade {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: TradeType,
    pub underlying: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strike: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    pub dates: Vec<f64>,
    #[serde(default = "unit")]
    pub notional: f64,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub option_type: OptionType,
}

fn unit() -> f64 {
    1.0
}

impl Trade {
    /// `±notional`.
    pub fn signed_notional(&self) -> f64 {
        match self.direction {
            Direction::Long => self.notional,
            Direction::Short => -self.notional,
        }
    }

    /// Last date on which the trade has value.
    pub fn maturity(&self) -> f64 {
        match self.kind {
            // settled at the start of the accrual period
            TradeType::Swaplet => self.dates[0],
            _ => *self.dates.last().expect("validated dates"),
        }
    }

    pub fn strike(&self) -> Result<f64> {
        self.strike
            .ok_or_else(|| Error::config(format!("trade {}: strike is required", self.id)))
    }

    pub fn fixed_rate(&self) -> Result<f64> {
        self.rate
            .ok_or_else(|| Error::config(format!("trade {}: rate is required", self.id)))
    }

    /// Checks fields against the trade type and the model.
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(format!("trade {}: {msg}", self.id)));
        if self.id.is_empty() || self.id.contains([',', '\n', '"']) {
            return fail("id must be non-empty without commas, quotes or newlines");
        }
        if !self.notional.is_finite() || self.notional < 0.0 {
            return fail("notional must be finite and >= 0");
        }
        if self.dates.is_empty() || self.dates.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return fail("dates must be non-empty year fractions >= 0");
        }
        if self.dates.windows(2).any(|w| w[1] <= w[0]) {
            return fail("dates must be strictly increasing");
        }
        let b = model.underlying_index(&self.underlying)?;
        let short_rate = matches!(model.underlyings[b].model, UnderlyingModel::ShortRate { .. });
        match self.kind {
            TradeType::Forward | TradeType::EuropeanOption => {
                self.strike()?;
                if self.dates.len() != 1 {
                    return fail("exactly one maturity date expected");
                }
            }
            TradeType::BermudanOption => {
                self.strike()?;
            }
            TradeType::Swaplet => {
                self.fixed_rate()?;
                if self.dates.len() != 2 {
                    return fail("accrual start and end dates expected");
                }
            }
        }
        if !matches!(self.kind, TradeType::Swaplet) && !self.strike()?.is_finite() {
            return fail("strike must be finite");
        }
        match (self.kind, short_rate) {
            (TradeType::Swaplet, false) => Err(Error::Unsupported(format!(
                "trade {}: swaplets need a short-rate underlying",
                self.id
            ))),
            (TradeType::Swaplet, true) => Ok(()),
            (_, true) => Err(Error::Unsupported(format!(
                "trade {}: {:?} needs a lognormal underlying",
                self.id, self.kind
            ))),
            (_, false) => Ok(()),
        }
    }

    /// Exercise value of a unit long position.
    pub(crate) fn unit_intrinsic(&self, x: f64) -> f64 {
        let k = self.strike.unwrap_or(0.0);
        match self.option_type {
            OptionType::Call => (x - k).max(0.0),
            OptionType::Put => (k - x).max(0.0),
        }
    }
}

/// Contents of a portfolio file: a bare array of trades, or
/// `{"increment": true, "trades": [...]}` for a delta portfolio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    #[serde(default)]
    pub increment: bool,
    pub trades: Vec<Trade>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PortfolioFile {
    Bare(Vec<Trade>),
    Wrapped(Portfolio),
}

impl Portfolio {
    pub fn new(trades: Vec<Trade>) -> Self {
        Self {
            increment: false,
            trades,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Parse strictly first so that syntax errors carry a line number.
        let value: serde_json::Value = serde_json::from_str(text).map_err(Error::from_json)?;
        let file: PortfolioFile = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: 0,
            message: format!("portfolio does not match the trade schema: {e}"),
        })?;
        Ok(match file {
            PortfolioFile::Bare(trades) => Portfolio::new(trades),
            PortfolioFile::Wrapped(p) => p,
        })
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        for (i, t) in self.trades.iter().enumerate() {
            t.validate(model)?;
            if self.trades[..i].iter().any(|o| o.id == t.id) {
                return Err(Error::config(format!("duplicate trade id {}", t.id)));
            }
        }
        Ok(())
    }
}

fn grid_index(dates: &[f64], t: f64) -> Option<usize> {
    dates.iter().position(|&d| (d - t).abs() <= 1e-12 * t.abs().max(1.0))
}

/// Regression fits of one trade on every date of the cube.
pub fn fit_trade_on_cube(
    trade: &Trade,
    model: &ModelConfig,
    cube: &ScenarioCube,
    factorizations: &DesignFactorizations,
) -> Result<Vec<TradeFit>> {
    trade.validate(model)?;
    if factorizations.cube_identity() != cube.identity() {
        return Err(Error::StateMismatch("factorizations belong to another cube".into()));
    }
    let dates = cube.dates();
    match trade.kind {
        TradeType::BermudanOption => {
            let b = model.underlying_index(&trade.underlying)?;
            let exercise = trade
                .dates
                .iter()
                .map(|&t| {
                    grid_index(dates, t).ok_or_else(|| {
                        Error::config(format!(
                            "trade {}: exercise date {t} is not a stopping date",
                            trade.id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let r = model.rate;
            let fits = fit_bermudan(
                factorizations,
                &exercise,
                |k, j| trade.unit_intrinsic(cube.state(k, j)[b]),
                |k, e| (-r * (dates[e] - dates[k])).exp(),
            )?;
            let scale = trade.signed_notional();
            Ok(fits
                .into_iter()
                .map(|f| TradeFit {
                    coefficients: f.coefficients.iter().map(|c| c * scale).collect(),
                    residual_rms: f.residual_rms * scale.abs(),
                })
                .collect())
        }
        _ => (0..cube.n_dates())
            .map(|k| {
                let fac = factorizations.date(k);
                let pricer = DatePricer::new(trade, model, dates[k])?;
                let targets = fac
                    .paths()
                    .iter()
                    .map(|&j| pricer.value(cube.state(k, j)))
                    .collect::<Result<Vec<f64>>>()?;
                fit_trade(fac, &targets)
            })
            .collect(),
    }
}

/// Fits every trade of a portfolio on shared factorizations.
pub fn fit_portfolio(
    trades: &[Trade],
    model: &ModelConfig,
    cube: &ScenarioCube,
    factorizations: &DesignFactorizations,
) -> Result<RegressionSet> {
    let fits = trades
        .par_iter()
        .map(|t| fit_trade_on_cube(t, model, cube, factorizations))
        .collect::<Result<Vec<_>>>()?;
    let mut set = RegressionSet::new(
        factorizations.basis().clone(),
        cube.dates().to_vec(),
        cube.identity().to_string(),
    );
    for (t, f) in trades.iter().zip(fits) {
        set.insert(&t.id, f)?;
    }
    Ok(set)
}
