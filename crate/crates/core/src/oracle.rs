//! Brute-force references for the tests: closed-form trade values, pathwise
//! adjustments without regression, margins by full revaluation and
//! finite-difference derivatives of arbitrary pipelines.
//!
//! Nothing here touches the regression code.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::conditioning::{es_set_size, loss_ranking};
use crate::credit::CreditCurve;
use crate::error::{Error, Result};
use crate::market::{ModelConfig, ScenarioCube, ShockSet, UnderlyingModel};
use crate::trades::{OptionType, Trade, TradeType};
use crate::xva::{MarginMeasure, XvaKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Bump size.
    pub h: f64,
    /// Regenerate bumped cubes from the same random streams.
    pub common_random_numbers: bool,
    /// Keep conditioning sets at their unbumped selection.
    pub frozen_sets: bool,
    /// Refit regressions on the bumped cube instead of keeping the
    /// coefficients. Targets keep the unbumped pricing functions unless
    /// `reprice_targets` is set. A refit also moves the fitted function
    /// when trade values lie outside the basis span, so it only agrees with
    /// the chain rule for portfolios inside the span.
    pub refit: bool,
    pub reprice_targets: bool,
    /// Relative tolerance for derivative comparisons.
    pub relative_tolerance: f64,
    /// Tolerance in ulps for identities.
    pub ulps: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            common_random_numbers: true,
            frozen_sets: true,
            refit: false,
            reprice_targets: false,
            relative_tolerance: 1e-3,
            ulps: 8.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::config("oracle bump size must be > 0"));
        }
        Ok(())
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").cdf(x)
}

/// Black-Scholes value of a call or put on a forward `forward` with
/// discount factor `df`, total volatility `sd = σ√τ`.
pub fn black(forward: f64, strike: f64, sd: f64, df: f64, option: OptionType) -> f64 {
    let phi = match option {
        OptionType::Call => 1.0,
        OptionType::Put => -1.0,
    };
    if sd <= 0.0 || forward <= 0.0 || strike <= 0.0 {
        return df * (phi * (forward - strike)).max(0.0);
    }
    let d1 = ((forward / strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    df * phi * (forward * std_normal_cdf(phi * d1) - strike * std_normal_cdf(phi * d2))
}

/// Zero-coupon bond price `P(t, t+tau)` at short rate `r` in the Gaussian
/// mean-reverting model.
pub fn short_rate_bond(model: &UnderlyingModel, tau: f64, r: f64) -> Result<f64> {
    let (ln_a, b) = short_rate_bond_terms(model, tau)?;
    Ok((ln_a - b * r).exp())
}

/// `(ln A, B)` with `P(t, t+tau) = exp(ln A − B r)`.
fn short_rate_bond_terms(model: &UnderlyingModel, tau: f64) -> Result<(f64, f64)> {
    let UnderlyingModel::ShortRate {
        volatility: s,
        mean_reversion: k,
        mean_level: theta,
        ..
    } = *model
    else {
        return Err(Error::Unsupported("bond prices need a short-rate underlying".into()));
    };
    if k == 0.0 {
        return Ok((s * s * tau.powi(3) / 6.0, tau));
    }
    let x = k * tau;
    let b = -(-x).exp_m1() / k;
    let ln_a = -theta * phi(x) / k + s * s * curvature(x) / (4.0 * k * k * k);
    Ok((ln_a, b))
}

/// Coefficient of `x^n` in `e^{−x}`.
fn exp_neg_coeff(n: usize) -> f64 {
    let f: f64 = (1..=n).map(|i| i as f64).product();
    if n % 2 == 0 {
        1.0 / f
    } else {
        -1.0 / f
    }
}

const SERIES_TERMS: usize = 30;

/// `e^{−x} − 1 + x`, accurate for small `x`.
fn phi(x: f64) -> f64 {
    if x < 0.5 {
        (2..=SERIES_TERMS).rev().fold(0.0, |acc, n| acc * x + exp_neg_coeff(n)) * x * x
    } else {
        (-x).exp_m1() + x
    }
}

/// `2(e^{−x} − 1 + x) − (1 − e^{−x})²`, which starts at `2x³/3`.
fn curvature(x: f64) -> f64 {
    static COEFFS: OnceLock<Vec<f64>> = OnceLock::new();
    if x < 0.5 {
        let coeffs = COEFFS.get_or_init(|| {
            (0..=SERIES_TERMS)
                .map(|n| {
                    if n < 3 {
                        return 0.0;
                    }
                    let square: f64 = (1..n).map(|m| exp_neg_coeff(m) * exp_neg_coeff(n - m)).sum();
                    2.0 * exp_neg_coeff(n) - square
                })
                .collect()
        });
        coeffs[3..].iter().rev().fold(0.0, |acc, c| acc * x + c) * x * x * x
    } else {
        let psi = -(-x).exp_m1();
        2.0 * phi(x) - psi * psi
    }
}

/// Value at time `t` of `trade`, given the underlying levels `state`.
///
/// Trades are worth zero after their maturity. Forwards and options on a
/// lognormal underlying use the simulation drift for the forward and the
/// model rate for discounting; swaplets use bond prices of the short-rate
/// model.
pub fn closed_form_value(trade: &Trade, model: &ModelConfig, t: f64, state: &[f64]) -> Result<f64> {
    DatePricer::new(trade, model, t)?.value(state)
}

/// [`closed_form_value`] of one trade at one date, with everything that
/// does not depend on the state computed up front.
#[derive(Clone, Debug)]
pub struct DatePricer {
    index: usize,
    n_underlyings: usize,
    notional: f64,
    payoff: Payoff,
}

#[derive(Clone, Debug)]
enum Payoff {
    Expired,
    Forward { growth: f64, discounted_strike: f64 },
    Option { growth: f64, strike: f64, sd: f64, df: f64, option: OptionType },
    Swaplet { near: (f64, f64), far: (f64, f64), repaid: f64 },
}

impl DatePricer {
    pub fn new(trade: &Trade, model: &ModelConfig, t: f64) -> Result<Self> {
        let index = model.underlying_index(&trade.underlying)?;
        let underlying = &model.underlyings[index].model;
        let payoff = if t > trade.maturity() * (1.0 + 1e-12) {
            Payoff::Expired
        } else {
            let tau = (trade.maturity() - t).max(0.0);
            let r = model.rate;
            match (trade.kind, underlying) {
                (TradeType::Forward, UnderlyingModel::Gbm { drift, .. }) => Payoff::Forward {
                    growth: ((drift - r) * tau).exp(),
                    discounted_strike: trade.strike()? * (-r * tau).exp(),
                },
                (TradeType::EuropeanOption, UnderlyingModel::Gbm { drift, volatility, .. }) => Payoff::Option {
                    growth: (drift * tau).exp(),
                    strike: trade.strike()?,
                    sd: volatility * tau.sqrt(),
                    df: (-r * tau).exp(),
                    option: trade.option_type,
                },
                (TradeType::Swaplet, UnderlyingModel::ShortRate { .. }) => {
                    let (t1, t2) = (trade.dates[0], trade.dates[1]);
                    Payoff::Swaplet {
                        near: short_rate_bond_terms(underlying, (t1 - t).max(0.0))?,
                        far: short_rate_bond_terms(underlying, t2 - t)?,
                        repaid: 1.0 + trade.fixed_rate()? * (t2 - t1),
                    }
                }
                (kind, _) => {
                    return Err(Error::Unsupported(format!(
                        "no closed form for {kind:?} on underlying {}",
                        trade.underlying
                    )))
                }
            }
        };
        Ok(Self {
            index,
            n_underlyings: model.n_underlyings(),
            notional: trade.signed_notional(),
            payoff,
        })
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        if state.len() != self.n_underlyings {
            return Err(Error::config("state dimension does not match the model"));
        }
        let x = state[self.index];
        let n = self.notional;
        Ok(match self.payoff {
            Payoff::Expired => 0.0,
            Payoff::Forward { growth, discounted_strike } => n * (x * growth - discounted_strike),
            Payoff::Option { growth, strike, sd, df, option } => n * black(x * growth, strike, sd, df, option),
            Payoff::Swaplet { near, far, repaid } => {
                let p1 = (near.0 - near.1 * x).exp();
                let p2 = (far.0 - far.1 * x).exp();
                n * (p1 - repaid * p2)
            }
        })
    }
}

/// Pathwise adjustment estimate and its Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForceXva {
    pub value: f64,
    pub standard_error: f64,
}

/// Adjustment of `kind` from closed-form netting-set values on the
/// simulated paths of `cube`, with the exposure indicator applied path by
/// path and the same rectangle rule in time.
pub fn brute_force_xva(
    trades: &[Trade],
    model: &ModelConfig,
    cube: &ScenarioCube,
    credit: &CreditCurve,
    kind: XvaKind,
) -> Result<BruteForceXva> {
    let n = cube.n_original();
    let dates = cube.dates();
    let mut per_path = vec![0.0; n];
    let mut prev = 0.0;
    for (k, &t) in dates.iter().enumerate() {
        let dt = t - prev;
        prev = t;
        let weight = -credit.lgd(kind.party()) * dt * credit.lambda(kind.party(), t)
            * credit.discount_q(0.0, t);
        for (j, slot) in per_path.iter_mut().enumerate() {
            let mut v = 0.0;
            for trade in trades {
                v += closed_form_value(trade, model, t, cube.state(k, j))?;
            }
            if kind.sign().admits(v) {
                *slot += weight * v;
            }
        }
    }
    let mean = per_path.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        per_path.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(BruteForceXva {
        value: mean,
        standard_error: (var / n as f64).sqrt(),
    })
}

/// Margin at one base state by revaluing every trade under every shock.
pub fn brute_force_margin(
    trades: &[Trade],
    model: &ModelConfig,
    t: f64,
    shocks: &ShockSet,
    alpha: f64,
    measure: MarginMeasure,
) -> Result<f64> {
    let value = |state: &[f64]| -> Result<f64> {
        let mut v = 0.0;
        for trade in trades {
            v += closed_form_value(trade, model, t, state)?;
        }
        Ok(v)
    };
    let base = value(shocks.base())?;
    let losses = (0..shocks.len())
        .map(|i| Ok(base - value(shocks.state(i))?))
        .collect::<Result<Vec<f64>>>()?;
    let ranking = loss_ranking(&losses);
    let size = es_set_size(alpha, losses.len());
    Ok(match measure {
        MarginMeasure::Es => ranking[..size].iter().map(|&i| losses[i]).sum::<f64>() / size as f64,
        MarginMeasure::Var => losses[ranking[size - 1]],
    })
}

/// Central difference `(f(h) − f(−h)) / 2h` of a pipeline parameterized by
/// its bump. The unbumped pipeline is run twice and must agree bit for bit.
pub fn bump_sensitivity<F>(pipeline: F, h: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::config("bump size must be > 0"));
    }
    let first = pipeline(0.0)?;
    let second = pipeline(0.0)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }
    Ok((pipeline(h)? - pipeline(-h)?) / (2.0 * h))
}

/// Mixed second derivative by the four-point stencil
/// `(f(h,h) − f(h,−h) − f(−h,h) + f(−h,−h)) / 4h²`, where `pipeline(a, b)`
/// bumps the first instrument by `a` and the second by `b`.
pub fn bump_gamma<F>(pipeline: F, h: f64) -> Result<f64>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::config("bump size must be > 0"));
    }
    let first = pipeline(0.0, 0.0)?;
    let second = pipeline(0.0, 0.0)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }
    let pp = pipeline(h, h)?;
    let pm = pipeline(h, -h)?;
    let mp = pipeline(-h, h)?;
    let mm = pipeline(-h, -h)?;
    Ok(((pp - pm) - (mp - mm)) / (4.0 * h * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::UnderlyingConfig;
    use crate::trades::Direction;
    use std::cell::Cell;

    fn gbm_model(vol: f64, drift: f64, rate: f64) -> ModelConfig {
        ModelConfig {
            rate,
            underlyings: vec![UnderlyingConfig {
                name: "S".into(),
                model: UnderlyingModel::Gbm {
                    initial: 100.0,
                    volatility: vol,
                    drift,
                },
            }],
            correlation: None,
            instruments: vec![],
        }
    }

    fn trade(kind: TradeType, strike: f64, dates: Vec<f64>) -> Trade {
        Trade {
            id: "t".into(),
            kind,
            underlying: "S".into(),
            strike: Some(strike),
            rate: None,
            dates,
            notional: 1.0,
            direction: Direction::Long,
            option_type: OptionType::Call,
        }
    }

    #[test]
    fn at_the_money_call() {
        let m = gbm_model(0.2, 0.0, 0.0);
        let v = closed_form_value(&trade(TradeType::EuropeanOption, 100.0, vec![1.0]), &m, 0.0, &[100.0])
            .unwrap();
        assert!((v - 7.9656).abs() < 5e-5, "{v}");
    }

    #[test]
    fn forward_at_the_forward_is_worthless() {
        let m = gbm_model(0.2, 0.03, 0.03);
        let fwd = 100.0 * (0.03f64 * 2.0).exp();
        let v = closed_form_value(&trade(TradeType::Forward, fwd, vec![2.0]), &m, 0.0, &[100.0]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn zero_vol_option_is_discounted_intrinsic() {
        let m = gbm_model(0.0, 0.02, 0.05);
        let v = closed_form_value(&trade(TradeType::EuropeanOption, 95.0, vec![1.0]), &m, 0.0, &[100.0])
            .unwrap();
        let expected = (-0.05f64).exp() * (100.0 * 0.02f64.exp() - 95.0);
        assert!((v - expected).abs() < 1e-12);
        let expired =
            closed_form_value(&trade(TradeType::EuropeanOption, 95.0, vec![1.0]), &m, 1.5, &[100.0]).unwrap();
        assert_eq!(expired, 0.0);
    }

    #[test]
    fn put_call_parity() {
        let m = gbm_model(0.3, 0.01, 0.01);
        let mut call = trade(TradeType::EuropeanOption, 110.0, vec![2.0]);
        let c = closed_form_value(&call, &m, 0.5, &[97.0]).unwrap();
        call.option_type = OptionType::Put;
        let p = closed_form_value(&call, &m, 0.5, &[97.0]).unwrap();
        let f = closed_form_value(&trade(TradeType::Forward, 110.0, vec![2.0]), &m, 0.5, &[97.0]).unwrap();
        assert!((c - p - f).abs() < 1e-10);
    }

    #[test]
    fn bond_price_small_mean_reversion_is_continuous() {
        let model = |k: f64| UnderlyingModel::ShortRate {
            initial: 0.02,
            volatility: 0.01,
            mean_reversion: k,
            mean_level: 0.03,
        };
        let a = short_rate_bond(&model(0.5001 / 5.0), 5.0, 0.02).unwrap();
        let b = short_rate_bond(&model(0.4999 / 5.0), 5.0, 0.02).unwrap();
        assert!((a - b).abs() < 1e-5);
        // the price moves by O(κ) away from κ = 0
        let tiny = short_rate_bond(&model(1e-9), 2.0, 0.02).unwrap();
        let zero = short_rate_bond(&model(0.0), 2.0, 0.02).unwrap();
        assert!((tiny - zero).abs() < 1e-10);
        let flat = short_rate_bond(&model(0.0), 2.0, 0.02).unwrap();
        assert!((flat - (-0.04f64 + 0.0001 * 8.0 / 6.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn bermudan_has_no_closed_form() {
        let m = gbm_model(0.2, 0.0, 0.0);
        let t = trade(TradeType::BermudanOption, 100.0, vec![0.5, 1.0]);
        assert!(matches!(closed_form_value(&t, &m, 0.0, &[100.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn stencils_are_exact_on_polynomials() {
        let d = bump_sensitivity(|s| Ok(3.0 * s), 1e-5).unwrap();
        assert!((d - 3.0).abs() < 1e-9);
        let g = bump_gamma(|a, b| Ok(2.0 * a * b + a * a - 5.0 * b), 1e-3).unwrap();
        assert!((g - 2.0).abs() < 1e-9);
        let same = bump_gamma(|a, b| Ok(1.5 * (a + b) * (a + b)), 1e-3).unwrap();
        assert!((same - 3.0).abs() < 1e-9);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0u32);
        let flaky = |s: f64| {
            calls.set(calls.get() + 1);
            Ok(s + calls.get() as f64)
        };
        assert!(matches!(bump_sensitivity(flaky, 1e-3), Err(Error::Nondeterministic { .. })));
    }
}
