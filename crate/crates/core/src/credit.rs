//! Hazard rates, loss given default and discounting.
//!
//! Curves are piecewise constant: pillar `i` holds on `(p_{i−1}, p_i]`
//! with `p_{−1} = 0`, and the last value extends flat beyond the last pillar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which party a credit quantity belongs to: the bank (`B`) or its
/// counterparty (`C`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    B,
    C,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreditCurve {
    pub pillars: Vec<f64>,
    #[serde(rename = "lambdaB")]
    pub lambda_b: Vec<f64>,
    #[serde(rename = "lambdaC")]
    pub lambda_c: Vec<f64>,
    #[serde(rename = "lgdB")]
    pub lgd_b: f64,
    #[serde(rename = "lgdC")]
    pub lgd_c: f64,
    pub r: Vec<f64>,
}

impl CreditCurve {
    /// Flat curve with one pillar.
    pub fn flat(lambda_b: f64, lambda_c: f64, lgd_b: f64, lgd_c: f64, r: f64) -> Result<Self> {
        let curve = Self {
            pillars: vec![1.0],
            lambda_b: vec![lambda_b],
            lambda_c: vec![lambda_c],
            lgd_b,
            lgd_c,
            r: vec![r],
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let curve: CreditCurve = serde_json::from_str(text).map_err(Error::from_json)?;
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pillars.len();
        if n == 0 {
            return Err(Error::config("credit curve needs at least one pillar"));
        }
        if self.pillars.iter().any(|p| !(p.is_finite() && *p > 0.0))
            || self.pillars.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::config("credit pillars must be positive and strictly increasing"));
        }
        for (name, curve) in [("lambdaB", &self.lambda_b), ("lambdaC", &self.lambda_c), ("r", &self.r)] {
            if curve.len() != n {
                return Err(Error::config(format!("{name} needs one value per pillar")));
            }
            if curve.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        if self.lambda_b.iter().chain(&self.lambda_c).any(|&l| l < 0.0) {
            return Err(Error::config("hazard rates must be >= 0"));
        }
        for (name, lgd) in [("lgdB", self.lgd_b), ("lgdC", self.lgd_c)] {
            if !(0.0..=1.0).contains(&lgd) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    fn segment(&self, t: f64) -> usize {
        self.pillars
            .iter()
            .position(|&p| t <= p)
            .unwrap_or(self.pillars.len() - 1)
    }

    pub fn lambda(&self, party: Party, t: f64) -> f64 {
        let i = self.segment(t);
        match party {
            Party::B => self.lambda_b[i],
            Party::C => self.lambda_c[i],
        }
    }

    pub fn lgd(&self, party: Party) -> f64 {
        match party {
            Party::B => self.lgd_b,
            Party::C => self.lgd_c,
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        self.r[self.segment(t)]
    }

    /// `q = r + λ_B + λ_C` at `t`.
    pub fn q(&self, t: f64) -> f64 {
        let i = self.segment(t);
        self.r[i] + self.lambda_b[i] + self.lambda_c[i]
    }

    fn integrate(&self, t: f64, u: f64, f: impl Fn(usize) -> f64) -> f64 {
        if u <= t {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut lo = t;
        for (i, &p) in self.pillars.iter().enumerate() {
            let last = i + 1 == self.pillars.len();
            let hi = if last { u } else { p.min(u) };
            if hi > lo {
                acc += f(i) * (hi - lo);
                lo = hi;
            }
            if lo >= u {
                break;
            }
        }
        acc
    }

    /// `D_q(t, u) = exp(−∫_t^u q)`.
    pub fn discount_q(&self, t: f64, u: f64) -> f64 {
        (-self.integrate(t, u, |i| self.r[i] + self.lambda_b[i] + self.lambda_c[i])).exp()
    }

    /// Riskless discount factor `exp(−∫_t^u r)`.
    pub fn discount_r(&self, t: f64, u: f64) -> f64 {
        (-self.integrate(t, u, |i| self.r[i])).exp()
    }

    /// Copy with the hazard curve of `party` multiplied by `factor`.
    pub fn scaled_hazards(&self, party: Party, factor: f64) -> Self {
        let mut out = self.clone();
        let curve = match party {
            Party::B => &mut out.lambda_b,
            Party::C => &mut out.lambda_c,
        };
        curve.iter_mut().for_each(|l| *l *= factor);
        out
    }
}

/// A piecewise-constant funding spread curve, or a constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpreadCurve {
    Constant(f64),
    Curve { pillars: Vec<f64>, values: Vec<f64> },
}

impl Default for SpreadCurve {
    fn default() -> Self {
        SpreadCurve::Constant(0.0)
    }
}

impl SpreadCurve {
    pub fn validate(&self) -> Result<()> {
        match self {
            SpreadCurve::Constant(s) if s.is_finite() => Ok(()),
            SpreadCurve::Constant(_) => Err(Error::config("funding spread must be finite")),
            SpreadCurve::Curve { pillars, values } => {
                if pillars.is_empty()
                    || pillars.len() != values.len()
                    || pillars.windows(2).any(|w| w[1] <= w[0])
                    || values.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::config(
                        "funding spread curve needs increasing pillars and one finite value each",
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            SpreadCurve::Constant(s) => *s,
            SpreadCurve::Curve { pillars, values } => {
                let i = pillars.iter().position(|&p| t <= p).unwrap_or(pillars.len() - 1);
                values[i]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve() -> CreditCurve {
        CreditCurve {
            pillars: vec![1.0, 3.0, 5.0],
            lambda_b: vec![0.01, 0.02, 0.03],
            lambda_c: vec![0.02, 0.03, 0.05],
            lgd_b: 0.6,
            lgd_c: 0.4,
            r: vec![0.01, 0.015, 0.02],
        }
    }

    #[test]
    fn piecewise_lookup() {
        let c = curve();
        assert_eq!(c.lambda(Party::C, 0.5), 0.02);
        assert_eq!(c.lambda(Party::C, 1.0), 0.02);
        assert_eq!(c.lambda(Party::C, 1.5), 0.03);
        assert_eq!(c.lambda(Party::C, 9.0), 0.05);
        assert_eq!(c.q(2.0), 0.015 + 0.02 + 0.03);
    }

    #[test]
    fn discount_integrates_segments() {
        let c = curve();
        let expected = (-(0.04f64 + 0.065)).exp();
        assert!((c.discount_q(0.0, 2.0) - expected).abs() < 1e-15);
        assert_eq!(c.discount_q(1.3, 1.3), 1.0);
        let tail = (-0.1f64).exp();
        assert!((c.discount_q(5.0, 6.0) - tail).abs() < 1e-15);
    }

    #[test]
    fn json_names() {
        let c = CreditCurve::from_json(
            r#"{"lambdaB": [0.01], "lambdaC": [0.02], "lgdB": 0.6, "lgdC": 0.4, "r": [0.0], "pillars": [10]}"#,
        )
        .unwrap();
        assert_eq!(c.lambda(Party::B, 3.0), 0.01);
        assert!(CreditCurve::from_json(
            r#"{"lambdaB": [-0.01], "lambdaC": [0.02], "lgdB": 0.6, "lgdC": 0.4, "r": [0.0], "pillars": [10]}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn discount_is_decreasing(t in 0.0f64..6.0, a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let c = curve();
            let (u1, u2) = (t + a.min(b), t + a.max(b));
            prop_assert!(c.discount_q(t, u2) <= c.discount_q(t, u1));
            prop_assert!(c.discount_q(t, u1) <= 1.0);
        }
    }
}
