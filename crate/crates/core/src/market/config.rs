use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A displacement of one underlying: scale it or shift it.
///
/// In JSON a bare number is a multiplicative factor and `{"add": x}` an
/// additive shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shift {
    Multiplicative(f64),
    Additive { add: f64 },
}

impl Shift {
    pub const IDENTITY: Shift = Shift::Multiplicative(1.0);

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Shift::Multiplicative(c) => c * x,
            Shift::Additive { add } => x + add,
        }
    }

    /// d(apply(x))/dx.
    #[inline]
    pub fn slope(self) -> f64 {
        match self {
            Shift::Multiplicative(c) => c,
            Shift::Additive { .. } => 1.0,
        }
    }

    pub fn is_finite(self) -> bool {
        match self {
            Shift::Multiplicative(c) => c.is_finite(),
            Shift::Additive { add } => add.is_finite(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelParameter {
    Initial,
    Volatility,
    Drift,
    MeanLevel,
    MeanReversion,
}

impl ModelParameter {
    /// Slot in the per-underlying parameter-derivative arrays.
    pub(crate) fn slot(self) -> Option<usize> {
        match self {
            ModelParameter::Initial => Some(0),
            ModelParameter::Volatility => Some(1),
            ModelParameter::Drift => Some(2),
            ModelParameter::MeanLevel => Some(3),
            ModelParameter::MeanReversion => None,
        }
    }
}

pub(crate) const PARAM_SLOTS: usize = 4;

/// Dynamics of one underlying. Both admit exact stepping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum UnderlyingModel {
    /// dX = drift·X dt + volatility·X dW
    Gbm {
        initial: f64,
        volatility: f64,
        #[serde(default)]
        drift: f64,
    },
    /// dr = mean_reversion·(mean_level − r) dt + volatility dW
    ShortRate {
        initial: f64,
        volatility: f64,
        mean_reversion: f64,
        mean_level: f64,
    },
}

impl UnderlyingModel {
    pub fn initial(&self) -> f64 {
        match *self {
            UnderlyingModel::Gbm { initial, .. } | UnderlyingModel::ShortRate { initial, .. } => {
                initial
            }
        }
    }

    pub fn volatility(&self) -> f64 {
        match *self {
            UnderlyingModel::Gbm { volatility, .. }
            | UnderlyingModel::ShortRate { volatility, .. } => volatility,
        }
    }

    fn supports(&self, parameter: ModelParameter) -> bool {
        use ModelParameter::*;
        match self {
            UnderlyingModel::Gbm { .. } => matches!(parameter, Initial | Volatility | Drift),
            UnderlyingModel::ShortRate { .. } => {
                matches!(parameter, Initial | Volatility | MeanLevel | MeanReversion)
            }
        }
    }

    fn parameter_mut(&mut self, parameter: ModelParameter) -> Option<&mut f64> {
        use ModelParameter::*;
        match (self, parameter) {
            (UnderlyingModel::Gbm { initial, .. }, Initial) => Some(initial),
            (UnderlyingModel::Gbm { volatility, .. }, Volatility) => Some(volatility),
            (UnderlyingModel::Gbm { drift, .. }, Drift) => Some(drift),
            (UnderlyingModel::ShortRate { initial, .. }, Initial) => Some(initial),
            (UnderlyingModel::ShortRate { volatility, .. }, Volatility) => Some(volatility),
            (UnderlyingModel::ShortRate { mean_level, .. }, MeanLevel) => Some(mean_level),
            (UnderlyingModel::ShortRate { mean_reversion, .. }, MeanReversion) => {
                Some(mean_reversion)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnderlyingConfig {
    pub name: String,
    #[serde(flatten)]
    pub model: UnderlyingModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterRef {
    pub underlying: String,
    pub parameter: ModelParameter,
    /// d(parameter)/d(quote).
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// A named market quote and the model parameters it moves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInstrument {
    pub name: String,
    pub parameters: Vec<ParameterRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Continuously compounded riskless rate used to value trade cashflows
    /// on equity-style underlyings.
    #[serde(default)]
    pub rate: f64,
    pub underlyings: Vec<UnderlyingConfig>,
    /// Driver correlation; identity when omitted.
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub instruments: Vec<CalibrationInstrument>,
}

impl ModelConfig {
    pub fn n_underlyings(&self) -> usize {
        self.underlyings.len()
    }

    pub fn underlying_names(&self) -> Vec<String> {
        self.underlyings.iter().map(|u| u.name.clone()).collect()
    }

    pub fn underlying_index(&self, name: &str) -> Result<usize> {
        self.underlyings
            .iter()
            .position(|u| u.name == name)
            .ok_or_else(|| Error::lookup("underlying", name))
    }

    pub fn instrument(&self, name: &str) -> Result<&CalibrationInstrument> {
        self.instruments
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| Error::lookup("instrument", name))
    }

    pub fn validate(&self) -> Result<()> {
        if self.underlyings.is_empty() {
            return Err(Error::config("model has no underlyings"));
        }
        for (i, u) in self.underlyings.iter().enumerate() {
            if self.underlyings[..i].iter().any(|v| v.name == u.name) {
                return Err(Error::config(format!("duplicate underlying {}", u.name)));
            }
            match u.model {
                UnderlyingModel::Gbm {
                    initial,
                    volatility,
                    drift,
                } => {
                    if !(initial > 0.0 && initial.is_finite()) {
                        return Err(Error::config(format!("{}: initial level must be > 0", u.name)));
                    }
                    if !(volatility >= 0.0 && volatility.is_finite()) || !drift.is_finite() {
                        return Err(Error::config(format!("{}: volatility must be >= 0", u.name)));
                    }
                }
                UnderlyingModel::ShortRate {
                    initial,
                    volatility,
                    mean_reversion,
                    mean_level,
                } => {
                    if !(volatility >= 0.0 && volatility.is_finite()) {
                        return Err(Error::config(format!("{}: volatility must be >= 0", u.name)));
                    }
                    if !(mean_reversion >= 0.0 && mean_reversion.is_finite())
                        || !initial.is_finite()
                        || !mean_level.is_finite()
                    {
                        return Err(Error::config(format!(
                            "{}: mean reversion must be >= 0 and levels finite",
                            u.name
                        )));
                    }
                }
            }
        }
        if !self.rate.is_finite() {
            return Err(Error::config("rate must be finite"));
        }
        self.correlation_factor()?;
        for (i, inst) in self.instruments.iter().enumerate() {
            if self.instruments[..i].iter().any(|o| o.name == inst.name) {
                return Err(Error::config(format!("duplicate instrument {}", inst.name)));
            }
            if inst.parameters.is_empty() {
                return Err(Error::config(format!(
                    "instrument {} maps to no model parameter",
                    inst.name
                )));
            }
            for p in &inst.parameters {
                let idx = self.underlying_index(&p.underlying).map_err(|_| {
                    Error::config(format!(
                        "instrument {} refers to unknown underlying {}",
                        inst.name, p.underlying
                    ))
                })?;
                let model = &self.underlyings[idx].model;
                if !model.supports(p.parameter) {
                    return Err(Error::config(format!(
                        "instrument {}: {:?} is not a parameter of {}",
                        inst.name, p.parameter, p.underlying
                    )));
                }
                if !p.weight.is_finite() {
                    return Err(Error::config(format!("instrument {}: weight must be finite", inst.name)));
                }
            }
        }
        Ok(())
    }

    /// Checks that every mapped parameter has an analytic pathwise derivative.
    pub(crate) fn check_differentiable(&self, instrument: &str) -> Result<&CalibrationInstrument> {
        let inst = self.instrument(instrument).map_err(|_| {
            Error::config(format!("instrument {instrument} has no parameter mapping"))
        })?;
        for p in &inst.parameters {
            if p.parameter.slot().is_none() {
                return Err(Error::Unsupported(format!(
                    "instrument {instrument}: no analytic pathwise derivative for {:?}",
                    p.parameter
                )));
            }
        }
        Ok(inst)
    }

    /// Lower-triangular factor of the correlation matrix. Accepts positive
    /// semi-definite matrices (zero pivots give zero columns).
    pub fn correlation_factor(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.n_underlyings();
        let corr = match &self.correlation {
            None => {
                return Ok((0..n)
                    .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect())
            }
            Some(c) => c,
        };
        if corr.len() != n || corr.iter().any(|row| row.len() != n) {
            return Err(Error::config(format!("correlation matrix must be {n}x{n}")));
        }
        const TOL: f64 = 1e-10;
        for i in 0..n {
            if (corr[i][i] - 1.0).abs() > TOL {
                return Err(Error::config("correlation diagonal must be 1"));
            }
            for j in 0..i {
                if !corr[i][j].is_finite() || (corr[i][j] - corr[j][i]).abs() > TOL {
                    return Err(Error::config("correlation matrix is not symmetric"));
                }
            }
        }
        let mut l = vec![vec![0.0; n]; n];
        for j in 0..n {
            let d = corr[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
            if d < -TOL {
                return Err(Error::config("correlation matrix is not positive semi-definite"));
            }
            if d <= TOL {
                for i in j + 1..n {
                    let r = corr[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                    if r.abs() > 1e-8 {
                        return Err(Error::config(
                            "correlation matrix is not positive semi-definite",
                        ));
                    }
                }
                continue;
            }
            let pivot = d.sqrt();
            l[j][j] = pivot;
            for i in j + 1..n {
                let r = corr[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                l[i][j] = r / pivot;
            }
        }
        Ok(l)
    }

    /// Copy with every parameter mapped by `instrument` moved by
    /// `weight · amount`.
    pub fn bumped(&self, instrument: &str, amount: f64) -> Result<ModelConfig> {
        let inst = self.instrument(instrument)?.clone();
        let mut out = self.clone();
        for p in &inst.parameters {
            let idx = out.underlying_index(&p.underlying)?;
            let slot = out.underlyings[idx]
                .model
                .parameter_mut(p.parameter)
                .ok_or_else(|| Error::config(format!("{:?} not in model", p.parameter)))?;
            *slot += p.weight * amount;
        }
        Ok(out)
    }
}

/// How many paths, on which dates, from which seed, and how to widen the
/// state space for regression fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n_paths: usize,
    pub dates: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub augmentation: Option<super::AugmentationSpec>,
}

/// Contents of a market JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub model: ModelConfig,
    pub simulation: SimulationSpec,
}

impl MarketConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: MarketConfig = serde_json::from_str(text).map_err(Error::from_json)?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_gbm(corr: f64) -> ModelConfig {
        ModelConfig {
            rate: 0.0,
            underlyings: vec![
                UnderlyingConfig {
                    name: "A".into(),
                    model: UnderlyingModel::Gbm {
                        initial: 100.0,
                        volatility: 0.2,
                        drift: 0.0,
                    },
                },
                UnderlyingConfig {
                    name: "B".into(),
                    model: UnderlyingModel::Gbm {
                        initial: 50.0,
                        volatility: 0.3,
                        drift: 0.0,
                    },
                },
            ],
            correlation: Some(vec![vec![1.0, corr], vec![corr, 1.0]]),
            instruments: vec![],
        }
    }

    #[test]
    fn cholesky_reproduces_correlation() {
        let l = two_gbm(0.6).correlation_factor().unwrap();
        let c01 = l[1][0] * l[0][0];
        let c11 = l[1][0] * l[1][0] + l[1][1] * l[1][1];
        assert!((c01 - 0.6).abs() < 1e-15);
        assert!((c11 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perfectly_correlated_is_accepted() {
        let l = two_gbm(1.0).correlation_factor().unwrap();
        assert_eq!(l[1][1], 0.0);
    }

    #[test]
    fn non_psd_correlation_is_rejected() {
        let mut cfg = two_gbm(0.0);
        cfg.underlyings.push(UnderlyingConfig {
            name: "C".into(),
            model: UnderlyingModel::Gbm {
                initial: 1.0,
                volatility: 0.1,
                drift: 0.0,
            },
        });
        cfg.correlation = Some(vec![
            vec![1.0, 0.9, -0.9],
            vec![0.9, 1.0, 0.9],
            vec![-0.9, 0.9, 1.0],
        ]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn instrument_without_parameters_is_rejected() {
        let mut cfg = two_gbm(0.0);
        cfg.instruments.push(CalibrationInstrument {
            name: "X".into(),
            parameters: vec![],
        });
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn shift_json_forms() {
        let m: Shift = serde_json::from_str("1.25").unwrap();
        let a: Shift = serde_json::from_str(r#"{"add": -0.01}"#).unwrap();
        assert_eq!(m.apply(2.0), 2.5);
        assert_eq!(a.apply(0.03), 0.03 - 0.01);
    }
}
