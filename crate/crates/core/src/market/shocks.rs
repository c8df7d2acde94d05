use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::Shift;
use crate::error::{Error, Result};

/// One entry of a shock file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShockScenario {
    pub name: String,
    /// Underlyings not listed are left unchanged.
    #[serde(default)]
    pub displacements: BTreeMap<String, Shift>,
    #[serde(default)]
    pub weight: Option<f64>,
}

/// A parsed and validated shock file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ShockScenario>", into = "Vec<ShockScenario>")]
pub struct ShockSpec {
    scenarios: Vec<ShockScenario>,
    weights: Vec<f64>,
}

fn line_of(text: &str, needle: &str) -> usize {
    let quoted = format!("\"{needle}\"");
    text.lines()
        .position(|l| l.contains(&quoted))
        .map_or(1, |i| i + 1)
}

impl ShockSpec {
    /// Parses a shock file: a JSON array of `{name, displacements, weight?}`.
    /// Every failure is reported with the line it was found on.
    pub fn from_json(text: &str) -> Result<Self> {
        let scenarios: Vec<ShockScenario> = serde_json::from_str(text).map_err(Error::from_json)?;
        let fail = |name: &str, message: String| Error::Parse {
            line: line_of(text, name),
            message,
        };
        for s in &scenarios {
            if let Some(w) = s.weight {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(fail(&s.name, format!("scenario {}: weight must be >= 0", s.name)));
                }
            }
            if s.displacements.values().any(|d| !d.is_finite()) {
                return Err(fail(&s.name, format!("scenario {}: non-finite displacement", s.name)));
            }
        }
        Self::new(scenarios).map_err(|e| match e {
            Error::Config(message) => Error::Parse {
                line: line_of(text, "name"),
                message,
            },
            other => other,
        })
    }

    pub fn new(scenarios: Vec<ShockScenario>) -> Result<Self> {
        if scenarios.len() < 2 {
            return Err(Error::config("a shock set needs at least 2 scenarios"));
        }
        let raw: Vec<f64> = scenarios.iter().map(|s| s.weight.unwrap_or(1.0)).collect();
        if raw.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("shock weights must be >= 0"));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::config("shock weights sum to zero"));
        }
        let uniform = raw.iter().all(|&w| w == raw[0]);
        let n = raw.len() as f64;
        let weights = raw
            .iter()
            .map(|w| if uniform { 1.0 / n } else { w / total })
            .collect();
        Ok(Self { scenarios, weights })
    }

    /// `n` identity scenarios with uniform weight.
    pub fn uniform_identity(n: usize) -> Result<Self> {
        Self::new(
            (0..n)
                .map(|i| ShockScenario {
                    name: format!("s{i}"),
                    displacements: BTreeMap::new(),
                    weight: None,
                })
                .collect(),
        )
    }

    pub fn scenarios(&self) -> &[ShockScenario] {
        &self.scenarios
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// True when every scenario carries the same weight.
    pub fn is_uniform(&self) -> bool {
        self.weights.iter().all(|&w| w == self.weights[0])
    }

    /// Shifts per scenario, ordered like `underlyings`.
    pub fn resolve(&self, underlyings: &[String]) -> Result<Vec<Vec<Shift>>> {
        self.scenarios
            .iter()
            .map(|s| {
                if let Some(extra) = s.displacements.keys().find(|k| !underlyings.contains(k)) {
                    return Err(Error::lookup("underlying", extra.clone()));
                }
                Ok(underlyings
                    .iter()
                    .map(|u| s.displacements.get(u).copied().unwrap_or(Shift::IDENTITY))
                    .collect())
            })
            .collect()
    }
}

impl TryFrom<Vec<ShockScenario>> for ShockSpec {
    type Error = Error;

    fn try_from(scenarios: Vec<ShockScenario>) -> Result<Self> {
        Self::new(scenarios)
    }
}

impl From<ShockSpec> for Vec<ShockScenario> {
    fn from(spec: ShockSpec) -> Self {
        spec.scenarios
    }
}

/// Shock scenarios applied to one base state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockSet {
    base: Vec<f64>,
    shifts: Vec<Vec<Shift>>,
    states: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl ShockSet {
    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `∂(shocked x_b)/∂(base x_b)` for scenario `i`.
    pub fn slopes(&self, i: usize) -> Vec<f64> {
        self.shifts[i].iter().map(|s| s.slope()).collect()
    }
}

/// Applies every scenario of `spec` to `base`.
pub fn generate_shock_scenarios(
    base: &[f64],
    underlyings: &[String],
    spec: &ShockSpec,
) -> Result<ShockSet> {
    if base.len() != underlyings.len() {
        return Err(Error::config("base state dimension does not match underlyings"));
    }
    let shifts = spec.resolve(underlyings)?;
    let states = shifts
        .iter()
        .map(|row| row.iter().zip(base).map(|(s, &x)| s.apply(x)).collect())
        .collect();
    Ok(ShockSet {
        base: base.to_vec(),
        shifts,
        states,
        weights: spec.weights().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["S".into(), "r".into()]
    }

    #[test]
    fn uniform_weights_are_exact() {
        assert!(ShockSpec::uniform_identity(5).unwrap().weights().iter().all(|&w| w == 0.2));
        let big = ShockSpec::uniform_identity(2500).unwrap();
        assert!(big.weights().iter().all(|&w| w == 1.0 / 2500.0));
    }

    #[test]
    fn identity_shock_keeps_base() {
        let text = r#"[
            {"name": "flat", "displacements": {"S": 1.0, "r": 1.0}},
            {"name": "down", "displacements": {"S": 0.8, "r": {"add": -0.01}}, "weight": 3}
        ]"#;
        let spec = ShockSpec::from_json(text).unwrap();
        let set = generate_shock_scenarios(&[100.0, 0.02], &names(), &spec).unwrap();
        assert_eq!(set.state(0), &[100.0, 0.02]);
        assert_eq!(set.state(1), &[80.0, 0.02 - 0.01]);
        assert_eq!(set.weights(), &[0.25, 0.75]);
        assert_eq!(set.slopes(1), vec![0.8, 1.0]);
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = "[\n {\"name\": \"a\"},\n {\"name\": \"b\",, }\n]";
        match ShockSpec::from_json(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_weight_reports_its_line() {
        let text = "[\n {\"name\": \"a\"},\n {\"name\": \"b\", \"weight\": -1}\n]";
        match ShockSpec::from_json(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_scenario_is_rejected() {
        assert!(ShockSpec::from_json(r#"[{"name": "only"}]"#).is_err());
    }
}
