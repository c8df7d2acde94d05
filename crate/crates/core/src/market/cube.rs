use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{MarketConfig, ModelConfig, Shift, UnderlyingModel};
use crate::error::{Error, Result};
use crate::numeric::{content_hash, hash_f64_rows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    RiskNeutral,
    HistoricalShock,
}

/// Where a path of a cube came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PathOrigin {
    Simulated,
    /// Copy of simulated path `source` under displacement number `displacement`.
    Displaced { source: usize, displacement: usize },
}

/// One displacement of the augmentation grid: the same shift for every
/// underlying, or one shift per underlying by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Displacement {
    Uniform(Shift),
    PerUnderlying(BTreeMap<String, Shift>),
}

impl Displacement {
    fn resolve(&self, underlyings: &[String]) -> Result<Vec<Shift>> {
        match self {
            Displacement::Uniform(s) => {
                if !s.is_finite() {
                    return Err(Error::config("displacement must be finite"));
                }
                Ok(vec![*s; underlyings.len()])
            }
            Displacement::PerUnderlying(map) => {
                if let Some(extra) = map.keys().find(|k| !underlyings.contains(k)) {
                    return Err(Error::config(format!(
                        "displacement names unknown underlying {extra}"
                    )));
                }
                underlyings
                    .iter()
                    .map(|u| match map.get(u) {
                        Some(s) if s.is_finite() => Ok(*s),
                        Some(_) => Err(Error::config("displacement must be finite")),
                        None => Err(Error::config(format!(
                            "displacement does not cover underlying {u}"
                        ))),
                    })
                    .collect()
            }
        }
    }
}

/// Direct augmentation: the first `subsample` simulated paths are copied once
/// per displacement and appended to the cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub subsample: usize,
    pub displacements: Vec<Displacement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AppliedAugmentation {
    subsample: usize,
    shifts: Vec<Vec<Shift>>,
}

/// Values of the underlyings per (date, path, underlying).
///
/// Storage is date-major so that the states of one date are contiguous:
/// the state of path `j` at date `k` is `values[(k·n_paths + j)·n_und ..][..n_und]`.
/// Paths `0..n_original()` are the simulated ones; augmentation appends
/// displaced copies after them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCube {
    underlyings: Vec<String>,
    dates: Vec<f64>,
    n_paths: usize,
    n_original: usize,
    values: Vec<f64>,
    measure: Measure,
    seed: u64,
    augmentation: Option<AppliedAugmentation>,
    identity: String,
}

fn check_dates(dates: &[f64]) -> Result<()> {
    if dates.is_empty() {
        return Err(Error::config("date grid is empty"));
    }
    if dates.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::config("dates must be finite year fractions >= 0"));
    }
    if dates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("dates must be strictly increasing"));
    }
    Ok(())
}

impl ScenarioCube {
    /// Builds a cube from explicit values laid out as described on the type.
    pub fn from_values(
        underlyings: Vec<String>,
        dates: Vec<f64>,
        n_paths: usize,
        values: Vec<f64>,
        measure: Measure,
        seed: u64,
    ) -> Result<Self> {
        check_dates(&dates)?;
        if n_paths == 0 || underlyings.is_empty() {
            return Err(Error::config("cube needs at least one path and one underlying"));
        }
        if values.len() != dates.len() * n_paths * underlyings.len() {
            return Err(Error::config("cube value count does not match its shape"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("cube contains non-finite values".into()));
        }
        let identity = hash_f64_rows("cube-values", [dates.as_slice(), values.as_slice()]);
        Ok(Self {
            underlyings,
            dates,
            n_paths,
            n_original: n_paths,
            values,
            measure,
            seed,
            augmentation: None,
            identity,
        })
    }

    pub fn underlyings(&self) -> &[String] {
        &self.underlyings
    }

    pub fn dates(&self) -> &[f64] {
        &self.dates
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Number of simulated paths (the prefix preserved by augmentation).
    pub fn n_original(&self) -> usize {
        self.n_original
    }

    pub fn n_underlyings(&self) -> usize {
        self.underlyings.len()
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Content hash of everything that determines the cube.
    pub fn identity(&self) -> &str {
        &self.identity
    }

    #[inline]
    pub fn state(&self, k: usize, j: usize) -> &[f64] {
        let n = self.underlyings.len();
        let start = (k * self.n_paths + j) * n;
        &self.values[start..start + n]
    }

    /// All states of date `k`, path-major.
    pub fn date_states(&self, k: usize) -> &[f64] {
        let width = self.n_paths * self.underlyings.len();
        &self.values[k * width..(k + 1) * width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn origin(&self, j: usize) -> PathOrigin {
        match &self.augmentation {
            Some(aug) if j >= self.n_original => {
                let offset = j - self.n_original;
                PathOrigin::Displaced {
                    source: offset % aug.subsample,
                    displacement: offset / aug.subsample,
                }
            }
            _ => PathOrigin::Simulated,
        }
    }

    pub(crate) fn displacement_shifts(&self, displacement: usize) -> &[Shift] {
        &self
            .augmentation
            .as_ref()
            .expect("cube is augmented")
            .shifts[displacement]
    }
}

/// Per-date cumulative drivers of one path, layout `[k·n_und + b]`.
///
/// For a lognormal underlying the driver is the Brownian value `W(t_k)`; for
/// a short rate it is the Ornstein-Uhlenbeck integral
/// `G(t_k) = ∫ e^{−κ(t_k−u)} dW(u)`, stepped exactly. Values follow in closed
/// form from the drivers, so cube generation and pathwise derivatives see
/// the same numbers.
pub(crate) fn path_drivers(
    model: &ModelConfig,
    factor: &[Vec<f64>],
    dates: &[f64],
    seed: u64,
    path: usize,
) -> Vec<f64> {
    let n = model.n_underlyings();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    let mut drivers = vec![0.0; dates.len() * n];
    let mut current = vec![0.0; n];
    let mut eps = vec![0.0; n];
    let mut prev_t = 0.0;
    for (k, &t) in dates.iter().enumerate() {
        let dt = t - prev_t;
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        for b in 0..n {
            let z: f64 = (0..=b).map(|c| factor[b][c] * eps[c]).sum();
            current[b] = match model.underlyings[b].model {
                UnderlyingModel::Gbm { .. } => current[b] + dt.sqrt() * z,
                UnderlyingModel::ShortRate { mean_reversion, .. } => {
                    let decay = (-mean_reversion * dt).exp();
                    current[b] * decay + ou_step_sd(mean_reversion, dt) * z
                }
            };
            drivers[k * n + b] = current[b];
        }
        prev_t = t;
    }
    drivers
}

/// Standard deviation of the OU integral over a step of length `dt`.
fn ou_step_sd(kappa: f64, dt: f64) -> f64 {
    if kappa * dt < 1e-12 {
        return dt.sqrt();
    }
    (-(-2.0 * kappa * dt).exp_m1() / (2.0 * kappa)).sqrt()
}

/// Underlying level at time `t` given its driver.
#[inline]
pub(crate) fn level(model: &UnderlyingModel, t: f64, driver: f64) -> f64 {
    match *model {
        UnderlyingModel::Gbm {
            initial,
            volatility,
            drift,
        } => initial * ((drift - 0.5 * volatility * volatility) * t + volatility * driver).exp(),
        UnderlyingModel::ShortRate {
            initial,
            volatility,
            mean_reversion,
            mean_level,
        } => {
            let decay = (-mean_reversion * t).exp();
            initial * decay + mean_level * (1.0 - decay) + volatility * driver
        }
    }
}

/// Simulates `n_paths` paths on `dates`.
///
/// Every path draws from its own ChaCha stream (`seed`, stream = path
/// index), so the cube is bit-identical for any thread count.
pub fn generate_scenarios(
    config: &ModelConfig,
    n_paths: usize,
    dates: &[f64],
    seed: u64,
) -> Result<ScenarioCube> {
    config.validate()?;
    check_dates(dates)?;
    if n_paths == 0 {
        return Err(Error::config("n_paths must be >= 1"));
    }
    let factor = config.correlation_factor()?;
    let n = config.n_underlyings();
    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|j| {
            let drivers = path_drivers(config, &factor, dates, seed, j);
            let mut out = vec![0.0; dates.len() * n];
            for (k, &t) in dates.iter().enumerate() {
                for b in 0..n {
                    out[k * n + b] = level(&config.underlyings[b].model, t, drivers[k * n + b]);
                }
            }
            out
        })
        .collect();
    let mut values = vec![0.0; dates.len() * n_paths * n];
    for (j, path) in per_path.iter().enumerate() {
        for k in 0..dates.len() {
            let dst = (k * n_paths + j) * n;
            values[dst..dst + n].copy_from_slice(&path[k * n..(k + 1) * n]);
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("simulation produced non-finite values".into()));
    }
    let identity = content_hash(&(config, n_paths, dates, seed));
    Ok(ScenarioCube {
        underlyings: config.underlying_names(),
        dates: dates.to_vec(),
        n_paths,
        n_original: n_paths,
        values,
        measure: Measure::RiskNeutral,
        seed,
        augmentation: None,
        identity,
    })
}

/// Appends displaced copies of the first `subsample` paths, one block per
/// displacement. An empty displacement list returns the cube unchanged.
pub fn augment_state_space(cube: &ScenarioCube, spec: &AugmentationSpec) -> Result<ScenarioCube> {
    if spec.displacements.is_empty() {
        return Ok(cube.clone());
    }
    if cube.augmentation.is_some() {
        return Err(Error::config("cube is already augmented"));
    }
    if spec.subsample == 0 || spec.subsample > cube.n_paths {
        return Err(Error::config(format!(
            "augmentation subsample must be in 1..={}",
            cube.n_paths
        )));
    }
    let shifts: Vec<Vec<Shift>> = spec
        .displacements
        .iter()
        .map(|d| d.resolve(&cube.underlyings))
        .collect::<Result<_>>()?;
    let n = cube.n_underlyings();
    let m = spec.subsample;
    let n_new = cube.n_paths + shifts.len() * m;
    let mut values = Vec::with_capacity(cube.n_dates() * n_new * n);
    for k in 0..cube.n_dates() {
        values.extend_from_slice(cube.date_states(k));
        for shift in &shifts {
            for j in 0..m {
                let state = cube.state(k, j);
                values.extend(state.iter().zip(shift).map(|(&x, s)| s.apply(x)));
            }
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("augmentation produced non-finite values".into()));
    }
    let identity = content_hash(&(cube.identity.as_str(), m, &shifts));
    Ok(ScenarioCube {
        underlyings: cube.underlyings.clone(),
        dates: cube.dates.clone(),
        n_paths: n_new,
        n_original: cube.n_original,
        values,
        measure: cube.measure,
        seed: cube.seed,
        augmentation: Some(AppliedAugmentation { subsample: m, shifts }),
        identity,
    })
}

/// Simulates and, if configured, augments the cube described by a market file.
pub fn generate_market(config: &MarketConfig) -> Result<ScenarioCube> {
    let sim = &config.simulation;
    let cube = generate_scenarios(&config.model, sim.n_paths, &sim.dates, sim.seed)?;
    match &sim.augmentation {
        Some(spec) => augment_state_space(&cube, spec),
        None => Ok(cube),
    }
}
