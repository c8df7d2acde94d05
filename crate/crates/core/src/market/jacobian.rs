use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, UnderlyingModel, PARAM_SLOTS};
use super::cube::{level, path_drivers, PathOrigin, ScenarioCube};
use crate::error::{Error, Result};

/// Pathwise derivatives of the underlyings with respect to calibration
/// instruments, laid out exactly like the cube they belong to.
///
/// Second derivatives are stored once per unordered instrument pair, so
/// `second(s, r)` and `second(r, s)` return the same slice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnderlyingJacobian {
    instruments: Vec<String>,
    n_paths: usize,
    n_dates: usize,
    n_underlyings: usize,
    first: Vec<Vec<f64>>,
    second: Option<Vec<Vec<f64>>>,
    cube_identity: String,
}

fn pair_index(n: usize, s: usize, r: usize) -> usize {
    let (i, j) = if s <= r { (s, r) } else { (r, s) };
    // rows of the upper triangle, row i holding n − i entries
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

impl UnderlyingJacobian {
    pub fn instruments(&self) -> &[String] {
        &self.instruments
    }

    pub fn instrument_index(&self, name: &str) -> Result<usize> {
        self.instruments
            .iter()
            .position(|i| i == name)
            .ok_or_else(|| Error::lookup("instrument", name))
    }

    pub fn has_second_order(&self) -> bool {
        self.second.is_some()
    }

    pub fn cube_identity(&self) -> &str {
        &self.cube_identity
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// `∂x/∂s` for every (date, path, underlying).
    pub fn first(&self, s: usize) -> &[f64] {
        &self.first[s]
    }

    #[inline]
    pub fn dx(&self, s: usize, k: usize, j: usize) -> &[f64] {
        let n = self.n_underlyings;
        let start = (k * self.n_paths + j) * n;
        &self.first[s][start..start + n]
    }

    /// `∂²x/∂s∂r` for every (date, path, underlying).
    pub fn second(&self, s: usize, r: usize) -> Result<&[f64]> {
        let second = self
            .second
            .as_ref()
            .ok_or_else(|| Error::config("jacobian was built without second order"))?;
        Ok(&second[pair_index(self.instruments.len(), s, r)])
    }

    #[inline]
    pub fn d2x(&self, s: usize, r: usize, k: usize, j: usize) -> &[f64] {
        let n = self.n_underlyings;
        let start = (k * self.n_paths + j) * n;
        let all = &self.second.as_ref().expect("second order present")
            [pair_index(self.instruments.len(), s, r)];
        &all[start..start + n]
    }
}

/// Derivatives of one underlying level w.r.t. its own parameters, by slot
/// (initial, volatility, drift, mean level).
fn parameter_derivatives(
    model: &UnderlyingModel,
    t: f64,
    driver: f64,
    x: f64,
) -> ([f64; PARAM_SLOTS], [[f64; PARAM_SLOTS]; PARAM_SLOTS]) {
    let mut d1 = [0.0; PARAM_SLOTS];
    let mut d2 = [[0.0; PARAM_SLOTS]; PARAM_SLOTS];
    match *model {
        UnderlyingModel::Gbm {
            initial,
            volatility,
            ..
        } => {
            let a = driver - volatility * t;
            d1[0] = x / initial;
            d1[1] = x * a;
            d1[2] = x * t;
            d2[1][1] = x * (a * a - t);
            d2[0][1] = x * a / initial;
            d2[0][2] = x * t / initial;
            d2[1][2] = x * t * a;
            d2[2][2] = x * t * t;
            d2[1][0] = d2[0][1];
            d2[2][0] = d2[0][2];
            d2[2][1] = d2[1][2];
        }
        UnderlyingModel::ShortRate { mean_reversion, .. } => {
            let decay = (-mean_reversion * t).exp();
            d1[0] = decay;
            d1[1] = driver;
            d1[3] = -(-mean_reversion * t).exp_m1();
        }
    }
    (d1, d2)
}

/// Analytic pathwise Jacobian of the cube with respect to `instruments`.
///
/// `order` 1 computes `∂x/∂s` only; order 2 adds `∂²x/∂s∂r` for every pair.
/// The cube must have been generated from `config`; its simulated paths are
/// re-derived from their random streams and checked bit-for-bit.
pub fn underlying_jacobian(
    cube: &ScenarioCube,
    config: &ModelConfig,
    instruments: &[String],
    order: u8,
) -> Result<UnderlyingJacobian> {
    if !(1..=2).contains(&order) {
        return Err(Error::config("sensitivity order must be 1 or 2"));
    }
    config.validate()?;
    if cube.underlyings() != config.underlying_names().as_slice() {
        return Err(Error::StateMismatch(
            "cube underlyings differ from the model config".into(),
        ));
    }
    // (underlying, slot, weight) per instrument
    let maps: Vec<Vec<(usize, usize, f64)>> = instruments
        .iter()
        .map(|name| {
            let inst = config.check_differentiable(name)?;
            inst.parameters
                .iter()
                .map(|p| {
                    Ok((
                        config.underlying_index(&p.underlying)?,
                        p.parameter.slot().expect("checked differentiable"),
                        p.weight,
                    ))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = cube.n_underlyings();
    let n_inst = instruments.len();
    let n_pairs = n_inst * (n_inst + 1) / 2;
    let n_dates = cube.n_dates();
    let n_paths = cube.n_paths();
    let factor = config.correlation_factor()?;
    let dates = cube.dates();

    // Per simulated path: first [s][k·n+b], second [pair][k·n+b].
    type PathJac = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let per_path: Vec<PathJac> = (0..cube.n_original())
        .into_par_iter()
        .map(|j| -> Result<PathJac> {
            let drivers = path_drivers(config, &factor, dates, cube.seed(), j);
            let mut first = vec![vec![0.0; n_dates * n]; n_inst];
            let mut second = if order == 2 {
                vec![vec![0.0; n_dates * n]; n_pairs]
            } else {
                Vec::new()
            };
            for (k, &t) in dates.iter().enumerate() {
                for b in 0..n {
                    let model = &config.underlyings[b].model;
                    let x = cube.state(k, j)[b];
                    if level(model, t, drivers[k * n + b]).to_bits() != x.to_bits() {
                        return Err(Error::StateMismatch(
                            "cube was not generated from this model config".into(),
                        ));
                    }
                    let (d1, d2) = parameter_derivatives(model, t, drivers[k * n + b], x);
                    for (s, map) in maps.iter().enumerate() {
                        let mut acc = 0.0;
                        for &(ub, slot, w) in map {
                            if ub == b {
                                acc += w * d1[slot];
                            }
                        }
                        first[s][k * n + b] = acc;
                    }
                    if order == 2 {
                        for s in 0..n_inst {
                            for r in s..n_inst {
                                let mut acc = 0.0;
                                for &(ub, p, w) in &maps[s] {
                                    if ub != b {
                                        continue;
                                    }
                                    for &(vb, q, v) in &maps[r] {
                                        if vb == b {
                                            acc += w * v * d2[p][q];
                                        }
                                    }
                                }
                                second[pair_index(n_inst, s, r)][k * n + b] = acc;
                            }
                        }
                    }
                }
            }
            Ok((first, second))
        })
        .collect::<Result<_>>()?;

    let mut first = vec![vec![0.0; n_dates * n_paths * n]; n_inst];
    let mut second = if order == 2 {
        Some(vec![vec![0.0; n_dates * n_paths * n]; n_pairs])
    } else {
        None
    };
    for j in 0..n_paths {
        let (src, slopes): (usize, Vec<f64>) = match cube.origin(j) {
            PathOrigin::Simulated => (j, vec![1.0; n]),
            PathOrigin::Displaced {
                source,
                displacement,
            } => (
                source,
                cube.displacement_shifts(displacement)
                    .iter()
                    .map(|s| s.slope())
                    .collect(),
            ),
        };
        let (pf, ps) = &per_path[src];
        for k in 0..n_dates {
            for b in 0..n {
                let dst = (k * n_paths + j) * n + b;
                for s in 0..n_inst {
                    first[s][dst] = slopes[b] * pf[s][k * n + b];
                }
                if let Some(second) = second.as_mut() {
                    for p in 0..n_pairs {
                        second[p][dst] = slopes[b] * ps[p][k * n + b];
                    }
                }
            }
        }
    }

    Ok(UnderlyingJacobian {
        instruments: instruments.to_vec(),
        n_paths,
        n_dates,
        n_underlyings: n,
        first,
        second,
        cube_identity: cube.identity().to_string(),
    })
}
