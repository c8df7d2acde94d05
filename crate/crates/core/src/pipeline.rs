//! File-driven runs: loading inputs, computing a book, writing reports,
//! what-if updates against saved state, and the oracle check.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{dot, BasisConfig, BasisSpec};
use crate::credit::{CreditCurve, SpreadCurve};
use crate::error::{Error, Result};
use crate::market::{generate_market, generate_shock_scenarios, MarketConfig, ShockSpec};
use crate::numeric::{within_ulps, NeumaierSum};
use crate::oracle::{brute_force_xva, bump_gamma, bump_sensitivity, OracleConfig};
use crate::regression::{DesignFactorizations, FitPaths};
use crate::report::{write_incremental, write_reports};
use crate::state::{
    incremental_update, sensitivity_name, Adjustment, Book, BookConfig, BookWork, Engine, IncrementalReport,
    MarginConfig, SensitivityRequest, SCHEMA_VERSION,
};
use crate::trades::{fit_portfolio, Portfolio, Trade, TradeType};
use crate::xva::{
    compute_mva, lifetime_margins, path_values, set_average, xva_on_sign_sets, CreditRegressions, CreditWeights,
    MarginMeasure, MvaDiscounting, SignSets, XvaKind,
};

/// Margin settings of a run; the scenarios come from the shock file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginSettings {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub measure: MarginMeasure,
    #[serde(default)]
    pub spread: SpreadCurve,
    #[serde(default)]
    pub discounting: MvaDiscounting,
}

fn default_alpha() -> f64 {
    0.975
}

impl Default for MarginSettings {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            measure: MarginMeasure::default(),
            spread: SpreadCurve::default(),
            discounting: MvaDiscounting::default(),
        }
    }
}

/// Contents of a run file. Relative paths are resolved against the
/// directory of the run file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: PathBuf,
    pub portfolio: PathBuf,
    pub credit: PathBuf,
    #[serde(default)]
    pub shocks: Option<PathBuf>,
    /// JSON object mapping trade id to group name.
    #[serde(default)]
    pub grouping: Option<PathBuf>,
    /// JSON object mapping party (`B`, `C`) to LGD/PD regressions.
    #[serde(default)]
    pub lgd_pd: Option<PathBuf>,
    /// Quadratic with cross terms when omitted.
    #[serde(default)]
    pub basis: Option<BasisConfig>,
    pub measures: Vec<Adjustment>,
    #[serde(default)]
    pub margin: Option<MarginSettings>,
    #[serde(default)]
    pub sensitivities: Vec<SensitivityRequest>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Overrides the seed of the market file.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Where to save the computed book.
    #[serde(default)]
    pub state: Option<PathBuf>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn read(field: &str, path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::config(format!("{field}: cannot read {}: {e}", path.display())))
}

fn in_field(field: &str, err: Error) -> Error {
    match err {
        Error::Config(m) => Error::Config(format!("{field}: {m}")),
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{field}: {message}"),
        },
        other => other,
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(Error::from_json)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.market);
        resolve(&mut cfg.portfolio);
        resolve(&mut cfg.credit);
        resolve(&mut cfg.output);
        for p in [&mut cfg.shocks, &mut cfg.grouping, &mut cfg.lgd_pd, &mut cfg.state].into_iter().flatten() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read("config", path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks that every referenced file exists; reports all missing ones.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let files = [
            ("market", Some(&self.market)),
            ("portfolio", Some(&self.portfolio)),
            ("credit", Some(&self.credit)),
            ("shocks", self.shocks.as_ref()),
            ("grouping", self.grouping.as_ref()),
            ("lgd_pd", self.lgd_pd.as_ref()),
        ];
        for (field, path) in files {
            if let Some(p) = path {
                if !p.is_file() {
                    problems.push(format!("{field}: file {} does not exist", p.display()));
                }
            }
        }
        let wants_margin = self.measures.contains(&Adjustment::Mva)
            || self.sensitivities.iter().any(|r| r.measure == Adjustment::Mva);
        if wants_margin && self.shocks.is_none() {
            problems.push("shocks: mva needs a shock file".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Parses every input file into a book configuration and a portfolio.
    pub fn load_inputs(&self) -> Result<(BookConfig, Vec<Trade>)> {
        self.validate()?;
        let mut market = MarketConfig::from_json(&read("market", &self.market)?).map_err(|e| in_field("market", e))?;
        if let Some(seed) = self.seed {
            market.simulation.seed = seed;
        }
        let portfolio =
            Portfolio::from_json(&read("portfolio", &self.portfolio)?).map_err(|e| in_field("portfolio", e))?;
        let credit = CreditCurve::from_json(&read("credit", &self.credit)?).map_err(|e| in_field("credit", e))?;
        let basis = match &self.basis {
            Some(b) => BasisSpec::new(b.clone()).map_err(|e| in_field("basis", e))?,
            None => BasisSpec::quadratic(market.model.n_underlyings()),
        };
        let margin = match &self.shocks {
            Some(path) => {
                let shocks = ShockSpec::from_json(&read("shocks", path)?).map_err(|e| in_field("shocks", e))?;
                let s = self.margin.clone().unwrap_or_default();
                Some(MarginConfig {
                    shocks,
                    alpha: s.alpha,
                    measure: s.measure,
                    spread: s.spread,
                    discounting: s.discounting,
                })
            }
            None => None,
        };
        let grouping = match &self.grouping {
            Some(p) => Some(
                serde_json::from_str::<BTreeMap<String, String>>(&read("grouping", p)?)
                    .map_err(|e| in_field("grouping", Error::from_json(e)))?,
            ),
            None => None,
        };
        let lgd_pd = match &self.lgd_pd {
            Some(p) => Some(
                serde_json::from_str::<CreditRegressions>(&read("lgd_pd", p)?)
                    .map_err(|e| in_field("lgd_pd", Error::from_json(e)))?,
            ),
            None => None,
        };
        let config = BookConfig {
            market,
            basis,
            credit,
            lgd_pd,
            measures: self.measures.clone(),
            margin,
            sensitivities: self.sensitivities.clone(),
            grouping,
        };
        config.validate()?;
        portfolio.validate(&config.market.model).map_err(|e| in_field("portfolio", e))?;
        Ok((config, portfolio.trades))
    }
}

/// Exclusive lock on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".xva.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(std::io::Error::new(
                e.kind(),
                format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )
            .into()),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub struct RunOutcome {
    pub book: Book,
    pub work: BookWork,
    pub files: Vec<PathBuf>,
}

/// Computes the book of a run and writes its reports (and state, if
/// requested).
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let (book_config, trades) = config.load_inputs()?;
    let _lock = OutputLock::acquire(&config.output)?;
    let engine = Engine::new(&book_config)?;
    let (book, work) = Book::build(&engine, &book_config, trades)?;
    let mut files = write_reports(&book, &work, &config.output)?;
    if let Some(state) = &config.state {
        book.save(state)?;
        files.push(state.clone());
    }
    Ok(RunOutcome { book, work, files })
}

pub struct WhatIfOutcome {
    pub book: Book,
    pub report: IncrementalReport,
    pub files: Vec<PathBuf>,
}

/// Adds the trades of `delta` to the book saved at `state` and writes the
/// reports of the merged book plus `incremental_report.json`. Totals in
/// the incremental report are restricted to `measures` (all when empty).
pub fn whatif(
    state: &Path,
    delta: &Path,
    measures: &[Adjustment],
    output: &Path,
    save_state: Option<&Path>,
) -> Result<WhatIfOutcome> {
    let book = Book::load(state)?;
    for m in measures {
        if !book.config.measures.contains(m) {
            return Err(Error::config(format!(
                "measures: {} was not computed in the saved state",
                m.name()
            )));
        }
    }
    let delta = Portfolio::from_json(&read("delta", delta)?).map_err(|e| in_field("delta", e))?;
    let _lock = OutputLock::acquire(output)?;
    let engine = Engine::new(&book.config)?;
    let (updated, mut report) = incremental_update(&engine, &book, &delta.trades)?;
    if !measures.is_empty() {
        let keep = |name: &str| {
            let head = name.split(':').next().unwrap_or_default();
            measures.iter().any(|m| m.name() == head)
        };
        report.before.retain(|k, _| keep(k));
        report.after.retain(|k, _| keep(k));
        report.allocation_changes.retain(|c| keep(&c.measure));
    }
    let mut files = write_incremental(&updated, &report, output)?;
    if let Some(path) = save_state {
        updated.save(path)?;
        files.push(path.to_path_buf());
    }
    Ok(WhatIfOutcome {
        book: updated,
        report,
        files,
    })
}

/// A whole computation as a function of instrument bumps, for
/// finite-difference checks of the analytic sensitivities.
///
/// Each evaluation moves the model parameters, regenerates the cube from
/// the same random streams, keeps the regression coefficients of `base`
/// (or refits them when `refit` is set) and recomputes the measure on the
/// conditioning sets of `base` when `frozen_sets` is set.
pub struct BumpPipeline<'a> {
    pub config: &'a BookConfig,
    pub trades: &'a [Trade],
    pub base: &'a Book,
    pub oracle: OracleConfig,
}

impl BumpPipeline<'_> {
    pub fn evaluate(&self, measure: Adjustment, bumps: &[(&str, f64)]) -> Result<f64> {
        let mut market = self.config.market.clone();
        for (s, amount) in bumps {
            market.model = market.model.bumped(s, *amount)?;
        }
        if !self.oracle.common_random_numbers {
            let salt = bumps.iter().fold(0u64, |acc, (_, a)| acc.rotate_left(17) ^ a.to_bits());
            market.simulation.seed ^= salt;
        }
        let cube = generate_market(&market)?;
        let basis = &self.config.basis;
        let coefficients = if self.oracle.refit {
            let facts = DesignFactorizations::build(&cube, basis, &FitPaths::All)?;
            let target_model = if self.oracle.reprice_targets {
                &market.model
            } else {
                &self.config.market.model
            };
            fit_portfolio(self.trades, target_model, &cube, &facts)?.total_coefficients()
        } else {
            self.base.regressions.total_coefficients()
        };
        let values = path_values(&coefficients, basis, &cube)?;
        let dates = cube.dates();
        match measure.xva() {
            Some(kind) => {
                let party = kind.party();
                let regression = self.config.lgd_pd.as_ref().and_then(|r| r.get(&party));
                let weights = CreditWeights::new(&self.config.credit, party, regression, basis, dates)?;
                let multipliers = weights.multipliers(&cube);
                let fresh;
                let sets = if self.oracle.frozen_sets {
                    &self.base.results.sets
                } else {
                    fresh = SignSets::new(&values, dates)?;
                    &fresh
                };
                Ok(xva_on_sign_sets(kind, &values, sets, &weights, multipliers.as_ref()).total)
            }
            None => {
                let mc = self
                    .config
                    .margin
                    .as_ref()
                    .ok_or_else(|| Error::config("mva needs a margin section"))?;
                let margins = if self.oracle.frozen_sets {
                    let frozen = self
                        .base
                        .results
                        .margin
                        .as_ref()
                        .ok_or_else(|| Error::config("base book has no margins"))?;
                    frozen_margins(&coefficients, basis, &cube, &mc.shocks, &frozen.sets)?
                } else {
                    lifetime_margins(&coefficients, basis, &cube, &mc.shocks, mc.alpha, mc.measure)?.margins
                };
                Ok(compute_mva(&margins, dates, &mc.spread, &self.config.credit, mc.discounting)?.total)
            }
        }
    }

    pub fn delta(&self, measure: Adjustment, s: &str) -> Result<f64> {
        bump_sensitivity(|h| self.evaluate(measure, &[(s, h)]), self.oracle.h)
    }

    pub fn gamma(&self, measure: Adjustment, s: &str, r: &str) -> Result<f64> {
        bump_gamma(|a, b| self.evaluate(measure, &[(s, a), (r, b)]), self.oracle.h)
    }
}

/// Expected margin per date with the shock selection fixed to `sets`.
fn frozen_margins(
    coefficients: &[Vec<f64>],
    basis: &BasisSpec,
    cube: &crate::market::ScenarioCube,
    spec: &ShockSpec,
    sets: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let n = cube.n_original();
    let values: Vec<f64> = (0..cube.n_dates() * n)
        .into_par_iter()
        .map(|idx| {
            let (k, j) = (idx / n, idx % n);
            let set = &sets[idx];
            let shocks = generate_shock_scenarios(cube.state(k, j), cube.underlyings(), spec)?;
            let base = dot(&coefficients[k], &basis.eval(shocks.base())?);
            let mut losses = vec![0.0; shocks.len()];
            for &m in set {
                losses[m] = base - dot(&coefficients[k], &basis.eval(shocks.state(m))?);
            }
            Ok(set_average(&losses, set, shocks.weights()))
        })
        .collect::<Result<_>>()?;
    Ok(values
        .chunks(n)
        .map(|row| {
            let s: NeumaierSum = row.iter().copied().collect();
            s.value() / n as f64
        })
        .collect())
}

/// One comparison of the oracle check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub computed: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub schema_version: u32,
    pub checks: Vec<OracleCheck>,
    pub passed: bool,
}

fn check(name: String, computed: f64, reference: f64, tolerance: f64) -> OracleCheck {
    OracleCheck {
        passed: (computed - reference).abs() <= tolerance,
        name,
        computed,
        reference,
        tolerance,
        note: None,
    }
}

/// Compares a run against the brute-force references: pathwise
/// adjustments from closed forms, the FVA identity, allocation exactness
/// and bumped sensitivities.
pub fn oracle_check(config: &RunConfig, oracle: &OracleConfig) -> Result<OracleCheckReport> {
    oracle.validate()?;
    let (book_config, trades) = config.load_inputs()?;
    let engine = Engine::new(&book_config)?;
    let (book, _) = Book::build(&engine, &book_config, trades.clone())?;
    let mut checks = Vec::new();

    let closed_form = trades.iter().all(|t| t.kind != TradeType::BermudanOption);
    for x in &book.results.xva {
        if x.kind == XvaKind::Fva {
            let (dva, fca) = (book.xva(XvaKind::Dva), book.xva(XvaKind::Fca));
            let direct = x.direct_total.unwrap_or(x.total);
            let scale = x.integrands.iter().map(|v| v.abs()).sum::<f64>();
            let mut c = check("fva = dva + fca".into(), x.total, direct, 0.0);
            c.passed = within_ulps(x.total, direct, scale, oracle.ulps);
            if let (Some(d), Some(f)) = (dva, fca) {
                c.reference = d.total + f.total;
                c.passed &= within_ulps(x.total, c.reference, d.total.abs() + f.total.abs(), oracle.ulps);
            }
            c.tolerance = oracle.ulps;
            c.note = Some("tolerance in ulps".into());
            checks.push(c);
            continue;
        }
        if !closed_form || book_config.lgd_pd.is_some() {
            continue;
        }
        let bf = brute_force_xva(&trades, &book_config.market.model, &engine.cube, &book_config.credit, x.kind)?;
        let rms: f64 = (0..x.weights.len())
            .map(|k| {
                let trades_rms: f64 = (0..book.regressions.len())
                    .map(|i| book.regressions.residual_rms(i, k))
                    .sum();
                x.weights[k].abs() * trades_rms
            })
            .sum();
        let mut c = check(format!("{} vs pathwise", x.kind.name()), x.total, bf.value, 3.0 * (rms + bf.standard_error));
        c.note = Some(format!("standard error {}", bf.standard_error));
        checks.push(c);
    }

    for a in book.results.allocations.iter().chain(&book.results.group_allocations) {
        let mut c = check(format!("allocation {}", a.measure), a.allocated_total(), a.total, oracle.ulps);
        c.passed = a.is_exact();
        c.note = Some("tolerance in ulps of the summand scale".into());
        checks.push(c);
    }

    let pipeline = BumpPipeline {
        config: &book_config,
        trades: &trades,
        base: &book,
        oracle: oracle.clone(),
    };
    for s in &book.results.sensitivities {
        let measure = Adjustment::parse(s.measure.split(':').next().unwrap_or_default())?;
        let reference = match &s.instrument2 {
            None => pipeline.delta(measure, &s.instrument)?,
            Some(r) => pipeline.gamma(measure, &s.instrument, r)?,
        };
        let tolerance = oracle.relative_tolerance * s.total.abs().max(reference.abs()) + 1e-9;
        checks.push(check(
            sensitivity_name(measure, &s.instrument, s.instrument2.as_deref()),
            s.total,
            reference,
            tolerance,
        ));
    }

    let passed = checks.iter().all(|c| c.passed);
    Ok(OracleCheckReport {
        schema_version: SCHEMA_VERSION,
        checks,
        passed,
    })
}
