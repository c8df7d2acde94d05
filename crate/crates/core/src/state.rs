//! A computed portfolio and its incremental update.
//!
//! A [`Book`] keeps everything needed to add trades later without touching
//! the existing ones again: the per-trade regressions, every trade's values
//! and path derivatives on the simulated paths, its margin losses under
//! every shock scenario (and their derivatives), and the results built from
//! them. Adding trades merges coefficients, reselects scenarios from the
//! merged portfolio and re-forms every allocation from the stored tables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    allocate_sensitivity, allocate_value, contributions_from_tables, regroup, trade_path_values,
    AllocationEntry, AllocationReport, Work,
};
use crate::basis::BasisSpec;
use crate::conditioning::{incremental_bounds, PathTable, Sign};
use crate::credit::{CreditCurve, Party, SpreadCurve};
use crate::error::{Error, Result};
use crate::market::{
    generate_market, underlying_jacobian, MarketConfig, ScenarioCube, ShockSpec,
    UnderlyingJacobian,
};
use crate::numeric::{fsum, hash_f64_rows};
use crate::regression::{DesignFactorizations, FitPaths, RegressionSet};
use crate::sensitivities::{
    credit_derivative_table, credit_tables, first_order_from_tables, margin_rows_from_shock_table,
    mva_sensitivities, second_order_from_tables, trade_derivative_tables, trade_second_derivative_tables,
    trade_shock_tables, xva_sensitivities, Sensitivity, SensitivityReport,
};
use crate::trades::{fit_portfolio, Portfolio, Trade};
use crate::xva::{
    compute_mva, lifetime_margins, path_values, set_average, xva_on_sign_sets, ClampCounts, CreditRegressions,
    CreditWeights, LifetimeMargin, MarginMeasure, MvaDiscounting, MvaResult, SignSets, XvaKind, XvaResult,
};

/// Version of the saved-state and report layouts.
pub const SCHEMA_VERSION: u32 = 1;

/// A measure that can be reported, allocated and differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    Cva,
    Dva,
    Fca,
    Fva,
    Mva,
}

impl Adjustment {
    pub fn xva(self) -> Option<XvaKind> {
        match self {
            Adjustment::Cva => Some(XvaKind::Cva),
            Adjustment::Dva => Some(XvaKind::Dva),
            Adjustment::Fca => Some(XvaKind::Fca),
            Adjustment::Fva => Some(XvaKind::Fva),
            Adjustment::Mva => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Adjustment::Mva => "mva",
            other => other.xva().expect("adjustment").name(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "mva" => Ok(Adjustment::Mva),
            other => Ok(match XvaKind::parse(other)? {
                XvaKind::Cva => Adjustment::Cva,
                XvaKind::Dva => Adjustment::Dva,
                XvaKind::Fca => Adjustment::Fca,
                XvaKind::Fva => Adjustment::Fva,
            }),
        }
    }
}

/// Shocks and funding for initial margin and MVA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub shocks: ShockSpec,
    pub alpha: f64,
    #[serde(default)]
    pub measure: MarginMeasure,
    #[serde(default)]
    pub spread: SpreadCurve,
    #[serde(default)]
    pub discounting: MvaDiscounting,
}

/// Sensitivities of one measure to a list of instruments. Order 2 requests
/// every unordered pair, diagonal included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityRequest {
    pub measure: Adjustment,
    pub instruments: Vec<String>,
    #[serde(default = "first_order")]
    pub order: u8,
}

fn first_order() -> u8 {
    1
}

/// Everything a book is computed from, apart from the trades.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BookConfig {
    pub market: MarketConfig,
    pub basis: BasisSpec,
    pub credit: CreditCurve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lgd_pd: Option<CreditRegressions>,
    pub measures: Vec<Adjustment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<MarginConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensitivities: Vec<SensitivityRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<BTreeMap<String, String>>,
}

impl BookConfig {
    pub fn validate(&self) -> Result<()> {
        let model = &self.market.model;
        model.validate()?;
        if self.basis.n_underlyings() != model.n_underlyings() {
            return Err(Error::config(format!(
                "basis covers {} underlyings, the model has {}",
                self.basis.n_underlyings(),
                model.n_underlyings()
            )));
        }
        self.credit.validate()?;
        let unique: BTreeSet<_> = self.measures.iter().collect();
        if unique.len() != self.measures.len() {
            return Err(Error::config("measures must not repeat"));
        }
        match &self.margin {
            None if self.wants_margin() => return Err(Error::config("mva needs a margin section")),
            Some(m) => {
                if !(m.alpha > 0.0 && m.alpha < 1.0) {
                    return Err(Error::config(format!("margin alpha {} must lie in (0, 1)", m.alpha)));
                }
                if m.shocks.is_empty() {
                    return Err(Error::config("margin needs at least one shock scenario"));
                }
                m.shocks.resolve(&model.underlying_names())?;
                m.spread.validate()?;
            }
            None => {}
        }
        for r in &self.sensitivities {
            if !(r.order == 1 || r.order == 2) {
                return Err(Error::config(format!("sensitivity order {} must be 1 or 2", r.order)));
            }
            if r.instruments.is_empty() {
                return Err(Error::config("sensitivity request without instruments"));
            }
            for name in &r.instruments {
                model.check_differentiable(name)?;
            }
        }
        if let Some(reg) = &self.lgd_pd {
            for party in reg.keys() {
                CreditWeights::new(&self.credit, *party, reg.get(party), &self.basis, &self.market.simulation.dates)?;
            }
        }
        Ok(())
    }

    /// True when MVA or one of its sensitivities is requested.
    pub fn wants_margin(&self) -> bool {
        self.measures.contains(&Adjustment::Mva) || self.sensitivities.iter().any(|r| r.measure == Adjustment::Mva)
    }

    /// Instruments of every sensitivity request, sorted.
    pub fn instruments(&self) -> Vec<String> {
        let all: BTreeSet<&String> = self.sensitivities.iter().flat_map(|r| &r.instruments).collect();
        all.into_iter().cloned().collect()
    }

    /// Instruments of the adjustment (non-MVA) sensitivities, sorted.
    fn xva_instruments(&self) -> Vec<String> {
        let all: BTreeSet<&String> = self
            .sensitivities
            .iter()
            .filter(|r| r.measure != Adjustment::Mva)
            .flat_map(|r| &r.instruments)
            .collect();
        all.into_iter().cloned().collect()
    }

    /// Distinct `(s, r)` pairs of the requests accepted by `keep`.
    fn pairs(&self, keep: impl Fn(&SensitivityRequest) -> bool) -> Vec<(String, Option<String>)> {
        let all: BTreeSet<(String, Option<String>)> =
            self.sensitivities.iter().filter(|r| keep(r)).flat_map(request_pairs).collect();
        all.into_iter().collect()
    }

    fn max_order(&self) -> u8 {
        self.sensitivities.iter().map(|r| r.order).max().unwrap_or(0)
    }

    fn parties(&self) -> BTreeSet<Party> {
        self.measures
            .iter()
            .chain(self.sensitivities.iter().map(|r| &r.measure))
            .filter_map(|m| m.xva())
            .map(|k| k.party())
            .collect()
    }
}

/// Instrument pairs of one request: each instrument for first order, every
/// unordered pair with the diagonal for second order.
fn request_pairs(req: &SensitivityRequest) -> Vec<(String, Option<String>)> {
    if req.order == 1 {
        return req.instruments.iter().map(|s| (s.clone(), None)).collect();
    }
    let mut p = Vec::new();
    for (a, s) in req.instruments.iter().enumerate() {
        for r in &req.instruments[a..] {
            p.push((s.clone(), Some(r.clone())));
        }
    }
    p
}

/// Table key of an instrument or pair: `s` or `s:r`.
fn pair_key(s: &str, r: Option<&str>) -> String {
    match r {
        None => s.to_string(),
        Some(r) => format!("{s}:{r}"),
    }
}

/// Scenarios, design factorizations and underlying Jacobian shared by all
/// computations on one cube.
pub struct Engine {
    pub cube: ScenarioCube,
    pub factorizations: DesignFactorizations,
    pub jacobian: Option<UnderlyingJacobian>,
}

impl Engine {
    /// Simulates the cube of `config.market`.
    pub fn new(config: &BookConfig) -> Result<Self> {
        config.validate()?;
        Self::with_cube(config, generate_market(&config.market)?)
    }

    /// Uses a given cube. Sensitivities need the cube to come from
    /// `config.market`.
    pub fn with_cube(config: &BookConfig, cube: ScenarioCube) -> Result<Self> {
        config.validate()?;
        if cube.n_underlyings() != config.basis.n_underlyings() {
            return Err(Error::config("cube and basis disagree on the number of underlyings"));
        }
        let factorizations = DesignFactorizations::build(&cube, &config.basis, &FitPaths::All)?;
        let jacobian = if config.sensitivities.is_empty() {
            None
        } else {
            Some(underlying_jacobian(
                &cube,
                &config.market.model,
                &config.instruments(),
                config.max_order(),
            )?)
        };
        Ok(Engine {
            cube,
            factorizations,
            jacobian,
        })
    }

    fn jacobian(&self) -> Result<&UnderlyingJacobian> {
        self.jacobian
            .as_ref()
            .ok_or_else(|| Error::config("no sensitivities were configured for this engine"))
    }
}

/// Per-trade path tables, aligned with the trade order of the regressions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TradeTables {
    /// Trade values per (date, simulated path).
    pub values: Vec<PathTable>,
    /// `∂f/∂s` per instrument of an adjustment sensitivity.
    #[serde(default)]
    pub derivatives: BTreeMap<String, Vec<PathTable>>,
    /// `∂²f/∂s∂r` per pair `s:r` of an adjustment gamma.
    #[serde(default)]
    pub second_derivatives: BTreeMap<String, Vec<PathTable>>,
    /// Margin losses per date, with path `j`, scenario `m` in column
    /// `j·M + m`. Empty without a margin.
    #[serde(default)]
    pub shock_losses: Vec<PathTable>,
    /// Derivatives of the margin losses per MVA sensitivity key `s` or `s:r`.
    #[serde(default)]
    pub shock_derivatives: BTreeMap<String, Vec<PathTable>>,
    /// Lifetime margin allocated to the trade per (date, path), re-formed
    /// from `shock_losses` on every computation.
    #[serde(default)]
    pub margins: Vec<PathTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeResidual {
    pub trade: String,
    pub per_date: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationSummary {
    pub date: f64,
    pub rows: usize,
    pub rank: usize,
    pub truncated: bool,
    pub condition_number: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub residual_rms: Vec<TradeResidual>,
    pub factorizations: Vec<FactorizationSummary>,
    pub clamps: BTreeMap<Party, ClampCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BookResults {
    pub xva: Vec<XvaResult>,
    pub sets: SignSets,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<LifetimeMargin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mva: Option<MvaResult>,
    pub sensitivities: Vec<SensitivityReport>,
    pub allocations: Vec<AllocationReport>,
    pub group_allocations: Vec<AllocationReport>,
    pub diagnostics: Diagnostics,
}

/// Regression evaluations of one computation, split by who was evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookWork {
    /// Trades that were already in the book before an incremental update.
    pub existing_trades: Work,
    /// Trades added by this computation.
    pub new_trades: Work,
    /// Portfolio-level regressions.
    pub portfolio: Work,
}

/// A computed portfolio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Book {
    pub schema_version: u32,
    pub config: BookConfig,
    /// Sorted by id, like the regressions.
    pub trades: Vec<Trade>,
    pub cube_identity: String,
    pub regressions: RegressionSet,
    pub portfolio_values: PathTable,
    pub tables: TradeTables,
    pub results: BookResults,
}

/// Name of a sensitivity: `cva:delta:spot` or `cva:gamma:spot:vol`.
pub fn sensitivity_name(measure: Adjustment, s: &str, r: Option<&str>) -> String {
    match r {
        None => format!("{}:delta:{s}", measure.name()),
        Some(r) => format!("{}:gamma:{s}:{r}", measure.name()),
    }
}

impl Book {
    /// Fits and evaluates `trades` from scratch.
    pub fn build(engine: &Engine, config: &BookConfig, trades: Vec<Trade>) -> Result<(Book, BookWork)> {
        config.validate()?;
        let mut trades = trades;
        trades.sort_by(|a, b| a.id.cmp(&b.id));
        Portfolio::new(trades.clone()).validate(&config.market.model)?;
        let regressions = fit_portfolio(&trades, &config.market.model, &engine.cube, &engine.factorizations)?;
        let mut work = BookWork::default();
        let tables = fresh_tables(engine, config, &regressions, &mut work.new_trades)?;
        assemble(engine, config, trades, regressions, tables, work)
    }

    /// Totals of every reported measure and sensitivity, by name.
    pub fn totals(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for x in &self.results.xva {
            out.insert(x.kind.name().to_string(), x.total);
        }
        if let Some(m) = &self.results.mva {
            out.insert("mva".to_string(), m.total);
        }
        for s in &self.results.sensitivities {
            out.insert(s.measure.clone(), s.total);
        }
        out
    }

    pub fn xva(&self, kind: XvaKind) -> Option<&XvaResult> {
        self.results.xva.iter().find(|x| x.kind == kind)
    }

    pub fn allocation(&self, measure: &str) -> Option<&AllocationReport> {
        self.results.allocations.iter().find(|a| a.measure == measure)
    }

    pub fn sensitivity(&self, name: &str) -> Option<&SensitivityReport> {
        self.results.sensitivities.iter().find(|s| s.measure == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Input(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let book: Book = serde_json::from_str(text).map_err(Error::from_json)?;
        if book.schema_version != SCHEMA_VERSION {
            return Err(Error::StateMismatch(format!(
                "state schema version {} is not {SCHEMA_VERSION}",
                book.schema_version
            )));
        }
        Ok(book)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

fn fresh_tables(
    engine: &Engine,
    config: &BookConfig,
    regressions: &RegressionSet,
    work: &mut Work,
) -> Result<TradeTables> {
    let cube = &engine.cube;
    let (values, w) = trade_path_values(regressions, cube)?;
    work.add(w);
    let per_table = w.trade_path_evaluations;
    let mut tables = TradeTables {
        values,
        ..Default::default()
    };
    for s in config.xva_instruments() {
        let t = trade_derivative_tables(regressions, cube, engine.jacobian()?, &s)?;
        work.trade_path_evaluations += per_table;
        tables.derivatives.insert(s, t);
    }
    for (s, r) in config.pairs(|r| r.measure != Adjustment::Mva && r.order == 2) {
        let r = r.expect("second order");
        let t = trade_second_derivative_tables(regressions, cube, engine.jacobian()?, (&s, &r))?;
        work.trade_path_evaluations += per_table;
        tables.second_derivatives.insert(pair_key(&s, Some(&r)), t);
    }
    if let Some(mc) = config.margin.as_ref().filter(|_| config.wants_margin()) {
        // base state plus every scenario, per trade and (date, path)
        let per_shock_table = per_table * (mc.shocks.len() as u64 + 1);
        tables.shock_losses = trade_shock_tables(regressions, cube, None, &mc.shocks, None)?;
        work.trade_shock_evaluations += per_shock_table;
        for (s, r) in config.pairs(|r| r.measure == Adjustment::Mva) {
            let jac = engine.jacobian()?;
            let t = trade_shock_tables(regressions, cube, Some(jac), &mc.shocks, Some((&s, r.as_deref())))?;
            work.trade_shock_evaluations += per_shock_table;
            tables.shock_derivatives.insert(pair_key(&s, r.as_deref()), t);
        }
    }
    Ok(tables)
}

/// Per-trade allocation of an adjustment; FVA adds each trade's DVA and FCA
/// contributions date by date.
fn xva_allocation(
    kind: XvaKind,
    ids: &[String],
    tables: &[&PathTable],
    sets: &SignSets,
    portfolio_hash: &str,
    weights: &[f64],
    multipliers: Option<&PathTable>,
    total: f64,
) -> Result<AllocationReport> {
    if kind != XvaKind::Fva {
        let set = sets.get(kind.sign());
        return allocate_value(kind.name(), ids, tables, portfolio_hash, set, weights, multipliers, total);
    }
    if sets.negative.source_hash() != portfolio_hash || sets.positive.source_hash() != portfolio_hash {
        return Err(Error::Audit("fva: conditioning set was built from another portfolio".into()));
    }
    let dva = contributions_from_tables(tables, &sets.negative, weights, multipliers);
    let fca = contributions_from_tables(tables, &sets.positive, weights, multipliers);
    let rows: Vec<Vec<f64>> = dva
        .iter()
        .zip(&fca)
        .map(|(d, f)| d.iter().zip(f).map(|(a, b)| a + b).collect())
        .collect();
    Ok(allocate_sensitivity("fva", ids, &rows, portfolio_hash, total))
}

fn combine_sign_sensitivities(neg: Sensitivity, pos: Sensitivity) -> Sensitivity {
    let per_date: Vec<f64> = neg.per_date.iter().zip(&pos.per_date).map(|(a, b)| a + b).collect();
    Sensitivity {
        total: fsum(per_date.iter().copied()),
        per_date,
        terms: [0, 1, 2].map(|i| neg.terms[i] + pos.terms[i]),
    }
}

/// Lifetime margin of one trade per (date, path): its losses averaged over
/// the portfolio's ES set.
fn margins_from_losses(losses: &PathTable, lifetime: &LifetimeMargin, weights: &[f64]) -> PathTable {
    let m = weights.len();
    let n = losses.n_paths() / m;
    PathTable::from_fn(losses.n_dates(), n, |k, j| {
        set_average(&losses.row(k)[j * m..(j + 1) * m], lifetime.set(k, j), weights)
    })
}

/// Portfolio-level results and allocations from regressions and per-trade
/// tables. Shared by full builds and incremental updates so that both
/// produce identical books.
fn assemble(
    engine: &Engine,
    config: &BookConfig,
    trades: Vec<Trade>,
    regressions: RegressionSet,
    mut tables: TradeTables,
    mut work: BookWork,
) -> Result<(Book, BookWork)> {
    let cube = &engine.cube;
    if regressions.cube_identity() != cube.identity() {
        return Err(Error::StateMismatch("regressions belong to another cube".into()));
    }
    let basis = regressions.basis();
    let dates = cube.dates();
    let n = cube.n_original();
    let ids = regressions.trade_ids().to_vec();

    let pcoef = regressions.total_coefficients();
    let pvalues = path_values(&pcoef, basis, cube)?;
    work.portfolio.portfolio_evaluations += (dates.len() * n) as u64;
    let phash = pvalues.hash();
    let sets = SignSets::new(&pvalues, dates)?;
    let value_refs: Vec<&PathTable> = tables.values.iter().collect();

    let regs = config.lgd_pd.as_ref();
    let mut credit = BTreeMap::new();
    for party in config.parties() {
        let w = CreditWeights::new(&config.credit, party, regs.and_then(|r| r.get(&party)), basis, dates)?;
        let m = w.multipliers(cube);
        credit.insert(party, (w, m));
    }

    let mut xva = Vec::new();
    let mut allocations = Vec::new();
    for kind in config.measures.iter().filter_map(|m| m.xva()) {
        let (w, m) = &credit[&kind.party()];
        let result = xva_on_sign_sets(kind, &pvalues, &sets, w, m.as_ref());
        let weights = w.weights();
        allocations.push(xva_allocation(
            kind,
            &ids,
            &value_refs,
            &sets,
            &phash,
            &weights,
            m.as_ref().map(|m| &m.0),
            result.total,
        )?);
        xva.push(result);
    }

    let mut margin = None;
    let mut mva = None;
    if let Some(mc) = config.margin.as_ref().filter(|_| config.wants_margin()) {
        let lifetime = lifetime_margins(&pcoef, basis, cube, &mc.shocks, mc.alpha, mc.measure)?;
        work.portfolio.portfolio_evaluations += (dates.len() * n * (mc.shocks.len() + 1)) as u64;
        if tables.shock_losses.len() != ids.len() {
            return Err(Error::StateMismatch("trade tables lack margin losses".into()));
        }
        let scenario_weights = mc.shocks.weights();
        tables.margins = tables
            .shock_losses
            .par_iter()
            .map(|t| margins_from_losses(t, &lifetime, scenario_weights))
            .collect();
        let result = compute_mva(&lifetime.margins, dates, &mc.spread, &config.credit, mc.discounting)?;
        if config.measures.contains(&Adjustment::Mva) {
            let rows: Vec<Vec<f64>> = tables
                .margins
                .iter()
                .map(|t| {
                    (0..dates.len())
                        .map(|k| {
                            let s: crate::numeric::NeumaierSum = t.row(k).iter().copied().collect();
                            result.weights[k] * (s.value() / n as f64)
                        })
                        .collect()
                })
                .collect();
            let hash = lifetime.scenario_margins.hash();
            allocations.push(allocate_sensitivity("mva", &ids, &rows, &hash, result.total));
        }
        margin = Some(lifetime);
        mva = Some(result);
    }

    let mut sensitivities = Vec::new();
    for req in &config.sensitivities {
        let jac = engine.jacobian()?;
        for (s, r) in request_pairs(req) {
            let name = sensitivity_name(req.measure, &s, r.as_deref());
            let missing = |what: &str| Error::StateMismatch(format!("trade tables lack {what} for {name}"));
            let (portfolio, rows, hash): (Sensitivity, Vec<Vec<f64>>, String) = match req.measure.xva() {
                Some(kind) => {
                    let (cw, m) = &credit[&kind.party()];
                    let weights = cw.weights();
                    let signs: Vec<Sign> = match kind {
                        XvaKind::Fva => vec![Sign::Negative, Sign::Positive],
                        _ => vec![kind.sign()],
                    };
                    let d_s = tables.derivatives.get(&s).ok_or_else(|| missing("derivatives"))?;
                    let first_credit = match r {
                        None => credit_derivative_table(cw, cube, jac, &s)?,
                        Some(_) => None,
                    };
                    let second = match &r {
                        None => None,
                        Some(r) => Some((
                            tables.derivatives.get(r).ok_or_else(|| missing("derivatives"))?,
                            tables
                                .second_derivatives
                                .get(&pair_key(&s, Some(r)))
                                .ok_or_else(|| missing("second derivatives"))?,
                            credit_tables(cw, cube, jac, (&s, r))?,
                        )),
                    };
                    let mut portfolio: Option<Sensitivity> = None;
                    let mut rows: Option<Vec<Vec<f64>>> = None;
                    for sign in signs {
                        let set = sets.get(sign);
                        let p = xva_sensitivities(&[&pcoef], basis, cube, jac, cw, set, &s, r.as_deref())?.remove(0);
                        let t: Vec<Vec<f64>> = (0..ids.len())
                            .into_par_iter()
                            .map(|i| match &second {
                                None => first_order_from_tables(
                                    &tables.values[i],
                                    &d_s[i],
                                    set,
                                    &weights,
                                    m.as_ref().map(|m| &m.0),
                                    first_credit.as_ref(),
                                ),
                                Some((d_r, d_sr, ct)) => second_order_from_tables(
                                    &tables.values[i],
                                    &d_s[i],
                                    &d_r[i],
                                    &d_sr[i],
                                    set,
                                    &weights,
                                    ct.as_ref(),
                                ),
                            })
                            .collect();
                        portfolio = Some(match portfolio {
                            None => p,
                            Some(prev) => combine_sign_sensitivities(prev, p),
                        });
                        rows = Some(match rows {
                            None => t,
                            Some(prev) => prev
                                .iter()
                                .zip(&t)
                                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                                .collect(),
                        });
                    }
                    (portfolio.expect("one sign"), rows.expect("one sign"), phash.clone())
                }
                None => {
                    let mc = config.margin.as_ref().expect("validated");
                    let lifetime = margin.as_ref().expect("margin computed");
                    let result = mva.as_ref().expect("mva computed");
                    let p = mva_sensitivities(
                        &[&pcoef],
                        basis,
                        cube,
                        jac,
                        lifetime,
                        &mc.shocks,
                        &result.weights,
                        &s,
                        r.as_deref(),
                    )?
                    .remove(0);
                    work.portfolio.portfolio_evaluations += (dates.len() * n * (mc.shocks.len() + 1)) as u64;
                    let d = tables
                        .shock_derivatives
                        .get(&pair_key(&s, r.as_deref()))
                        .ok_or_else(|| missing("shock derivatives"))?;
                    let rows = d
                        .par_iter()
                        .map(|t| margin_rows_from_shock_table(t, lifetime, mc.shocks.weights(), &result.weights))
                        .collect();
                    (p, rows, lifetime.scenario_margins.hash())
                }
            };
            let alloc = allocate_sensitivity(&name, &ids, &rows, &hash, portfolio.total);
            sensitivities.push(SensitivityReport {
                measure: name,
                instrument: s.clone(),
                instrument2: r.clone(),
                total: portfolio.total,
                per_date: portfolio.per_date,
                dates: dates.to_vec(),
                conditioning_hash: hash,
                per_trade: alloc.trades.iter().map(|e| (e.name.clone(), e.value)).collect(),
            });
            allocations.push(alloc);
        }
    }

    let group_allocations = match &config.grouping {
        Some(g) => allocations.iter().map(|a| regroup(a, g)).collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let diagnostics = Diagnostics {
        residual_rms: ids
            .iter()
            .enumerate()
            .map(|(i, id)| TradeResidual {
                trade: id.clone(),
                per_date: (0..dates.len()).map(|k| regressions.residual_rms(i, k)).collect(),
            })
            .collect(),
        factorizations: engine
            .factorizations
            .iter()
            .map(|f| FactorizationSummary {
                date: dates[f.date()],
                rows: f.n_rows(),
                rank: f.rank(),
                truncated: f.truncated(),
                condition_number: f.condition_number(),
            })
            .collect(),
        clamps: credit
            .iter()
            .map(|(p, (_, m))| (*p, m.as_ref().map(|m| m.1).unwrap_or_default()))
            .collect(),
    };

    let book = Book {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        trades,
        cube_identity: cube.identity().to_string(),
        regressions,
        portfolio_values: pvalues,
        tables,
        results: BookResults {
            xva,
            sets,
            margin,
            mva,
            sensitivities,
            allocations,
            group_allocations,
            diagnostics,
        },
    };
    Ok((book, work))
}

/// A path whose membership of the positive set changed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub date: usize,
    pub path: usize,
    /// True if the path joined the positive set, false if it left.
    pub joined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationChange {
    pub measure: String,
    pub trade: String,
    #[serde(default)]
    pub before: Option<f64>,
    pub after: f64,
}

/// What an incremental update changed and what it cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalReport {
    pub before: BTreeMap<String, f64>,
    pub after: BTreeMap<String, f64>,
    pub added_trades: Vec<String>,
    pub allocation_changes: Vec<AllocationChange>,
    /// Paths that changed sign, from the merged portfolio values.
    pub flips: Vec<Flip>,
    /// Paths where the added value crosses the stored flip threshold.
    pub predicted_flips: usize,
    /// Largest `|V_old + V_added − V_merged|` over the paths: the
    /// difference between adding path values and evaluating the merged
    /// coefficients.
    pub path_space_deviation: f64,
    pub work: BookWork,
}

/// Adds `delta` to `book` without evaluating any existing trade on the
/// simulated paths. The result equals a full build of the merged portfolio.
pub fn incremental_update(engine: &Engine, book: &Book, delta: &[Trade]) -> Result<(Book, IncrementalReport)> {
    if engine.cube.identity() != book.cube_identity {
        return Err(Error::StateMismatch(
            "saved state was computed on a different scenario cube".into(),
        ));
    }
    let config = &book.config;
    Portfolio::new(delta.to_vec()).validate(&config.market.model)?;
    for t in delta {
        if book.regressions.trade_index(&t.id).is_ok() {
            return Err(Error::config(format!("trade {} is already in the portfolio", t.id)));
        }
    }
    let mut config = config.clone();
    if let Some(g) = config.grouping.as_mut() {
        for t in delta {
            g.entry(t.id.clone()).or_insert_with(|| "increment".to_string());
        }
    }
    let mut work = BookWork::default();
    let delta_regs = fit_portfolio(delta, &config.market.model, &engine.cube, &engine.factorizations)?;
    let delta_tables = fresh_tables(engine, &config, &delta_regs, &mut work.new_trades)?;
    let merged = book.regressions.merged(&delta_regs)?;

    let pick = |id: &str, old: &[PathTable], new: &[PathTable]| -> PathTable {
        match book.regressions.trade_index(id) {
            Ok(i) => old[i].clone(),
            Err(_) => new[delta_regs.trade_index(id).expect("delta trade")].clone(),
        }
    };
    let ids = merged.trade_ids().to_vec();
    let merge = |old: &[PathTable], new: &[PathTable], what: &str| -> Result<Vec<PathTable>> {
        if old.len() != book.regressions.len() {
            return Err(Error::StateMismatch(format!("saved state lacks {what}")));
        }
        Ok(ids.iter().map(|id| pick(id, old, new)).collect())
    };
    let merge_map = |old: &BTreeMap<String, Vec<PathTable>>, new: &BTreeMap<String, Vec<PathTable>>| {
        new.iter()
            .map(|(key, tables)| {
                let previous = old.get(key).map(Vec::as_slice).unwrap_or_default();
                Ok((key.clone(), merge(previous, tables, key)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()
    };
    let old = &book.tables;
    let tables = TradeTables {
        values: merge(&old.values, &delta_tables.values, "trade values")?,
        derivatives: merge_map(&old.derivatives, &delta_tables.derivatives)?,
        second_derivatives: merge_map(&old.second_derivatives, &delta_tables.second_derivatives)?,
        shock_losses: if config.wants_margin() {
            merge(&old.shock_losses, &delta_tables.shock_losses, "margin losses")?
        } else {
            Vec::new()
        },
        shock_derivatives: merge_map(&old.shock_derivatives, &delta_tables.shock_derivatives)?,
        margins: Vec::new(),
    };
    let mut trades: Vec<Trade> = book.trades.iter().chain(delta).cloned().collect();
    trades.sort_by(|a, b| a.id.cmp(&b.id));
    let (updated, work) = assemble(engine, &config, trades, merged, tables, work)?;

    // audit of the sign selection
    let (nd, np) = (book.portfolio_values.n_dates(), book.portfolio_values.n_paths());
    let added = PathTable::from_fn(nd, np, |k, j| {
        fsum(delta_tables.values.iter().map(|t| t.get(k, j)))
    });
    let bounds = incremental_bounds(&book.portfolio_values, Sign::Positive);
    let mut flips = Vec::new();
    let mut predicted_flips = 0;
    let mut deviation: f64 = 0.0;
    for k in 0..nd {
        for j in 0..np {
            let before = Sign::Positive.admits(book.portfolio_values.get(k, j));
            let after = Sign::Positive.admits(updated.portfolio_values.get(k, j));
            if before != after {
                flips.push(Flip {
                    date: k,
                    path: j,
                    joined: after,
                });
            }
            if bounds.flips(k, j, added.get(k, j)) {
                predicted_flips += 1;
            }
            let path_sum = book.portfolio_values.get(k, j) + added.get(k, j);
            deviation = deviation.max((path_sum - updated.portfolio_values.get(k, j)).abs());
        }
    }

    let mut allocation_changes = Vec::new();
    for after in &updated.results.allocations {
        let before = book.allocation(&after.measure);
        for e in &after.trades {
            let old = before.and_then(|b| b.trades.iter().find(|x| x.name == e.name)).map(|x| x.value);
            if old.map(f64::to_bits) != Some(e.value.to_bits()) {
                allocation_changes.push(AllocationChange {
                    measure: after.measure.clone(),
                    trade: e.name.clone(),
                    before: old,
                    after: e.value,
                });
            }
        }
    }

    let report = IncrementalReport {
        before: book.totals(),
        after: updated.totals(),
        added_trades: delta_regs.trade_ids().to_vec(),
        allocation_changes,
        flips,
        predicted_flips,
        path_space_deviation: deviation,
        work,
    };
    Ok((updated, report))
}

/// Content hash of a book's results, for quick equality checks.
pub fn results_hash(book: &Book) -> String {
    let rows: Vec<Vec<f64>> = book
        .results
        .allocations
        .iter()
        .map(|a| std::iter::once(a.total).chain(a.trades.iter().map(|e| e.value)).collect())
        .collect();
    hash_f64_rows("book-results", rows.iter().map(|r| r.as_slice()))
}

/// Allocation entries by trade id, for tests and reports.
pub fn entries_by_trade(report: &AllocationReport) -> BTreeMap<&str, f64> {
    report.trades.iter().map(|e: &AllocationEntry| (e.name.as_str(), e.value)).collect()
}
