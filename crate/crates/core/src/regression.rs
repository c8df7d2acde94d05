//! Trade-level least squares on the shared basis.
//!
//! The design matrix of a date depends only on the cube and the basis, never
//! on a trade, so it is factorized once. Each trade then costs one
//! back-substitution `x = V Σ⁺ Uᵀ b`.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{dot, BasisSpec};
use crate::error::{Error, Result};
use crate::market::ScenarioCube;
use crate::numeric::fsum;

/// Singular values below this fraction of the largest are zeroed.
pub const TRUNCATION: f64 = 1e-12;

static SVD_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of design SVDs computed by this process so far.
pub fn svd_calls() -> usize {
    SVD_CALLS.load(Ordering::SeqCst)
}

/// Which cube paths enter the design matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitPaths {
    /// Every path, augmented ones included.
    #[default]
    All,
    /// Only the simulated prefix.
    Original,
    Indices(Vec<usize>),
}

impl FitPaths {
    fn resolve(&self, cube: &ScenarioCube) -> Result<Vec<usize>> {
        match self {
            FitPaths::All => Ok((0..cube.n_paths()).collect()),
            FitPaths::Original => Ok((0..cube.n_original()).collect()),
            FitPaths::Indices(idx) => {
                if idx.iter().any(|&j| j >= cube.n_paths()) {
                    return Err(Error::config("fitting path index out of range"));
                }
                Ok(idx.clone())
            }
        }
    }
}

/// Thin SVD of the design matrix of one date.
#[derive(Clone, Debug)]
pub struct DesignFactorization {
    date: usize,
    paths: Vec<usize>,
    design: DMatrix<f64>,
    u: DMatrix<f64>,
    sigma: Vec<f64>,
    v: DMatrix<f64>,
    rank: usize,
    threshold: f64,
    condition_number: f64,
    reconstruction_error: f64,
}

impl DesignFactorization {
    /// Factorizes an explicit design matrix (rows = paths, columns = basis).
    pub fn from_design(design: DMatrix<f64>, date: usize, paths: Vec<usize>) -> Result<Self> {
        let (rows, cols) = design.shape();
        if rows < cols {
            return Err(Error::config(format!(
                "{rows} fitting paths for {cols} basis functions"
            )));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("design matrix has non-finite entries".into()));
        }
        SVD_CALLS.fetch_add(1, Ordering::SeqCst);
        let svd = design.clone().svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();

        let norm = design.norm();
        let rebuilt = &u * DMatrix::from_diagonal(&svd.singular_values) * &v_t;
        let reconstruction_error = if norm > 0.0 {
            (&design - rebuilt).norm() / norm
        } else {
            0.0
        };
        if reconstruction_error > 1e-10 {
            return Err(Error::Numerical(format!(
                "SVD reconstruction error {reconstruction_error:e} at date {date}"
            )));
        }
        let max = sigma.iter().copied().fold(0.0, f64::max);
        let threshold = TRUNCATION * max;
        let rank = sigma.iter().filter(|&&s| s > threshold && s > 0.0).count();
        let min_kept = sigma
            .iter()
            .copied()
            .filter(|&s| s > threshold && s > 0.0)
            .fold(f64::INFINITY, f64::min);
        let condition_number = if rank == 0 { f64::INFINITY } else { max / min_kept };
        Ok(Self {
            date,
            paths,
            design,
            u,
            sigma,
            v: v_t.transpose(),
            rank,
            threshold,
            condition_number,
            reconstruction_error,
        })
    }

    pub fn date(&self) -> usize {
        self.date
    }

    pub fn paths(&self) -> &[usize] {
        &self.paths
    }

    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.design.ncols()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// True when at least one singular value was zeroed.
    pub fn truncated(&self) -> bool {
        self.rank < self.n_basis()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    pub fn reconstruction_error(&self) -> f64 {
        self.reconstruction_error
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

/// Builds the design of date `k` and factorizes it.
pub fn factorize_design(
    cube: &ScenarioCube,
    spec: &BasisSpec,
    k: usize,
    selector: &FitPaths,
) -> Result<DesignFactorization> {
    if spec.n_underlyings() != cube.n_underlyings() {
        return Err(Error::config("basis and cube disagree on the number of underlyings"));
    }
    if k >= cube.n_dates() {
        return Err(Error::config(format!("date index {k} outside the grid")));
    }
    let paths = selector.resolve(cube)?;
    let m = spec.len();
    let mut design = DMatrix::zeros(paths.len(), m);
    let mut row = vec![0.0; m];
    for (i, &j) in paths.iter().enumerate() {
        spec.eval_into(cube.state(k, j), &mut row);
        for l in 0..m {
            design[(i, l)] = row[l];
        }
    }
    DesignFactorization::from_design(design, k, paths)
}

/// One factorization per date of a cube.
#[derive(Clone, Debug)]
pub struct DesignFactorizations {
    basis: BasisSpec,
    per_date: Vec<DesignFactorization>,
    cube_identity: String,
}

impl DesignFactorizations {
    pub fn build(cube: &ScenarioCube, spec: &BasisSpec, selector: &FitPaths) -> Result<Self> {
        let per_date = (0..cube.n_dates())
            .into_par_iter()
            .map(|k| factorize_design(cube, spec, k, selector))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            basis: spec.clone(),
            per_date,
            cube_identity: cube.identity().to_string(),
        })
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn date(&self, k: usize) -> &DesignFactorization {
        &self.per_date[k]
    }

    pub fn n_dates(&self) -> usize {
        self.per_date.len()
    }

    pub fn cube_identity(&self) -> &str {
        &self.cube_identity
    }

    pub fn iter(&self) -> impl Iterator<Item = &DesignFactorization> {
        self.per_date.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeFit {
    pub coefficients: Vec<f64>,
    pub residual_rms: f64,
}

/// Least-squares coefficients of `targets` (one per fitting path) by
/// back-substitution on the shared factorization.
pub fn fit_trade(f: &DesignFactorization, targets: &[f64]) -> Result<TradeFit> {
    if targets.len() != f.n_rows() {
        return Err(Error::config(format!(
            "{} targets for {} fitting paths",
            targets.len(),
            f.n_rows()
        )));
    }
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFiniteTarget { path: f.paths[i] });
    }
    let b = DVector::from_column_slice(targets);
    let mut utb = f.u.tr_mul(&b);
    for (i, s) in f.sigma.iter().enumerate() {
        utb[i] = if i < f.rank { utb[i] / s } else { 0.0 };
    }
    let x = &f.v * utb;
    let fitted = &f.design * &x;
    let rss: f64 = fitted
        .iter()
        .zip(targets)
        .map(|(y, t)| (y - t) * (y - t))
        .sum();
    Ok(TradeFit {
        coefficients: x.iter().copied().collect(),
        residual_rms: (rss / targets.len() as f64).sqrt(),
    })
}

/// Longstaff-Schwartz fit of an exercisable trade.
///
/// `intrinsic(k, j)` is the exercise value on path `j` at date `k`, and
/// `exercise` the ascending date indices on which exercise is allowed.
/// `discount(k, k2)` discounts cash from date `k2` back to date `k`. At each
/// exercise date, continuation is regressed on the shared factorization and
/// the trade is exercised where intrinsic is positive and at least the
/// continuation. The returned fits regress, at every date, the discounted
/// cash of the first exercise at or after that date, and zero once the
/// path has exercised earlier.
pub fn fit_bermudan<I, D>(
    factorizations: &DesignFactorizations,
    exercise: &[usize],
    intrinsic: I,
    discount: D,
) -> Result<Vec<TradeFit>>
where
    I: Fn(usize, usize) -> f64,
    D: Fn(usize, usize) -> f64,
{
    let n_dates = factorizations.n_dates();
    if exercise.is_empty() {
        return Err(Error::config("exercise schedule is empty"));
    }
    if exercise.windows(2).any(|w| w[1] <= w[0]) || exercise.iter().any(|&k| k >= n_dates) {
        return Err(Error::config("exercise dates must be ascending grid dates"));
    }
    let paths = factorizations.date(0).paths().to_vec();
    if factorizations.iter().any(|f| f.paths() != paths.as_slice()) {
        return Err(Error::config("exercise fitting requires the same paths at every date"));
    }
    let n = paths.len();
    // Backward pass: exercise decision per (exercise date, path).
    let mut cash = vec![0.0; n];
    let mut cash_date: Vec<Option<usize>> = vec![None; n];
    let mut decisions = vec![vec![false; n]; n_dates];
    for (pos, &k) in exercise.iter().enumerate().rev() {
        let values: Vec<f64> = paths.iter().map(|&j| intrinsic(k, j)).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTarget { path: paths[i] });
        }
        let continuation: Vec<f64> = if pos + 1 == exercise.len() {
            vec![0.0; n]
        } else {
            let targets: Vec<f64> = (0..n)
                .map(|i| cash_date[i].map_or(0.0, |d| cash[i] * discount(k, d)))
                .collect();
            let fit = fit_trade(factorizations.date(k), &targets)?;
            let design = factorizations.date(k).design();
            (0..n)
                .map(|i| {
                    let row: Vec<f64> = design.row(i).iter().copied().collect();
                    dot(&fit.coefficients, &row)
                })
                .collect()
        };
        for i in 0..n {
            if values[i] > 0.0 && values[i] >= continuation[i] {
                decisions[k][i] = true;
                cash[i] = values[i];
                cash_date[i] = Some(k);
            }
        }
    }
    // Forward pass: first exercise per path; target is the discounted cash
    // while alive, zero after exercise.
    let mut first: Vec<Option<usize>> = vec![None; n];
    for &k in exercise {
        for i in 0..n {
            if first[i].is_none() && decisions[k][i] {
                first[i] = Some(k);
            }
        }
    }
    (0..n_dates)
        .map(|k| {
            let targets: Vec<f64> = (0..n)
                .map(|i| match first[i] {
                    Some(e) if e >= k => intrinsic(e, paths[i]) * discount(k, e),
                    Some(_) => 0.0,
                    None => 0.0,
                })
                .collect();
            fit_trade(factorizations.date(k), &targets)
        })
        .collect()
}

/// Per-trade, per-date coefficients on one basis.
///
/// Trades are kept sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSet {
    basis: BasisSpec,
    dates: Vec<f64>,
    trade_ids: Vec<String>,
    coefficients: Vec<Vec<Vec<f64>>>,
    residual_rms: Vec<Vec<f64>>,
    cube_identity: String,
}

impl RegressionSet {
    pub fn new(basis: BasisSpec, dates: Vec<f64>, cube_identity: String) -> Self {
        Self {
            basis,
            dates,
            trade_ids: Vec::new(),
            coefficients: Vec::new(),
            residual_rms: Vec::new(),
            cube_identity,
        }
    }

    /// Adds a trade; `fits` holds one entry per date.
    pub fn insert(&mut self, id: &str, fits: Vec<TradeFit>) -> Result<()> {
        if fits.len() != self.dates.len() {
            return Err(Error::config(format!(
                "trade {id}: {} fits for {} dates",
                fits.len(),
                self.dates.len()
            )));
        }
        if fits.iter().any(|f| f.coefficients.len() != self.basis.len()) {
            return Err(Error::config(format!("trade {id}: coefficient count differs from basis")));
        }
        let pos = match self.trade_ids.binary_search_by(|t| t.as_str().cmp(id)) {
            Ok(_) => return Err(Error::config(format!("duplicate trade id {id}"))),
            Err(pos) => pos,
        };
        let (coefficients, rms): (Vec<_>, Vec<_>) =
            fits.into_iter().map(|f| (f.coefficients, f.residual_rms)).unzip();
        self.trade_ids.insert(pos, id.to_string());
        self.coefficients.insert(pos, coefficients);
        self.residual_rms.insert(pos, rms);
        Ok(())
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn dates(&self) -> &[f64] {
        &self.dates
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn cube_identity(&self) -> &str {
        &self.cube_identity
    }

    pub fn trade_ids(&self) -> &[String] {
        &self.trade_ids
    }

    pub fn len(&self) -> usize {
        self.trade_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trade_ids.is_empty()
    }

    pub fn trade_index(&self, id: &str) -> Result<usize> {
        self.trade_ids
            .binary_search_by(|t| t.as_str().cmp(id))
            .map_err(|_| Error::lookup("trade", id))
    }

    pub fn coefficients(&self, trade: usize, k: usize) -> &[f64] {
        &self.coefficients[trade][k]
    }

    /// Coefficients of every date for one trade.
    pub fn trade_coefficients(&self, trade: usize) -> &[Vec<f64>] {
        &self.coefficients[trade]
    }

    pub fn residual_rms(&self, trade: usize, k: usize) -> f64 {
        self.residual_rms[trade][k]
    }

    /// Element-wise sum of the coefficient vectors of `group`, per date.
    ///
    /// Each element is a correctly rounded sum, so the result does not
    /// depend on the order in which the group is listed.
    pub fn portfolio_coefficients<S: AsRef<str>>(&self, group: &[S]) -> Result<Vec<Vec<f64>>> {
        let idx = group
            .iter()
            .map(|id| self.trade_index(id.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.sum_indices(&idx))
    }

    /// Coefficients of the whole set.
    pub fn total_coefficients(&self) -> Vec<Vec<f64>> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.sum_indices(&all)
    }

    fn sum_indices(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        (0..self.n_dates())
            .map(|k| {
                (0..self.basis.len())
                    .map(|l| fsum(idx.iter().map(|&i| self.coefficients[i][k][l])))
                    .collect()
            })
            .collect()
    }

    /// CSV rows `trade,date,basis_index,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trade,date,basis_index,value\n");
        for (i, id) in self.trade_ids.iter().enumerate() {
            for (k, date) in self.dates.iter().enumerate() {
                for (l, a) in self.coefficients[i][k].iter().enumerate() {
                    out.push_str(&format!("{id},{date:?},{l},{a:?}\n"));
                }
            }
        }
        out
    }

    /// Union with another set on the same basis and cube.
    pub fn merged(&self, other: &RegressionSet) -> Result<RegressionSet> {
        if self.basis != other.basis || self.dates != other.dates {
            return Err(Error::StateMismatch("regression sets use different bases or dates".into()));
        }
        if self.cube_identity != other.cube_identity {
            return Err(Error::StateMismatch("regression sets come from different cubes".into()));
        }
        let mut out = self.clone();
        for (i, id) in other.trade_ids.iter().enumerate() {
            let fits = other.coefficients[i]
                .iter()
                .zip(&other.residual_rms[i])
                .map(|(c, r)| TradeFit {
                    coefficients: c.clone(),
                    residual_rms: *r,
                })
                .collect();
            out.insert(id, fits)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisConfig, BasisFamily};
    use crate::market::Measure;
    use proptest::prelude::*;

    fn random_design(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed | 1;
        DMatrix::from_fn(rows, cols, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 10_000) as f64 / 5000.0 - 1.0
        })
    }

    #[test]
    fn identity_design_has_unit_singular_values() {
        let f = DesignFactorization::from_design(DMatrix::identity(4, 4), 0, (0..4).collect()).unwrap();
        assert!(f.singular_values().iter().all(|s| (s - 1.0).abs() < 1e-15));
        assert!(!f.truncated());
    }

    #[test]
    fn duplicated_column_is_truncated() {
        let mut a = random_design(20, 3, 4);
        let col = a.column(1).clone_owned();
        a.set_column(2, &col);
        let f = DesignFactorization::from_design(a, 0, (0..20).collect()).unwrap();
        assert!(f.truncated());
        assert_eq!(f.rank(), 2);
        assert!(f.singular_values().iter().any(|&s| s < f.threshold()));
    }

    #[test]
    fn too_few_paths() {
        assert!(matches!(
            DesignFactorization::from_design(DMatrix::zeros(2, 3), 0, vec![0, 1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn matches_normal_equations() {
        let a = random_design(50, 5, 99);
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = DesignFactorization::from_design(a.clone(), 0, (0..50).collect()).unwrap();
        let fit = fit_trade(&f, &b).unwrap();
        let ata = a.tr_mul(&a);
        let atb = a.tr_mul(&DVector::from_column_slice(&b));
        let x = ata.cholesky().unwrap().solve(&atb);
        for (p, q) in fit.coefficients.iter().zip(x.iter()) {
            assert!((p - q).abs() <= 1e-8 * q.abs().max(1e-3));
        }
    }

    #[test]
    fn exact_targets_are_recovered() {
        let a = random_design(30, 4, 5);
        let f = DesignFactorization::from_design(a.clone(), 0, (0..30).collect()).unwrap();
        let target: Vec<f64> = (0..30).map(|i| 2.0 * a[(i, 1)] + 3.0 * a[(i, 3)]).collect();
        let fit = fit_trade(&f, &target).unwrap();
        let expected = [0.0, 2.0, 0.0, 3.0];
        for (c, e) in fit.coefficients.iter().zip(expected) {
            assert!((c - e).abs() < 1e-12);
        }
        assert!(fit.residual_rms < 1e-12);
    }

    #[test]
    fn non_finite_target_names_its_path() {
        let f = DesignFactorization::from_design(DMatrix::identity(3, 2), 0, vec![4, 7, 9]).unwrap();
        assert!(matches!(
            fit_trade(&f, &[1.0, f64::NAN, 0.0]),
            Err(Error::NonFiniteTarget { path: 7 })
        ));
    }

    fn small_cube() -> ScenarioCube {
        let values: Vec<f64> = (0..2 * 20).map(|i| 80.0 + (i * 7 % 41) as f64).collect();
        ScenarioCube::from_values(vec!["S".into()], vec![0.5, 1.0], 20, values, Measure::RiskNeutral, 0)
            .unwrap()
    }

    #[test]
    fn single_exercise_equals_european_fit() {
        let cube = small_cube();
        let spec = BasisSpec::new(BasisConfig {
            family: BasisFamily::Monomial,
            max_degree: vec![2],
            cross_terms: true,
            max_total_degree: None,
            domain: Some(vec![[100.0, 20.0]]),
        })
        .unwrap();
        let fac = DesignFactorizations::build(&cube, &spec, &FitPaths::All).unwrap();
        let payoff = |k: usize, j: usize| (cube.state(k, j)[0] - 100.0).max(0.0);
        let disc = |k: usize, e: usize| (-0.02 * (cube.dates()[e] - cube.dates()[k])).exp();
        let berm = fit_bermudan(&fac, &[1], payoff, disc).unwrap();
        for k in 0..2 {
            let targets: Vec<f64> = (0..20).map(|j| payoff(1, j) * disc(k, 1)).collect();
            let euro = fit_trade(fac.date(k), &targets).unwrap();
            assert_eq!(berm[k], euro);
        }
        let zero = fit_bermudan(&fac, &[0, 1], |_, _| 0.0, disc).unwrap();
        assert!(zero.iter().all(|f| f.coefficients.iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn portfolio_coefficients_sum_trades() {
        let spec = BasisSpec::quadratic(1);
        let mut set = RegressionSet::new(spec, vec![1.0], "x".into());
        for (id, c) in [("b", [1.0, 2.0, 3.0]), ("a", [0.5, -1.0, 0.25]), ("c", [0.1, 0.2, 0.3])] {
            set.insert(id, vec![TradeFit { coefficients: c.to_vec(), residual_rms: 0.0 }]).unwrap();
        }
        assert_eq!(set.trade_ids(), &["a", "b", "c"]);
        assert_eq!(set.portfolio_coefficients(&["b"]).unwrap()[0], vec![1.0, 2.0, 3.0]);
        let total = set.total_coefficients();
        assert_eq!(total, set.portfolio_coefficients(&["c", "a", "b"]).unwrap());
        assert!(matches!(set.portfolio_coefficients(&["zz"]), Err(Error::Lookup { .. })));
        assert!(set.to_csv().starts_with("trade,date,basis_index,value\na,1.0,0,0.5\n"));
    }

    proptest! {
        #[test]
        fn fit_is_linear_in_targets(seed in 1u64..1000, c in -5.0f64..5.0) {
            let a = random_design(25, 4, seed);
            let f = DesignFactorization::from_design(a, 0, (0..25).collect()).unwrap();
            let x: Vec<f64> = (0..25).map(|i| ((i as u64 * seed) % 17) as f64).collect();
            let y: Vec<f64> = (0..25).map(|i| ((i as u64 + seed) % 11) as f64).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + c * b).collect();
            let fx = fit_trade(&f, &x).unwrap();
            let fy = fit_trade(&f, &y).unwrap();
            let fxy = fit_trade(&f, &xy).unwrap();
            for l in 0..4 {
                let lin = fx.coefficients[l] + c * fy.coefficients[l];
                prop_assert!((lin - fxy.coefficients[l]).abs() < 1e-9 * (1.0 + lin.abs()));
            }
        }
    }
}
