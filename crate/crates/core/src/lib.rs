//! Valuation adjustments on a desk-sized portfolio by trade-level regression.
//!
//! Every trade is regressed on one shared set of basis functions, so a
//! portfolio is just the sum of its trades' coefficient vectors. Scenario
//! selection (exposure sign, expected-shortfall tail) is made once at
//! portfolio level and then reused for every trade, which makes trade-level
//! allocations add up to the portfolio figure and lets new trades be priced
//! incrementally.
//!
//! The pipeline, bottom-up:
//!
//! - [`market`]: simulated paths, augmentation, shocks, pathwise Jacobians.
//! - [`basis`], [`regression`]: shared basis and one SVD per date.
//! - [`conditioning`]: sign, ES and VaR scenario sets.
//! - [`credit`], [`xva`]: CVA, DVA, FCA, FVA, initial margin and MVA.
//! - [`sensitivities`]: chain-rule deltas and gammas.
//! - [`allocation`], [`state`]: trade allocation and incremental updates.
//! - [`oracle`]: brute-force references used by the tests.
//! - [`pipeline`], [`report`]: file-driven runs and their outputs.

pub mod allocation;
pub mod basis;
pub mod conditioning;
pub mod credit;
pub mod error;
pub mod market;
pub mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod regression;
pub mod report;
pub mod sensitivities;
pub mod state;
pub mod trades;
pub mod xva;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/regression.md")]
    mod regression {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    mod conditioning {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/sensitivities.md")]
    mod sensitivities {}
    #[doc = include_str!("../../../book/src/incremental.md")]
    mod incremental {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
