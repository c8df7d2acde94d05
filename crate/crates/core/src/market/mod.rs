//! Scenario generation: simulated paths of the underlyings on the stopping
//! dates, direct state-space augmentation, shock scenarios for margin, and
//! analytic pathwise derivatives with respect to calibration instruments.

mod config;
mod cube;
mod jacobian;
mod shocks;

pub use config::{
    CalibrationInstrument, MarketConfig, ModelConfig, ModelParameter, ParameterRef, Shift,
    SimulationSpec, UnderlyingConfig, UnderlyingModel,
};
pub use cube::{
    augment_state_space, generate_market, generate_scenarios, AugmentationSpec, Displacement,
    Measure, PathOrigin, ScenarioCube,
};
pub use jacobian::{underlying_jacobian, UnderlyingJacobian};
pub use shocks::{generate_shock_scenarios, ShockScenario, ShockSet, ShockSpec};

