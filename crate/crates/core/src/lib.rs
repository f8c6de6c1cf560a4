//! Local-feedback real-time optimal power flow for radial distribution feeders.
//!
//! The crate models a single-phase radial feeder with the branch flow
//! equations, trains per-node feedback policies against chance-constrained
//! voltage limits with a stochastic primal-dual method, and runs the trained
//! controller against the nonlinear plant while tracking the time-varying OPF
//! optimum.
//!
//! Everything is in per-unit. Voltages are squared magnitudes unless a
//! function says otherwise.

pub mod config;
pub mod controller;
pub mod error;
pub mod feeder;
pub mod oracle;
pub mod policy;
pub mod powerflow;
pub mod runner;
pub mod scenario;
pub mod trainer;

pub use controller::{
    check_stability, lemma1_check, rho_alpha, solve_equilibrium, step, tracking_bound, ControllerConfig,
    ControllerState, Equilibrium, Plant, StabilityReport,
};
pub use error::{Error, Result};
pub use feeder::{build_sensitivities, load_feeder, parse_feeder, Bus, FeederGraph, Line, LinearVoltageModel};
pub use oracle::{baseline_step, gamma_estimate, solve_opf_linear, BaselineState, OpfSolution};
pub use policy::{init_policy, Arch, MlpChannel, PolicyParams};
pub use powerflow::{env_voltage, residual, solve_linear, solve_nonlinear, InjectionState, PowerFlowSolution};
pub use scenario::{generate_profile, project_box, BoxLimits, CostModel, GeneratorConfig, Scenario, ScenarioStep};
pub use trainer::{train, TrainerConfig, TrainerState};
