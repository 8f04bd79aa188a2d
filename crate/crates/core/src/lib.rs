//! Local energy trading among prosumers: agent model, welfare, per-agent
//! optimal response, per-slot double-auction clearing and the iterative
//! market mechanisms built on them.
//!
//! Everything is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the unsuffixed type parameters default to `f64` and
//! `*F32` aliases are provided for single precision.

pub mod error;
pub mod market;
pub mod mechanisms;
pub mod model;
mod qp;
pub mod scalar;
pub mod solver;
pub mod verify;
pub mod welfare;

pub use error::{Error, Result};
pub use market::{bid_from_allocation, excess_function, market_clearing, ClearingResult};
pub use mechanisms::{
    compensation_charge, compensation_cost, run_lfsda, run_rtp, run_without_trading,
    solve_centralized_optimal, CentralizedSolution, IterationRecord, MechanismConfig, MechanismKind,
    MechanismRun,
};
pub use model::{
    check_feasible, soc_trajectory, AgentParams, AgentState, Bid, Constraint, FeasibilityReport,
    NetworkParams, PriceProfile, SlotState, TimeGrid, Violation,
};
pub use scalar::Scalar;
pub use solver::{
    brute_force_oracle, lattice_bound, objective_gradient, reconfigure, solve_subproblem, solve_with_market,
    SolveError, SolverConfig, SubproblemSolution,
};
pub use welfare::{
    agent_welfare, demand_utility, generation_cost, marginal_utility, social_welfare,
    total_individual_utility, WelfareBreakdown,
};

pub type AgentParamsF32 = AgentParams<f32>;
pub type NetworkParamsF32 = NetworkParams<f32>;
pub type AgentStateF32 = AgentState<f32>;
pub type SlotStateF32 = SlotState<f32>;
pub type PriceProfileF32 = PriceProfile<f32>;
pub type BidF32 = Bid<f32>;
pub type SolverConfigF32 = SolverConfig<f32>;
pub type SubproblemSolutionF32 = SubproblemSolution<f32>;
pub type ClearingResultF32 = ClearingResult<f32>;
pub type MechanismConfigF32 = MechanismConfig<f32>;
pub type IterationRecordF32 = IterationRecord<f32>;
pub type MechanismRunF32 = MechanismRun<f32>;
pub type CentralizedSolutionF32 = CentralizedSolution<f32>;
