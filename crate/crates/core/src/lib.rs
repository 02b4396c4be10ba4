//! Learning port-Hamiltonian dynamics from noisy sampled trajectories with
//! structured Gaussian-process regression, and filtering controls through an
//! energy-aware Bayesian control barrier function (EB-CBF) with Monte-Carlo
//! verification of its high-probability safety guarantee.
//!
//! The pipeline, bottom to top:
//!
//! * [`kernels`] — ARD squared-exponential kernel, analytic derivatives, and
//!   the port-Hamiltonian matrix kernel.
//! * [`multistep`] — variable-step linear multistep operators projecting
//!   noisy state sequences into derivative-consistent labels.
//! * [`gp`] — marginal-likelihood fitting and the closed-form posteriors
//!   over the drift, the Hamiltonian, and kinetic/potential energy.
//! * [`barrier`] — energy-aware allowable sets evaluated on conservative
//!   credible bands, combined into the barrier `h_EB`.
//! * [`filter`] — the worst-case drift bound over the credible ellipsoid and
//!   the closed-form quadratic-program safety filter.
//! * [`sim`] — ground-truth benchmarks, RK4 integration, dataset generation,
//!   closed-loop rollouts, and Monte-Carlo safety verification.

pub mod barrier;
pub mod error;
pub mod filter;
pub mod gp;
pub mod kernels;
pub mod multistep;
pub mod seeding;
pub mod sim;


pub use barrier::{BarrierSpec, CombineMode, EnergyConstraint, Threshold};
pub use error::{Error, Result};
pub use filter::{FilterConfig, NominalController};
pub use gp::{Dataset, GpOptimizerConfig, ModelFile, TrainedGp};
pub use sim::{MassSpring, McConfig, McSummary, PhaseGrid, SimConfig, Trajectory};


pub use kernels::{KernelHyperparams, PhsStructure};
pub use multistep::MultistepOperators;

