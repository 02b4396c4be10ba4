//! Energy-aware Bayesian barriers.
//!
//! A user-specified allowable set is described in configuration/energy
//! coordinates by a list of constraints: kinematic margins `h_q(q) ≥ 0`
//! and upper or lower bounds on kinetic, potential, or total energy.
//! Evaluating each energy bound on the conservative side of its posterior
//! credible band (`μ + β·σ` for upper bounds, `μ − β·σ` for lower bounds)
//! and combining the margins with a minimum (or a smooth soft-min) produces
//! the barrier `h_EB` whose superlevel set is an inner approximation of the
//! allowable set with high posterior probability.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gp::{split_state, TrainedGp};

/// Scalar function of the configuration `q`.
pub type ConfigFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Band multiplier for a pointwise credible level `1 − η`:
/// `β = sqrt(2 ln(1/η))`.
pub fn beta_from_eta(eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::input("confidence parameter must lie in (0, 1)"));
    }
    Ok((2.0 * (1.0 / eta).ln()).sqrt())
}

/// Band multiplier made uniform over `cells` evaluation points by a
/// Bonferroni correction: `β = sqrt(2 ln(cells/η))`.
pub fn beta_from_eta_on_grid(eta: f64, cells: usize) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::input("confidence parameter must lie in (0, 1)"));
    }
    if cells == 0 {
        return Err(Error::input("grid must have at least one cell"));
    }
    Ok((2.0 * (cells as f64 / eta).ln()).sqrt())
}

/// An energy bound: either a constant or a function of the configuration
/// (e.g. a kinematic constraint `q ≥ −1` recast as the kinetic-energy
/// budget `T̄(q) = q + 1`).
#[derive(Clone)]
pub enum Threshold {
    Constant(f64),
    OfConfiguration(ConfigFn),
}

impl Threshold {
    /// Affine threshold `offset + coeffs·q`.
    pub fn affine(offset: f64, coeffs: DVector<f64>) -> Self {
        Threshold::OfConfiguration(Arc::new(move |q| offset + coeffs.dot(q)))
    }

    pub fn eval(&self, q: &DVector<f64>) -> f64 {
        match self {
            Threshold::Constant(c) => *c,
            Threshold::OfConfiguration(f) => f(q),
        }
    }
}

impl fmt::Debug for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Constant(c) => write!(f, "Constant({c})"),
            Threshold::OfConfiguration(_) => write!(f, "OfConfiguration(..)"),
        }
    }
}

/// One constraint of the allowable set.
///
/// Upper-bound constraints consume the upper credible band `μ + βσ` of
/// their energy component; lower-bound constraints the lower band
/// `μ − βσ`. Kinematic constraints involve no posterior quantity.
#[derive(Clone)]
pub enum EnergyConstraint {
    /// `h_q(q) ≥ 0`.
    Kinematic(ConfigFn),
    /// `T(q, p) ≤ T̄(q)`.
    KineticUpper(Threshold),
    /// `V(q) ≤ V̄(q)`.
    PotentialUpper(Threshold),
    /// `H(q, p) ≤ H̄(q)`.
    TotalUpper(Threshold),
    /// `H(q, p) ≥ H̲(q)`.
    TotalLower(Threshold),
}

impl fmt::Debug for EnergyConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnergyConstraint::Kinematic(_) => write!(f, "Kinematic(..)"),
            EnergyConstraint::KineticUpper(t) => write!(f, "KineticUpper({t:?})"),
            EnergyConstraint::PotentialUpper(t) => write!(f, "PotentialUpper({t:?})"),
            EnergyConstraint::TotalUpper(t) => write!(f, "TotalUpper({t:?})"),
            EnergyConstraint::TotalLower(t) => write!(f, "TotalLower({t:?})"),
        }
    }
}

/// Margin of an upper energy bound evaluated on the upper credible band.
pub fn upper_band_margin(bound: f64, mean: f64, sd: f64, beta: f64) -> f64 {
    bound - (mean + beta * sd)
}

/// Margin of a lower energy bound evaluated on the lower credible band.
pub fn lower_band_margin(bound: f64, mean: f64, sd: f64, beta: f64) -> f64 {
    (mean - beta * sd) - bound
}

impl EnergyConstraint {
    /// Kinematic constraint `q[index] ≥ lower`.
    pub fn position_min(index: usize, lower: f64) -> Self {
        EnergyConstraint::Kinematic(Arc::new(move |q| q[index] - lower))
    }

    /// Kinematic constraint `q[index] ≤ upper`.
    pub fn position_max(index: usize, upper: f64) -> Self {
        EnergyConstraint::Kinematic(Arc::new(move |q| upper - q[index]))
    }

    /// The constraint margin at `x` with band multiplier `beta`; positive
    /// means satisfied on the conservative band.
    pub fn margin(&self, model: &TrainedGp, x: &DVector<f64>, beta: f64) -> Result<f64> {
        let mut eval = EnergyEval::new(model, x)?;
        self.margin_with(&mut eval, beta)
    }

    fn margin_with(&self, eval: &mut EnergyEval<'_>, beta: f64) -> Result<f64> {
        Ok(match self {
            EnergyConstraint::Kinematic(h_q) => h_q(&eval.q),
            EnergyConstraint::KineticUpper(bound) => {
                let (mean, sd) = eval.kinetic()?;
                upper_band_margin(bound.eval(&eval.q), mean, sd, beta)
            }
            EnergyConstraint::PotentialUpper(bound) => {
                let (mean, sd) = eval.potential()?;
                upper_band_margin(bound.eval(&eval.q), mean, sd, beta)
            }
            EnergyConstraint::TotalUpper(bound) => {
                let (mean, sd) = eval.total()?;
                upper_band_margin(bound.eval(&eval.q), mean, sd, beta)
            }
            EnergyConstraint::TotalLower(bound) => {
                let (mean, sd) = eval.total()?;
                lower_band_margin(bound.eval(&eval.q), mean, sd, beta)
            }
        })
    }
}

/// Caches the posterior energy queries shared by the constraints of one
/// barrier evaluation at a fixed state.
struct EnergyEval<'m> {
    model: &'m TrainedGp,
    x: DVector<f64>,
    q: DVector<f64>,
    p: DVector<f64>,
    total: Option<(f64, f64)>,
    kinetic: Option<(f64, f64)>,
    potential: Option<(f64, f64)>,
}

impl<'m> EnergyEval<'m> {
    fn new(model: &'m TrainedGp, x: &DVector<f64>) -> Result<Self> {
        let (q, p) = split_state(x)?;
        Ok(EnergyEval {
            model,
            x: x.clone(),
            q,
            p,
            total: None,
            kinetic: None,
            potential: None,
        })
    }

    fn total(&mut self) -> Result<(f64, f64)> {
        if self.total.is_none() {
            let (mean, var) = self.model.posterior_hamiltonian(&self.x)?;
            self.total = Some((mean, var.sqrt()));
        }
        Ok(self.total.unwrap())
    }

    fn kinetic(&mut self) -> Result<(f64, f64)> {
        if self.kinetic.is_none() {
            let (mean, var) = self.model.posterior_kinetic(&self.q, &self.p)?;
            self.kinetic = Some((mean, var.sqrt()));
        }
        Ok(self.kinetic.unwrap())
    }

    fn potential(&mut self) -> Result<(f64, f64)> {
        if self.potential.is_none() {
            let (mean, var) = self.model.posterior_potential(&self.q)?;
            self.potential = Some((mean, var.sqrt()));
        }
        Ok(self.potential.unwrap())
    }
}

/// How constraint margins combine into one barrier value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Pointwise minimum; piecewise smooth.
    ExactMin,
    /// Smooth soft-min `−(1/τ)·ln Σ exp(−τ·mᵢ)`; always a lower bound on
    /// the exact minimum and within `ln(N)/τ` of it.
    SoftMin,
}

/// Barrier specification: the allowable-set constraints together with the
/// band multiplier and the combination rule.
#[derive(Debug, Clone)]
pub struct BarrierSpec {
    pub constraints: Vec<EnergyConstraint>,
    pub beta_eb: f64,
    pub softmin_temperature: f64,
    pub combine_mode: CombineMode,
}

/// Default soft-min temperature; tight enough that the smooth barrier
/// tracks the exact minimum to `ln(N)/τ ≈ 0.05` for a handful of
/// constraints.
pub const DEFAULT_SOFTMIN_TEMPERATURE: f64 = 20.0;

impl BarrierSpec {
    pub fn new(
        constraints: Vec<EnergyConstraint>,
        beta_eb: f64,
        softmin_temperature: f64,
        combine_mode: CombineMode,
    ) -> Result<Self> {
        let spec = BarrierSpec {
            constraints,
            beta_eb,
            softmin_temperature,
            combine_mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.constraints.is_empty() {
            return Err(Error::input("barrier needs at least one constraint"));
        }
        if !(self.beta_eb >= 0.0 && self.beta_eb.is_finite()) {
            return Err(Error::input("band multiplier must be finite and >= 0"));
        }
        if !(self.softmin_temperature > 0.0) {
            return Err(Error::input("soft-min temperature must be positive"));
        }
        Ok(())
    }

    /// All constraint margins at `x` under the configured band multiplier.
    pub fn margins(&self, model: &TrainedGp, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.validate()?;
        let mut eval = EnergyEval::new(model, x)?;
        self.constraints
            .iter()
            .map(|c| c.margin_with(&mut eval, self.beta_eb))
            .collect()
    }

    /// The energy-aware Bayesian barrier at `x`.
    pub fn h_eb(&self, model: &TrainedGp, x: &DVector<f64>) -> Result<f64> {
        let margins = self.margins(model, x)?;
        Ok(match self.combine_mode {
            CombineMode::ExactMin => margins.iter().cloned().fold(f64::INFINITY, f64::min),
            CombineMode::SoftMin => softmin(&margins, self.softmin_temperature),
        })
    }

    /// Soft-min weights at `x`: the convex combination the smooth barrier
    /// gradient places on each constraint.
    pub fn softmin_weights(&self, model: &TrainedGp, x: &DVector<f64>) -> Result<Vec<f64>> {
        let margins = self.margins(model, x)?;
        let tau = self.softmin_temperature;
        let smax = margins.iter().map(|m| -tau * m).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = margins.iter().map(|m| (-tau * m - smax).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    /// Central finite-difference gradient of the barrier, with per-axis
    /// step `1e-5 · (1 + |x_i|)`. Deterministic for fixed inputs.
    pub fn grad_h_eb(&self, model: &TrainedGp, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.grad_h_eb_with_scale(model, x, 1.0)
    }

    /// As [`Self::grad_h_eb`] with the step scaled by `scale`; the
    /// half-step variant backs the finite-difference oracle in tests.
    pub fn grad_h_eb_with_scale(
        &self,
        model: &TrainedGp,
        x: &DVector<f64>,
        scale: f64,
    ) -> Result<DVector<f64>> {
        let mut grad = DVector::zeros(x.len());
        for i in 0..x.len() {
            let h = scale * 1e-5 * (1.0 + x[i].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = self.h_eb(model, &xp)?;
            let fm = self.h_eb(model, &xm)?;
            let d = (fp - fm) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite barrier gradient component {i} at {x:?}"
                )));
            }
            grad[i] = d;
        }
        Ok(grad)
    }
}

/// `−(1/τ)·ln Σᵢ exp(−τ·mᵢ)`, evaluated stably. Always a lower bound on
/// the exact minimum, within `ln(N)/τ` of it.
pub fn softmin(margins: &[f64], tau: f64) -> f64 {
    let smax = margins.iter().map(|m| -tau * m).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = margins.iter().map(|m| (-tau * m - smax).exp()).sum();
    -(smax + sum.ln()) / tau
}

/// True allowable-set membership for ground-truth energies: used to score
/// how conservatively the barrier inner-approximates the target set.
pub fn true_constraints_satisfied(
    constraints: &[EnergyConstraint],
    q: &DVector<f64>,
    kinetic: f64,
    potential: f64,
) -> bool {
    let total = kinetic + potential;
    constraints.iter().all(|c| match c {
        EnergyConstraint::Kinematic(h_q) => h_q(q) >= 0.0,
        EnergyConstraint::KineticUpper(b) => kinetic <= b.eval(q),
        EnergyConstraint::PotentialUpper(b) => potential <= b.eval(q),
        EnergyConstraint::TotalUpper(b) => total <= b.eval(q),
        EnergyConstraint::TotalLower(b) => total >= b.eval(q),
    })
}
