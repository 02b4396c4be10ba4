//! EB-CBF safety filter.
//!
//! At each state the drift posterior defines a credible ellipsoid
//! `ℱ(x) = {v : (v − μ_f)ᵀ Σ_f⁻¹ (v − μ_f) ≤ β_f²}`. The worst case of the
//! drift-side barrier term over the ellipsoid has the closed form
//!
//! ```text
//! Φ̲(x) = ∇h_EBᵀ μ_f(x) + γ·h_EB(x) − β_f · ‖Σ_f(x)^{1/2} ∇h_EB(x)‖₂,
//! ```
//!
//! which turns the uniform barrier inequality into a single linear
//! constraint `Φ̲(x) + ∇h_EBᵀ g(x) u ≥ 0` in the input. The filter solves
//! the corresponding minimum-deviation quadratic program; without input
//! bounds the solution is the usual half-space projection of the nominal
//! input, with box bounds the one-constraint program is solved exactly by
//! active-set enumeration.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::barrier::BarrierSpec;
use crate::error::{Error, Result};
use crate::gp::TrainedGp;

/// Below this norm of `∇h_EBᵀ g(x)` the barrier constraint cannot be
/// influenced by the input and an active constraint is reported as
/// degenerate.
pub const DEGENERACY_TOLERANCE: f64 = 1e-10;

pub type ControlFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Nominal controller the filter minimally deviates from.
#[derive(Clone)]
pub enum NominalController {
    Zero,
    Constant(DVector<f64>),
    Custom(ControlFn),
}

impl NominalController {
    pub fn eval(&self, x: &DVector<f64>, input_dim: usize) -> DVector<f64> {
        match self {
            NominalController::Zero => DVector::zeros(input_dim),
            NominalController::Constant(u) => u.clone(),
            NominalController::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for NominalController {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NominalController::Zero => write!(f, "Zero"),
            NominalController::Constant(u) => write!(f, "Constant({u:?})"),
            NominalController::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Safety-filter settings: class-K slope `γ` (with `α(h) = γ·h`), drift
/// ellipsoid radius `β_f`, optional per-channel input bounds, and the
/// nominal controller.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub gamma: f64,
    pub beta_f: f64,
    pub input_bounds: Option<Vec<(f64, f64)>>,
    pub nominal: NominalController,
}

impl FilterConfig {
    pub fn new(gamma: f64, beta_f: f64) -> Result<Self> {
        let cfg = FilterConfig {
            gamma,
            beta_f,
            input_bounds: None,
            nominal: NominalController::Zero,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::input("class-K slope gamma must be positive"));
        }
        if !(self.beta_f >= 0.0 && self.beta_f.is_finite()) {
            return Err(Error::input("ellipsoid radius beta_f must be >= 0"));
        }
        if let Some(bounds) = &self.input_bounds {
            if bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
                return Err(Error::input("input bounds must satisfy lo <= hi"));
            }
        }
        Ok(())
    }
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues are floored at `1e-10 · trace`; values below
/// `−1e-6 · max(trace, 1e-300)` indicate a matrix that is not a posterior
/// covariance and raise a numerical error.
pub fn sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let trace = sym.trace();
    let mut eig = sym.symmetric_eigen();
    let floor = 1e-10 * trace.max(0.0);
    let hard = -1e-6 * trace.abs().max(1e-300);
    for v in eig.eigenvalues.iter_mut() {
        if *v < hard {
            return Err(Error::numerical(format!(
                "matrix is not positive semi-definite (eigenvalue {v:.3e})"
            )));
        }
        *v = v.max(floor).sqrt();
    }
    Ok(eig.recompose())
}

/// Everything the filter needs at one state, computed once.
#[derive(Debug, Clone)]
pub struct FilterTerms {
    /// Barrier value `h_EB(x)`.
    pub h: f64,
    /// Barrier gradient `∇h_EB(x)`.
    pub grad: DVector<f64>,
    /// Drift posterior mean `μ_f(x)`.
    pub drift_mean: DVector<f64>,
    /// Drift posterior covariance `Σ_f(x)` (floored).
    pub drift_cov: DMatrix<f64>,
    /// Worst-case drift-side term `Φ̲(x)`.
    pub phi_lower: f64,
    /// Input direction `(∇h_EBᵀ g(x))ᵀ`.
    pub lg: DVector<f64>,
}

/// Closed form of the ellipsoid infimum from precomputed pieces.
pub fn phi_lower_from_parts(
    grad: &DVector<f64>,
    drift_mean: &DVector<f64>,
    drift_cov: &DMatrix<f64>,
    h: f64,
    gamma: f64,
    beta_f: f64,
) -> Result<f64> {
    let root = sqrt_spd(drift_cov)?;
    let scaled = &root * grad;
    Ok(grad.dot(drift_mean) + gamma * h - beta_f * scaled.norm())
}

/// Evaluates barrier, gradient, drift posterior, `Φ̲`, and the input
/// direction at `x`.
pub fn filter_terms(
    model: &TrainedGp,
    spec: &BarrierSpec,
    cfg: &FilterConfig,
    x: &DVector<f64>,
) -> Result<FilterTerms> {
    cfg.validate()?;
    let h = spec.h_eb(model, x)?;
    let grad = spec.grad_h_eb(model, x)?;
    let (drift_mean, drift_cov) = model.posterior_drift(x)?;
    let phi = phi_lower_from_parts(&grad, &drift_mean, &drift_cov, h, cfg.gamma, cfg.beta_f)?;
    let lg = model.phs().g(x).transpose() * &grad;
    Ok(FilterTerms {
        h,
        grad,
        drift_mean,
        drift_cov,
        phi_lower: phi,
        lg,
    })
}

/// Worst-case drift-side barrier term
/// `Φ̲(x) = ∇h_EBᵀ μ_f + γ·h_EB − β_f‖Σ_f^{1/2}∇h_EB‖₂`.
pub fn phi_lower(
    model: &TrainedGp,
    spec: &BarrierSpec,
    cfg: &FilterConfig,
    x: &DVector<f64>,
) -> Result<f64> {
    Ok(filter_terms(model, spec, cfg, x)?.phi_lower)
}

/// Exact solution of
/// `min ‖u − u_nom‖²  s.t.  lgᵀ·u ≥ −phi  (and lo ≤ u ≤ hi if bounded)`.
///
/// Without bounds this is the closed-form half-space projection. With box
/// bounds the closed form is tried first and feasibility is restored, if
/// needed, by enumerating the active sets of the box (the input dimension
/// is small). An active constraint with vanishing `‖lg‖²` is degenerate;
/// an empty box/half-space intersection is infeasible.
pub fn qp_min_norm_halfspace(
    u_nom: &DVector<f64>,
    lg: &DVector<f64>,
    phi: f64,
    bounds: Option<&[(f64, f64)]>,
) -> Result<DVector<f64>> {
    if u_nom.len() != lg.len() {
        return Err(Error::input("nominal input and lg dimension mismatch"));
    }
    let denom = lg.norm_squared();
    let psi = phi + lg.dot(u_nom);

    let unconstrained = if psi >= 0.0 {
        u_nom.clone()
    } else {
        if lg.norm() <= DEGENERACY_TOLERANCE {
            return Err(Error::Degenerate(format!(
                "barrier constraint active (psi = {psi:.3e}) but input direction vanishes"
            )));
        }
        u_nom - lg * (psi / denom)
    };

    let Some(bounds) = bounds else {
        return Ok(unconstrained);
    };
    if bounds.len() != u_nom.len() {
        return Err(Error::input("input bounds dimension mismatch"));
    }

    let tol = 1e-9 * (1.0 + phi.abs() + lg.norm() * (1.0 + u_nom.norm()));
    let in_box = |u: &DVector<f64>| {
        u.iter()
            .zip(bounds)
            .all(|(&ui, &(lo, hi))| ui >= lo - tol && ui <= hi + tol)
    };
    let in_halfspace = |u: &DVector<f64>| lg.dot(u) + phi >= -tol;

    if in_box(&unconstrained) && in_halfspace(&unconstrained) {
        return Ok(unconstrained);
    }

    let m = u_nom.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut consider = |u: DVector<f64>| {
        if in_box(&u) && in_halfspace(&u) {
            let d = (&u - u_nom).norm_squared();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, u));
            }
        }
    };

    // Box projection of the nominal input (half-space inactive case).
    let clamped = DVector::from_fn(m, |i, _| u_nom[i].clamp(bounds[i].0, bounds[i].1));
    consider(clamped);

    // Half-space active: enumerate {free, lo, hi} per coordinate and solve
    // the equality-constrained projection on the free block.
    let combos = 3usize.pow(m as u32);
    for code in 0..combos {
        let mut c = code;
        let mut fixed = vec![None::<f64>; m];
        for item in fixed.iter_mut() {
            *item = match c % 3 {
                0 => None,
                1 => Some(f64::NAN), // placeholder, replaced below
                _ => Some(f64::INFINITY),
            };
            c /= 3;
        }
        let mut u = DVector::zeros(m);
        let mut target = -phi;
        let mut free_norm2 = 0.0;
        let mut free_dot_nom = 0.0;
        for i in 0..m {
            match fixed[i] {
                Some(v) if v.is_nan() => {
                    u[i] = bounds[i].0;
                    target -= lg[i] * u[i];
                }
                Some(_) => {
                    u[i] = bounds[i].1;
                    target -= lg[i] * u[i];
                }
                None => {
                    free_norm2 += lg[i] * lg[i];
                    free_dot_nom += lg[i] * u_nom[i];
                }
            }
        }
        if free_norm2 <= DEGENERACY_TOLERANCE * DEGENERACY_TOLERANCE {
            // No input authority on the free block: only consistent if the
            // fixed coordinates already satisfy the equality.
            if (target - free_dot_nom).abs() > tol {
                continue;
            }
            for i in 0..m {
                if fixed[i].is_none() {
                    u[i] = u_nom[i];
                }
            }
        } else {
            let shift = (target - free_dot_nom) / free_norm2;
            for i in 0..m {
                if fixed[i].is_none() {
                    u[i] = u_nom[i] + lg[i] * shift;
                }
            }
        }
        consider(u);
    }

    match best {
        Some((_, u)) => Ok(u),
        None => Err(Error::Infeasible(
            "input box and barrier half-space do not intersect".into(),
        )),
    }
}

/// The EB-CBF safety filter: the input closest to `u_nom` satisfying
/// `Φ̲(x) + ∇h_EBᵀ g(x) u ≥ 0` within the input set.
pub fn filter_control(
    model: &TrainedGp,
    spec: &BarrierSpec,
    cfg: &FilterConfig,
    x: &DVector<f64>,
    u_nom: &DVector<f64>,
) -> Result<DVector<f64>> {
    let terms = filter_terms(model, spec, cfg, x)?;
    filter_control_from_terms(&terms, cfg, u_nom)
}

/// Filter step from precomputed terms (the hot path in rollouts).
pub fn filter_control_from_terms(
    terms: &FilterTerms,
    cfg: &FilterConfig,
    u_nom: &DVector<f64>,
) -> Result<DVector<f64>> {
    qp_min_norm_halfspace(u_nom, &terms.lg, terms.phi_lower, cfg.input_bounds.as_deref())
}

/// Constraint residual `Φ̲(x) + ∇h_EBᵀ g(x) u`; nonnegative iff `u` is
/// admissible at `x`.
pub fn ebcbf_constraint_residual(
    model: &TrainedGp,
    spec: &BarrierSpec,
    cfg: &FilterConfig,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    let terms = filter_terms(model, spec, cfg, x)?;
    Ok(terms.phi_lower + terms.lg.dot(u))
}
