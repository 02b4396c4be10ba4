//! Ground-truth benchmarks, fixed-step integration, dataset generation,
//! closed-loop rollouts, and Monte-Carlo verification of the filter's
//! high-probability safety guarantee.
//!
//! Monte-Carlo verification draws jointly Gaussian drift fields from the
//! posterior on a rectangular phase-plane grid (bilinear interpolation in
//! between), rolls out the filtered closed loop under each draw, and
//! scores the fraction of draws whose trajectory stays in the design safe
//! set. Draw `i` consumes its own RNG stream, so the estimate is
//! reproducible and independent of evaluation order.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierSpec;
use crate::error::{Error, Result};
use crate::filter::{filter_control_from_terms, filter_terms, FilterConfig};
use crate::gp::{jittered_cholesky, Dataset, TrainedGp};
use crate::kernels::PhsStructure;
use crate::seeding::{stream_rng, streams};

/// Relative tolerance on barrier dips: a discrete-time rollout is scored
/// safe when `min_t h_EB ≥ −1e-3·(1 + |h_EB(x0)|)`.
pub const SAFETY_DIP_TOLERANCE: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// Mass-spring oscillator with Hamiltonian
/// `H(q, p) = p²/(2m) + k·q²/2`, interconnection `J = [[0, 1], [−1, 0]]`,
/// dissipation `R = diag(0, d)`, and input map `G = [0, 1]ᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct MassSpring {
    pub stiffness: f64,
    pub mass: f64,
    pub damping: f64,
}

impl MassSpring {
    pub fn new(stiffness: f64, mass: f64, damping: f64) -> Result<Self> {
        if !(stiffness > 0.0 && mass > 0.0 && damping >= 0.0) {
            return Err(Error::input(
                "mass-spring needs stiffness > 0, mass > 0, damping >= 0",
            ));
        }
        Ok(MassSpring {
            stiffness,
            mass,
            damping,
        })
    }

    /// Undamped unit oscillator (`k = m = 1`, `d = 0`).
    pub fn unit() -> Self {
        MassSpring {
            stiffness: 1.0,
            mass: 1.0,
            damping: 0.0,
        }
    }

    pub fn hamiltonian(&self, x: &DVector<f64>) -> f64 {
        self.kinetic(x) + self.potential(x)
    }

    pub fn kinetic(&self, x: &DVector<f64>) -> f64 {
        x[1] * x[1] / (2.0 * self.mass)
    }

    pub fn potential(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.stiffness * x[0] * x[0]
    }

    pub fn grad_hamiltonian(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![self.stiffness * x[0], x[1] / self.mass])
    }

    pub fn phs_structure(&self) -> PhsStructure {
        let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, self.damping]);
        let g = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        PhsStructure::constant(j, r, g).expect("constant structure shapes are consistent")
    }
}

/// A drift field the closed loop can be integrated under: the ground-truth
/// system or a sampled posterior field.
pub trait DriftField {
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl DriftField for MassSpring {
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            x[1] / self.mass,
            -self.stiffness * x[0] - self.damping * x[1] / self.mass,
        ])
    }
}

// ---------------------------------------------------------------------------
// Fixed-step integration
// ---------------------------------------------------------------------------

/// One classical fourth-order Runge–Kutta step of `ẋ = f(x, u)` with the
/// input held constant over the step.
pub fn rk4_step<F>(f: F, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    if !(dt > 0.0) {
        return Err(Error::input("step size must be positive"));
    }
    let k1 = f(x, u);
    let k2 = f(&(x + &k1 * (dt / 2.0)), u);
    let k3 = f(&(x + &k2 * (dt / 2.0)), u);
    let k4 = f(&(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite state after integration step"));
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Simulation settings: time span, fixed step, additive state-noise level,
/// Bernoulli subsampling fraction, and the RNG seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub t0: f64,
    pub tf: f64,
    pub dt: f64,
    pub noise_std: f64,
    pub keep_fraction: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("time step must be positive"));
        }
        if !(self.tf > self.t0) {
            return Err(Error::config("time span must satisfy tf > t0"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise level must be >= 0"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config("keep fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Number of integration steps over the span.
    pub fn steps(&self) -> usize {
        (((self.tf - self.t0) / self.dt).round() as usize).max(1)
    }
}

/// Integrates the true system under `input`, corrupts states with
/// i.i.d. Gaussian noise of level `noise_std`, keeps each sample
/// independently with probability `keep_fraction`, and returns the
/// time-ordered dataset. Deterministic for a fixed seed.
pub fn generate_dataset<U>(
    system: &MassSpring,
    cfg: &SimConfig,
    x0: &DVector<f64>,
    input: U,
) -> Result<Dataset>
where
    U: Fn(f64) -> DVector<f64>,
{
    cfg.validate()?;
    let phs = system.phs_structure();
    let steps = cfg.steps();

    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = cfg.t0 + k as f64 * cfg.dt;
        let u = input(t);
        states.push(x.clone());
        inputs.push(u.clone());
        if k < steps {
            let g = phs.g(&x);
            x = rk4_step(
                |x, u| system.drift(x) + &g * u,
                &x,
                &u,
                cfg.dt,
            )?;
        }
    }

    let mut noise_rng = stream_rng(cfg.seed, streams::DATA_NOISE);
    let mut keep_rng = stream_rng(cfg.seed, streams::DATA_SUBSAMPLE);
    let normal = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(format!("invalid noise level: {e}")))?;

    let mut times = Vec::new();
    let mut kept_states = Vec::new();
    let mut kept_inputs = Vec::new();
    for k in 0..=steps {
        let mut noisy = states[k].clone();
        if cfg.noise_std > 0.0 {
            for v in noisy.iter_mut() {
                *v += normal.sample(&mut noise_rng);
            }
        } else {
            // Keep the noise stream position aligned across noise levels.
            for _ in 0..noisy.len() {
                let _ = normal.sample(&mut noise_rng);
            }
        }
        let keep = keep_rng.random::<f64>() < cfg.keep_fraction;
        if keep {
            times.push(cfg.t0 + k as f64 * cfg.dt);
            kept_states.push(noisy);
            kept_inputs.push(inputs[k].clone());
        }
    }
    if times.is_empty() {
        return Err(Error::config(
            "subsampling removed every sample; increase keep_fraction",
        ));
    }
    Dataset::new(times, kept_states, kept_inputs)
}

/// The all-zero input signal.
pub fn zero_input(input_dim: usize) -> impl Fn(f64) -> DVector<f64> {
    move |_| DVector::zeros(input_dim)
}

/// Scalar sinusoidal excitation `u(t) = amplitude · sin(omega·t)`.
///
/// Driving the oscillator near resonance sweeps the trajectory through a
/// range of amplitudes, which spreads the training data over the phase
/// plane instead of a single energy ring.
pub fn sinusoid_input(amplitude: f64, omega: f64) -> impl Fn(f64) -> DVector<f64> {
    move |t| DVector::from_vec(vec![amplitude * (omega * t).sin()])
}

// ---------------------------------------------------------------------------
// Closed-loop rollout
// ---------------------------------------------------------------------------

/// First time the barrier went negative along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryCrossing {
    pub time: f64,
    pub index: usize,
}

/// A recorded closed-loop path with the barrier evaluated along it.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub h_eb: Vec<f64>,
    pub event: Option<BoundaryCrossing>,
}

impl Trajectory {
    pub fn min_h_eb(&self) -> f64 {
        self.h_eb.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn min_coordinate(&self, index: usize) -> f64 {
        self.states
            .iter()
            .map(|x| x[index])
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes the `t,q,p,u,h_eb,event` schema (2-D state, scalar input);
    /// `event` is 1 on the first boundary-crossing row, else 0.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        if self.states.first().map(|s| s.len()) != Some(2)
            || self.inputs.first().map(|u| u.len()) != Some(1)
        {
            return Err(Error::input(
                "CSV export uses the t,q,p,u,h_eb,event schema and needs state dim 2, input dim 1",
            ));
        }
        writeln!(w, "t,q,p,u,h_eb,event")?;
        for k in 0..self.times.len() {
            let event = match &self.event {
                Some(e) if e.index == k => 1,
                _ => 0,
            };
            writeln!(
                w,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
                self.times[k],
                self.states[k][0],
                self.states[k][1],
                self.inputs[k][0],
                self.h_eb[k],
                event
            )?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

fn tag_time(e: Error, t: f64) -> Error {
    match e {
        Error::Degenerate(m) => Error::Degenerate(format!("t = {t:.6}: {m}")),
        Error::Infeasible(m) => Error::Infeasible(format!("t = {t:.6}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("t = {t:.6}: {m}")),
        other => other,
    }
}

/// Integrates `ẋ = f(x) + g(x)·u` from `x0` over the configured span,
/// with `u` the nominal input or the safety-filtered input, recording the
/// barrier along the path and the first boundary crossing if any.
///
/// `dynamics` supplies the drift `f` (ground truth or a posterior sample);
/// the known input map `g` comes from the model structure. Filter errors
/// propagate tagged with the simulation time at which they occurred.
pub fn rollout_closed_loop(
    dynamics: &dyn DriftField,
    cfg: &FilterConfig,
    filtered: bool,
    x0: &DVector<f64>,
    sim: &SimConfig,
    spec: &BarrierSpec,
    model: &TrainedGp,
) -> Result<Trajectory> {
    sim.validate()?;
    cfg.validate()?;
    let steps = sim.steps();
    let m = model.phs().input_dim();

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut h_values = Vec::with_capacity(steps + 1);
    let mut event = None;

    let mut x = x0.clone();
    for k in 0..=steps {
        let t = sim.t0 + k as f64 * sim.dt;
        let u_nom = cfg.nominal.eval(&x, m);
        let (u, h) = if filtered {
            let terms = filter_terms(model, spec, cfg, &x).map_err(|e| tag_time(e, t))?;
            let u = filter_control_from_terms(&terms, cfg, &u_nom).map_err(|e| tag_time(e, t))?;
            (u, terms.h)
        } else {
            (u_nom, spec.h_eb(model, &x).map_err(|e| tag_time(e, t))?)
        };

        times.push(t);
        states.push(x.clone());
        inputs.push(u.clone());
        h_values.push(h);
        if event.is_none() && h < 0.0 {
            event = Some(BoundaryCrossing { time: t, index: k });
        }

        if k < steps {
            let g = model.phs().g(&x);
            x = rk4_step(|x, u| dynamics.drift(x) + &g * u, &x, &u, sim.dt)
                .map_err(|e| tag_time(e, t))?;
        }
    }

    Ok(Trajectory {
        times,
        states,
        inputs,
        h_eb: h_values,
        event,
    })
}

// ---------------------------------------------------------------------------
// Posterior drift fields on a phase-plane grid
// ---------------------------------------------------------------------------

/// Rectangular grid over the `(q, p)` phase plane. Points are ordered
/// row-major in `q`: index `iq·np + ip` holds `(q_iq, p_ip)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub q_min: f64,
    pub q_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub nq: usize,
    pub np: usize,
}

impl PhaseGrid {
    /// The default verification grid: 61×61 over `[−2, 2]²`.
    pub fn default_grid() -> Self {
        PhaseGrid {
            q_min: -2.0,
            q_max: 2.0,
            p_min: -2.0,
            p_max: 2.0,
            nq: 61,
            np: 61,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_max > self.q_min && self.p_max > self.p_min) {
            return Err(Error::config("grid extents must be nonempty"));
        }
        if self.nq < 2 || self.np < 2 {
            return Err(Error::config("grid needs at least 2 points per axis"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nq * self.np
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q_at(&self, iq: usize) -> f64 {
        self.q_min + (self.q_max - self.q_min) * iq as f64 / (self.nq - 1) as f64
    }

    pub fn p_at(&self, ip: usize) -> f64 {
        self.p_min + (self.p_max - self.p_min) * ip as f64 / (self.np - 1) as f64
    }

    pub fn points(&self) -> Vec<DVector<f64>> {
        let mut pts = Vec::with_capacity(self.len());
        for iq in 0..self.nq {
            for ip in 0..self.np {
                pts.push(DVector::from_vec(vec![self.q_at(iq), self.p_at(ip)]));
            }
        }
        pts
    }
}

/// A fixed drift field given by per-grid-point values, bilinearly
/// interpolated between nodes and clamped at the grid edges.
#[derive(Debug, Clone)]
pub struct SampledDriftField {
    grid: PhaseGrid,
    values: Vec<DVector<f64>>,
}

impl SampledDriftField {
    pub fn new(grid: PhaseGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::input(format!(
                "field has {} values, grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(SampledDriftField { grid, values })
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    fn at(&self, iq: usize, ip: usize) -> &DVector<f64> {
        &self.values[iq * self.grid.np + ip]
    }
}

impl DriftField for SampledDriftField {
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let g = &self.grid;
        let dq = (g.q_max - g.q_min) / (g.nq - 1) as f64;
        let dp = (g.p_max - g.p_min) / (g.np - 1) as f64;
        let fq = ((x[0] - g.q_min) / dq).clamp(0.0, (g.nq - 1) as f64);
        let fp = ((x[1] - g.p_min) / dp).clamp(0.0, (g.np - 1) as f64);
        let iq = (fq.floor() as usize).min(g.nq - 2);
        let ip = (fp.floor() as usize).min(g.np - 2);
        let tq = fq - iq as f64;
        let tp = fp - ip as f64;
        self.at(iq, ip) * ((1.0 - tq) * (1.0 - tp))
            + self.at(iq + 1, ip) * (tq * (1.0 - tp))
            + self.at(iq, ip + 1) * ((1.0 - tq) * tp)
            + self.at(iq + 1, ip + 1) * (tq * tp)
    }
}

/// Draws jointly Gaussian drift values at a fixed set of points from the
/// posterior. The joint factorization is computed once and reused across
/// draws.
#[derive(Debug)]
pub struct JointDriftSampler {
    state_dim: usize,
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
}

impl JointDriftSampler {
    pub fn new(model: &TrainedGp, points: &[DVector<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("sampler needs at least one point"));
        }
        let (mean, cov) = model.joint_drift_posterior(points)?;
        let (chol, _) = jittered_cholesky(&cov).map_err(|e| {
            Error::numerical(format!("joint drift covariance factorization failed: {e}"))
        })?;
        Ok(JointDriftSampler {
            state_dim: model.state_dim(),
            mean,
            chol_l: chol.l(),
        })
    }

    /// Posterior mean at the sampler's points.
    pub fn mean_values(&self) -> Vec<DVector<f64>> {
        self.chunk(&self.mean)
    }

    /// One joint draw, as per-point drift vectors.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DVector<f64>> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let z = DVector::from_fn(self.mean.len(), |_, _| normal.sample(rng));
        let flat = &self.mean + &self.chol_l * z;
        self.chunk(&flat)
    }

    fn chunk(&self, flat: &DVector<f64>) -> Vec<DVector<f64>> {
        flat.as_slice()
            .chunks(self.state_dim)
            .map(|c| DVector::from_column_slice(c))
            .collect()
    }
}

/// One joint posterior draw of the drift at `points`, from stream
/// `MC_DRAW_BASE` of `seed`.
pub fn sample_posterior_drift_field(
    model: &TrainedGp,
    points: &[DVector<f64>],
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let sampler = JointDriftSampler::new(model, points)?;
    let mut rng = stream_rng(seed, streams::MC_DRAW_BASE);
    Ok(sampler.draw(&mut rng))
}

// ---------------------------------------------------------------------------
// Monte-Carlo safety estimate
// ---------------------------------------------------------------------------

/// Monte-Carlo verification settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    pub n_samples: usize,
    /// Rollout horizon in seconds.
    pub horizon: f64,
    /// Rollout step.
    pub dt: f64,
    pub grid: PhaseGrid,
    pub seed: u64,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("need at least one Monte-Carlo sample"));
        }
        if !(self.horizon > 0.0 && self.dt > 0.0) {
            return Err(Error::config("horizon and dt must be positive"));
        }
        self.grid.validate()
    }
}

/// Result of a Monte-Carlo safety estimate with its Wilson 95% interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub n_samples: usize,
    pub n_safe: usize,
    pub safe_fraction: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

/// Wilson score interval for a binomial proportion at z = 1.96.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    assert!(trials > 0, "Wilson interval needs at least one trial");
    let z = 1.96_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Estimates the posterior probability that the filtered closed loop stays
/// in the design safe set over the horizon.
///
/// Each sample draws one drift field jointly over the grid, rolls out the
/// filtered loop from `x0` under it, and scores the trajectory safe when
/// `min_t h_EB ≥ −1e-3·(1 + |h_EB(x0)|)`. Rollout errors count as unsafe.
pub fn mc_safety_estimate(
    model: &TrainedGp,
    spec: &BarrierSpec,
    cfg: &FilterConfig,
    x0: &DVector<f64>,
    mc: &McConfig,
) -> Result<McSummary> {
    mc.validate()?;
    let h0 = spec.h_eb(model, x0)?;
    if h0 < 0.0 {
        return Err(Error::input(format!(
            "initial state is outside the design safe set (h_EB = {h0:.6})"
        )));
    }
    let tol = SAFETY_DIP_TOLERANCE * (1.0 + h0.abs());

    let sampler = JointDriftSampler::new(model, &mc.grid.points())?;
    let sim = SimConfig {
        t0: 0.0,
        tf: mc.horizon,
        dt: mc.dt,
        noise_std: 0.0,
        keep_fraction: 1.0,
        seed: mc.seed,
    };

    let mut n_safe = 0;
    for s in 0..mc.n_samples {
        let mut rng = stream_rng(mc.seed, streams::MC_DRAW_BASE + s as u64);
        let field = SampledDriftField::new(mc.grid.clone(), sampler.draw(&mut rng))?;
        let safe = match rollout_closed_loop(&field, cfg, true, x0, &sim, spec, model) {
            Ok(traj) => traj.min_h_eb() >= -tol,
            Err(_) => false,
        };
        if safe {
            n_safe += 1;
        }
    }

    let (wilson_lo, wilson_hi) = wilson_interval(n_safe, mc.n_samples);
    Ok(McSummary {
        n_samples: mc.n_samples,
        n_safe,
        safe_fraction: n_safe as f64 / mc.n_samples as f64,
        wilson_lo,
        wilson_hi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{CombineMode, EnergyConstraint, Threshold};
    use crate::filter::NominalController;
    use crate::kernels::KernelHyperparams;
    use crate::multistep::assemble_operators;
    use approx::assert_relative_eq;

    fn unit_orbit_model(k: usize, dt: f64) -> TrainedGp {
        let system = MassSpring::unit();
        let times: Vec<f64> = (0..k).map(|i| i as f64 * dt).collect();
        let states: Vec<DVector<f64>> = times
            .iter()
            .map(|t| DVector::from_vec(vec![t.cos(), -t.sin()]))
            .collect();
        let inputs = vec![DVector::zeros(1); k];
        let dataset = Dataset::new(times, states, inputs).unwrap();
        let ops = assemble_operators(dataset.times(), 2, 2).unwrap();
        let hp = KernelHyperparams::new(1.0, DVector::from_vec(vec![1.0, 1.0]), 0.0025).unwrap();
        TrainedGp::new(dataset, hp, system.phs_structure(), ops, 0.0).unwrap()
    }

    #[test]
    fn mass_spring_drift_is_consistent_with_its_hamiltonian() {
        let sys = MassSpring::new(1.3, 0.8, 0.2).unwrap();
        let phs = sys.phs_structure();
        let mut rng = crate::seeding::stream_rng(61, 0);
        use rand::Rng;
        for _ in 0..20 {
            let x: DVector<f64> = DVector::from_vec(vec![
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ]);
            let via_structure = phs.j_r(&x) * sys.grad_hamiltonian(&x);
            assert_relative_eq!(sys.drift(&x), via_structure, epsilon = 1e-14);
        }
        phs.check_structure(&[DVector::zeros(2)]).unwrap();
    }

    #[test]
    fn rk4_zero_field_is_the_identity() {
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let u = DVector::zeros(1);
        let next = rk4_step(|_, _| DVector::zeros(2), &x, &u, 0.1).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn rk4_matches_the_rotation_exponential_to_fifth_order() {
        // Undamped unit oscillator: exp(A·dt) is a rotation matrix.
        let sys = MassSpring::unit();
        let u = DVector::zeros(1);
        let x0 = DVector::from_vec(vec![0.9, -0.4]);
        for dt in [0.05, 0.1, 0.2] {
            let num = rk4_step(|x, _| sys.drift(x), &x0, &u, dt).unwrap();
            let exact = DVector::from_vec(vec![
                x0[0] * dt.cos() + x0[1] * dt.sin(),
                -x0[0] * dt.sin() + x0[1] * dt.cos(),
            ]);
            let err = (&num - &exact).norm();
            assert!(
                err <= 0.02 * dt.powi(5),
                "dt={dt}: error {err:.3e} exceeds C·dt^5"
            );
        }
    }

    #[test]
    fn rk4_reports_non_finite_dynamics() {
        let x = DVector::from_vec(vec![1.0]);
        let u = DVector::zeros(1);
        let err = rk4_step(|_, _| DVector::from_vec(vec![f64::NAN]), &x, &u, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn undamped_energy_is_conserved_over_twenty_seconds() {
        let sys = MassSpring::unit();
        let u = DVector::zeros(1);
        let mut x = DVector::from_vec(vec![1.2, 0.0]);
        let h0 = sys.hamiltonian(&x);
        let dt = 4e-3;
        for _ in 0..5000 {
            x = rk4_step(|x, _| sys.drift(x), &x, &u, dt).unwrap();
        }
        let drift = (sys.hamiltonian(&x) - h0).abs() / h0;
        assert!(drift <= 1e-6, "relative energy drift {drift:.3e}");
    }

    #[test]
    fn noiseless_dataset_lies_on_the_integrated_trajectory() {
        let sys = MassSpring::unit();
        let cfg = SimConfig {
            t0: 0.0,
            tf: 1.0,
            dt: 0.01,
            noise_std: 0.0,
            keep_fraction: 1.0,
            seed: 3,
        };
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let data = generate_dataset(&sys, &cfg, &x0, zero_input(1)).unwrap();
        assert_eq!(data.len(), 101);
        // Compare a few samples against the rotation solution.
        for &k in &[0usize, 37, 100] {
            let t = data.times()[k];
            assert_relative_eq!(data.states()[k][0], t.cos(), epsilon = 1e-9);
            assert_relative_eq!(data.states()[k][1], -t.sin(), epsilon = 1e-9);
        }
    }

    #[test]
    fn dataset_generation_is_deterministic_and_noise_scales() {
        let sys = MassSpring::unit();
        let cfg = SimConfig {
            t0: 0.0,
            tf: 2.0,
            dt: 0.01,
            noise_std: 0.05,
            keep_fraction: 0.5,
            seed: 11,
        };
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let a = generate_dataset(&sys, &cfg, &x0, zero_input(1)).unwrap();
        let b = generate_dataset(&sys, &cfg, &x0, zero_input(1)).unwrap();
        assert_eq!(a, b);

        // Same seed, doubled noise: same kept indices, scaled deviations.
        let cfg2 = SimConfig {
            noise_std: 0.1,
            ..cfg.clone()
        };
        let c = generate_dataset(&sys, &cfg2, &x0, zero_input(1)).unwrap();
        assert_eq!(a.len(), c.len());
        assert_eq!(a.times(), c.times());
        let clean = generate_dataset(
            &sys,
            &SimConfig {
                noise_std: 0.0,
                ..cfg.clone()
            },
            &x0,
            zero_input(1),
        )
        .unwrap();
        for k in 0..a.len() {
            let da = &a.states()[k] - &clean.states()[k];
            let dc = &c.states()[k] - &clean.states()[k];
            assert_relative_eq!(dc, da * 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn benchmark_regime_dataset_has_the_expected_shape() {
        let sys = MassSpring::unit();
        let cfg = SimConfig {
            t0: 0.0,
            tf: 20.0,
            dt: 4e-3,
            noise_std: 0.05,
            keep_fraction: 0.5,
            seed: 7,
        };
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let data = generate_dataset(&sys, &cfg, &x0, zero_input(1)).unwrap();
        assert!((2000..=3000).contains(&data.len()), "K = {}", data.len());
        assert!(data.times().first().unwrap() >= &0.0);
        assert!(data.times().last().unwrap() <= &20.0);
        // Noise magnitude sanity: residuals against the clean trajectory
        // have spread close to 0.05.
        let clean = generate_dataset(
            &sys,
            &SimConfig {
                noise_std: 0.0,
                ..cfg
            },
            &x0,
            zero_input(1),
        )
        .unwrap();
        let mut sq = 0.0;
        let mut count = 0;
        for k in 0..data.len() {
            let d = &data.states()[k] - &clean.states()[k];
            sq += d.norm_squared();
            count += 2;
        }
        let sd = (sq / count as f64).sqrt();
        assert!((0.045..=0.055).contains(&sd), "noise spread {sd}");
    }

    #[test]
    fn empty_subsample_is_a_config_error() {
        let sys = MassSpring::unit();
        let cfg = SimConfig {
            t0: 0.0,
            tf: 0.5,
            dt: 0.01,
            noise_std: 0.0,
            keep_fraction: 1e-300,
            seed: 5,
        };
        let err = generate_dataset(&sys, &cfg, &DVector::from_vec(vec![1.0, 0.0]), zero_input(1))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn grid_points_are_row_major_and_interp_is_exact_on_linear_fields() {
        let grid = PhaseGrid {
            q_min: -1.0,
            q_max: 1.0,
            p_min: -2.0,
            p_max: 2.0,
            nq: 5,
            np: 9,
        };
        let pts = grid.points();
        assert_eq!(pts.len(), 45);
        assert_eq!(pts[0], DVector::from_vec(vec![-1.0, -2.0]));
        assert_eq!(pts[9], DVector::from_vec(vec![-0.5, -2.0]));

        // Linear field is reproduced exactly by bilinear interpolation.
        let linear = |x: &DVector<f64>| {
            DVector::from_vec(vec![2.0 * x[0] - x[1] + 0.5, x[0] + 3.0 * x[1]])
        };
        let field =
            SampledDriftField::new(grid.clone(), pts.iter().map(&linear).collect()).unwrap();
        let probe = DVector::from_vec(vec![0.13, -0.77]);
        assert_relative_eq!(field.drift(&probe), linear(&probe), epsilon = 1e-12);
        // Outside the grid the field clamps to the boundary value.
        let outside = DVector::from_vec(vec![5.0, 0.0]);
        let edge = DVector::from_vec(vec![1.0, 0.0]);
        assert_relative_eq!(field.drift(&outside), linear(&edge), epsilon = 1e-12);
    }

    #[test]
    fn joint_draws_have_the_right_mean_and_pointwise_radius() {
        let model = unit_orbit_model(12, 0.35);
        let grid = PhaseGrid {
            q_min: -1.2,
            q_max: 1.2,
            p_min: -1.2,
            p_max: 1.2,
            nq: 4,
            np: 4,
        };
        let points = grid.points();
        let sampler = JointDriftSampler::new(&model, &points).unwrap();

        // Pick the probe point and its marginal posterior.
        let probe_idx = 5;
        let (mu, cov) = model.posterior_drift(&points[probe_idx]).unwrap();
        let cov_inv = cov.clone().try_inverse().unwrap();

        let n_draws = 10_000;
        let beta_f = (2.0 * (1.0 / 0.05f64).ln()).sqrt();
        let mut sum = DVector::zeros(2);
        let mut inside = 0;
        for s in 0..n_draws {
            let mut rng = stream_rng(99, streams::MC_DRAW_BASE + s as u64);
            let draw = sampler.draw(&mut rng);
            let v = &draw[probe_idx];
            sum += v;
            let d = v - &mu;
            if d.dot(&(&cov_inv * &d)) <= beta_f * beta_f {
                inside += 1;
            }
        }
        let mean_err = (sum / n_draws as f64 - &mu).norm();
        let sd_scale = cov.trace().sqrt();
        assert!(
            mean_err <= 3.0 * sd_scale / (n_draws as f64).sqrt() + 1e-9,
            "sample mean error {mean_err}"
        );
        // For a 2-D Gaussian the radius β_f² = 2·ln(1/0.05) covers exactly
        // 95%; require at least that minus Monte-Carlo slack.
        let freq = inside as f64 / n_draws as f64;
        let slack = 3.0 * (0.95 * 0.05 / n_draws as f64).sqrt();
        assert!(freq >= 0.95 - slack, "Mahalanobis coverage {freq}");

        // Fixed seed reproducibility.
        let a = sample_posterior_drift_field(&model, &points, 123).unwrap();
        let b = sample_posterior_drift_field(&model, &points, 123).unwrap();
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!(va, vb);
        }
    }

    fn loose_barrier() -> BarrierSpec {
        BarrierSpec::new(
            vec![EnergyConstraint::KineticUpper(Threshold::affine(
                50.0,
                DVector::from_vec(vec![1.0]),
            ))],
            1.0,
            20.0,
            CombineMode::SoftMin,
        )
        .unwrap()
    }

    #[test]
    fn filtered_equals_unfiltered_while_the_constraint_sleeps() {
        let model = unit_orbit_model(12, 0.35);
        let spec = loose_barrier();
        let cfg = FilterConfig::new(1.0, 1.0).unwrap();
        let sim = SimConfig {
            t0: 0.0,
            tf: 2.0,
            dt: 0.01,
            noise_std: 0.0,
            keep_fraction: 1.0,
            seed: 0,
        };
        let x0 = DVector::from_vec(vec![0.8, 0.0]);
        let sys = MassSpring::unit();
        let filt = rollout_closed_loop(&sys, &cfg, true, &x0, &sim, &spec, &model).unwrap();
        let nom = rollout_closed_loop(&sys, &cfg, false, &x0, &sim, &spec, &model).unwrap();
        assert_eq!(filt.times.len(), nom.times.len());
        for k in 0..filt.times.len() {
            assert_relative_eq!(filt.states[k], nom.states[k], epsilon = 1e-12);
            assert_eq!(filt.inputs[k], nom.inputs[k]);
        }
        assert!(filt.event.is_none());
    }

    #[test]
    fn unfiltered_rollout_records_the_boundary_crossing() {
        let model = unit_orbit_model(12, 0.35);
        // Kinematic bound q >= -1 as a kinetic budget: the unfiltered
        // amplitude-1.2 orbit must cross it.
        let spec = BarrierSpec::new(
            vec![EnergyConstraint::KineticUpper(Threshold::affine(
                1.0,
                DVector::from_vec(vec![1.0]),
            ))],
            1.0,
            20.0,
            CombineMode::SoftMin,
        )
        .unwrap();
        let cfg = FilterConfig {
            gamma: 1.0,
            beta_f: 1.0,
            input_bounds: None,
            nominal: NominalController::Zero,
        };
        let sim = SimConfig {
            t0: 0.0,
            tf: 7.0,
            dt: 0.01,
            noise_std: 0.0,
            keep_fraction: 1.0,
            seed: 0,
        };
        let x0 = DVector::from_vec(vec![1.2, 0.0]);
        let sys = MassSpring::unit();
        let traj = rollout_closed_loop(&sys, &cfg, false, &x0, &sim, &spec, &model).unwrap();
        assert!(traj.min_coordinate(0) < -1.0, "orbit must cross q = -1");
        let event = traj.event.expect("crossing event must be recorded");
        assert!(traj.h_eb[event.index] < 0.0);
        assert!(traj.h_eb[..event.index].iter().all(|&h| h >= 0.0));
    }

    #[test]
    fn trajectory_csv_has_the_documented_schema() {
        let traj = Trajectory {
            times: vec![0.0, 0.1],
            states: vec![
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![0.9, -0.1]),
            ],
            inputs: vec![DVector::zeros(1), DVector::from_vec(vec![0.2])],
            h_eb: vec![0.5, -0.01],
            event: Some(BoundaryCrossing {
                time: 0.1,
                index: 1,
            }),
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,q,p,u,h_eb,event");
        assert!(lines.next().unwrap().ends_with(",0"));
        assert!(lines.next().unwrap().ends_with(",1"));
    }

    #[test]
    fn wilson_interval_matches_hand_values() {
        let (lo, hi) = wilson_interval(9, 10);
        assert_relative_eq!(lo, 0.59585, epsilon = 1e-4);
        assert_relative_eq!(hi, 0.98212, epsilon = 1e-4);
        let (lo_all, hi_all) = wilson_interval(10, 10);
        assert!(lo_all > 0.7 && (hi_all - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mc_estimate_is_deterministic_and_saturates_with_conservative_settings() {
        let model = unit_orbit_model(12, 0.35);
        let spec = loose_barrier();
        let cfg = FilterConfig {
            gamma: 1.0,
            beta_f: 5.0,
            input_bounds: None,
            nominal: NominalController::Zero,
        };
        let mc = McConfig {
            n_samples: 20,
            horizon: 1.5,
            dt: 0.01,
            grid: PhaseGrid {
                q_min: -2.0,
                q_max: 2.0,
                p_min: -2.0,
                p_max: 2.0,
                nq: 9,
                np: 9,
            },
            seed: 17,
        };
        let x0 = DVector::from_vec(vec![0.8, 0.0]);
        let a = mc_safety_estimate(&model, &spec, &cfg, &x0, &mc).unwrap();
        let b = mc_safety_estimate(&model, &spec, &cfg, &x0, &mc).unwrap();
        assert_eq!(a.n_safe, b.n_safe);
        // Generous barrier absorbs the model uncertainty entirely.
        assert_eq!(a.n_safe, a.n_samples);
        assert_relative_eq!(a.safe_fraction, 1.0);
        assert!(a.wilson_lo < 1.0 && a.wilson_hi <= 1.0);
    }

    #[test]
    fn mc_estimate_rejects_unsafe_initial_states() {
        let model = unit_orbit_model(12, 0.35);
        let spec = BarrierSpec::new(
            vec![EnergyConstraint::position_min(0, -1.0)],
            1.0,
            20.0,
            CombineMode::SoftMin,
        )
        .unwrap();
        let cfg = FilterConfig::new(1.0, 1.0).unwrap();
        let mc = McConfig {
            n_samples: 2,
            horizon: 0.5,
            dt: 0.01,
            grid: PhaseGrid {
                q_min: -2.0,
                q_max: 2.0,
                p_min: -2.0,
                p_max: 2.0,
                nq: 5,
                np: 5,
            },
            seed: 1,
        };
        let err = mc_safety_estimate(
            &model,
            &spec,
            &cfg,
            &DVector::from_vec(vec![-1.5, 0.0]),
            &mc,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn credible_draws_keep_the_filtered_rollout_safe() {
        // Deterministic invariance per fixed drift sample: whenever a draw
        // stays inside the credible ellipsoid at every grid cell the
        // rollout visits, the filtered trajectory must not leave the
        // design safe set beyond the discretization tolerance.
        let model = unit_orbit_model(16, 0.3);
        let spec = BarrierSpec::new(
            vec![EnergyConstraint::KineticUpper(Threshold::affine(
                1.0,
                DVector::from_vec(vec![1.0]),
            ))],
            crate::barrier::beta_from_eta(0.025).unwrap(),
            20.0,
            CombineMode::SoftMin,
        )
        .unwrap();
        let beta_f = crate::barrier::beta_from_eta(0.025).unwrap();
        let cfg = FilterConfig {
            gamma: 1.0,
            beta_f,
            input_bounds: None,
            nominal: NominalController::Zero,
        };
        let grid = PhaseGrid {
            q_min: -2.0,
            q_max: 2.0,
            p_min: -2.0,
            p_max: 2.0,
            nq: 9,
            np: 9,
        };
        let points = grid.points();
        let sampler = JointDriftSampler::new(&model, &points).unwrap();
        let marginals: Vec<(DVector<f64>, DMatrix<f64>)> = points
            .iter()
            .map(|x| {
                let (mu, cov) = model.posterior_drift(x).unwrap();
                (mu, cov.try_inverse().unwrap())
            })
            .collect();

        let x0 = DVector::from_vec(vec![0.9, 0.0]);
        let h0 = spec.h_eb(&model, &x0).unwrap();
        assert!(h0 >= 0.0);
        let tol = SAFETY_DIP_TOLERANCE * (1.0 + h0.abs());
        let sim = SimConfig {
            t0: 0.0,
            tf: 2.0,
            dt: 0.01,
            noise_std: 0.0,
            keep_fraction: 1.0,
            seed: 0,
        };

        let dq = (grid.q_max - grid.q_min) / (grid.nq - 1) as f64;
        let dp = (grid.p_max - grid.p_min) / (grid.np - 1) as f64;
        let mut credible_draws = 0;
        for s in 0..12u64 {
            let mut rng = stream_rng(77, streams::MC_DRAW_BASE + s);
            let values = sampler.draw(&mut rng);
            let field = SampledDriftField::new(grid.clone(), values.clone()).unwrap();
            let Ok(traj) = rollout_closed_loop(&field, &cfg, true, &x0, &sim, &spec, &model)
            else {
                continue;
            };
            // Membership at the nodes of every visited cell.
            let mut inside = true;
            'outer: for x in &traj.states {
                let iq = (((x[0] - grid.q_min) / dq).floor() as isize)
                    .clamp(0, grid.nq as isize - 2) as usize;
                let ip = (((x[1] - grid.p_min) / dp).floor() as isize)
                    .clamp(0, grid.np as isize - 2) as usize;
                for (a, b) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let node = (iq + a) * grid.np + (ip + b);
                    let d = &values[node] - &marginals[node].0;
                    if d.dot(&(&marginals[node].1 * &d)) > beta_f * beta_f {
                        inside = false;
                        break 'outer;
                    }
                }
            }
            if inside {
                credible_draws += 1;
                assert!(
                    traj.min_h_eb() >= -tol,
                    "credible draw {s} left the safe set: min h {}",
                    traj.min_h_eb()
                );
            }
        }
        assert!(
            credible_draws > 0,
            "no draw stayed in the credible set; the check never ran"
        );
    }

    #[test]
    fn mc_estimate_is_monotone_in_uncertainty_and_nominal_aggression() {
        let model = unit_orbit_model(16, 0.3);
        // Kinetic budget T̄(q) = q + 1 with mild conservatism.
        let spec = BarrierSpec::new(
            vec![EnergyConstraint::KineticUpper(Threshold::affine(
                1.0,
                DVector::from_vec(vec![1.0]),
            ))],
            1.0,
            20.0,
            CombineMode::SoftMin,
        )
        .unwrap();
        let grid = PhaseGrid {
            q_min: -2.0,
            q_max: 2.0,
            p_min: -2.0,
            p_max: 2.0,
            nq: 9,
            np: 9,
        };
        let x0 = DVector::from_vec(vec![0.9, 0.0]);
        let run = |beta_f: f64, nominal: NominalController, filtered_seed: u64| {
            let cfg = FilterConfig {
                gamma: 1.0,
                beta_f,
                input_bounds: None,
                nominal,
            };
            let mc = McConfig {
                n_samples: 24,
                horizon: 2.0,
                dt: 0.01,
                grid: grid.clone(),
                seed: filtered_seed,
            };
            mc_safety_estimate(&model, &spec, &cfg, &x0, &mc).unwrap()
        };

        // Wider credible ellipsoid -> nondecreasing safe fraction on the
        // same seed.
        let narrow = run(0.1, NominalController::Zero, 23);
        let wide = run(3.0, NominalController::Zero, 23);
        assert!(
            wide.n_safe >= narrow.n_safe,
            "beta_f monotonicity: {} < {}",
            wide.n_safe,
            narrow.n_safe
        );

        // A nominal controller that pumps toward the barrier cannot be
        // safer than staying passive.
        let calm = run(1.0, NominalController::Zero, 29);
        let aggressive = run(
            1.0,
            NominalController::Constant(DVector::from_vec(vec![-1.5])),
            29,
        );
        assert!(
            aggressive.n_safe <= calm.n_safe,
            "aggression monotonicity: {} > {}",
            aggressive.n_safe,
            calm.n_safe
        );
    }
}
