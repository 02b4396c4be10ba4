//! Multistep port-Hamiltonian Gaussian-process regression.
//!
//! Noisy state samples are projected through the multistep operators into
//! labels `Y = A·X̃ = B(f(X) + g(X)U) + ε` with
//! `ε ~ N(0, A(σ_x² I ⊗ I_n)Aᵀ)`. Because the projection is linear, the
//! training covariance and every posterior of interest stay in closed form:
//!
//! ```text
//! Cov(Y)  = B K_phs Bᵀ + A(σ_x² I ⊗ I_n)Aᵀ,
//! μ_f(x)  = k_Y(x)ᵀ Cov(Y)⁻¹ r,          r = Y − B g(X)U,
//! Σ_f(x)  = k_phs(x,x) − k_Y(x)ᵀ Cov(Y)⁻¹ k_Y(x),
//! ```
//!
//! and the Hamiltonian posterior conditions the same labels jointly with a
//! noiseless anchor observation `H(0) = H₀` that fixes the additive
//! constant.
//!
//! Flattened sequences use the state-major convention throughout: the
//! stacked vector is `[x_1ᵀ, …, x_Kᵀ]ᵀ`, so sample `k` occupies the
//! contiguous rows `k·n .. (k+1)·n`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    dhess12_dlog_lengthscale, hess12_k_base, k_base, k_hf_row, k_phs, KernelHyperparams,
    PhsStructure,
};
use crate::multistep::MultistepOperators;

/// Relative eigenvalue floor applied to posterior drift covariances.
pub const DRIFT_COV_FLOOR: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Time-stamped noisy states and inputs `{(t_k, x̃_k, u_k)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    state_dim: usize,
    input_dim: usize,
}

impl Dataset {
    pub fn new(
        times: Vec<f64>,
        states: Vec<DVector<f64>>,
        inputs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if times.len() != states.len() || times.len() != inputs.len() {
            return Err(Error::input("times, states, and inputs must align"));
        }
        if times.is_empty() {
            return Err(Error::input(
                "use Dataset::empty for a dataset with no samples",
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::input("timestamps must be strictly increasing"));
        }
        let state_dim = states[0].len();
        let input_dim = inputs[0].len();
        if state_dim == 0 {
            return Err(Error::input("states must be non-empty vectors"));
        }
        if states.iter().any(|s| s.len() != state_dim) {
            return Err(Error::input("all states must share one dimension"));
        }
        if inputs.iter().any(|u| u.len() != input_dim) {
            return Err(Error::input("all inputs must share one dimension"));
        }
        Ok(Dataset {
            times,
            states,
            inputs,
            state_dim,
            input_dim,
        })
    }

    /// A dataset with no samples but known dimensions, for prior-only
    /// models.
    pub fn empty(state_dim: usize, input_dim: usize) -> Self {
        Dataset {
            times: Vec::new(),
            states: Vec::new(),
            inputs: Vec::new(),
            state_dim,
            input_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// State-major flattened states `[x_1ᵀ, …, x_Kᵀ]ᵀ`.
    pub fn flat_states(&self) -> DVector<f64> {
        let n = self.state_dim;
        let mut flat = DVector::zeros(self.len() * n);
        for (k, s) in self.states.iter().enumerate() {
            flat.rows_mut(k * n, n).copy_from(s);
        }
        flat
    }

    /// Writes the 2-D benchmark CSV schema `t,q,p,u`. Extra header comment
    /// lines may be written by the caller before the data rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        if self.state_dim != 2 || self.input_dim != 1 {
            return Err(Error::input(
                "CSV export uses the t,q,p,u schema and needs state dim 2, input dim 1",
            ));
        }
        writeln!(w, "t,q,p,u")?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{:.17e},{:.17e},{:.17e},{:.17e}",
                self.times[k], self.states[k][0], self.states[k][1], self.inputs[k][0]
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

    /// Reads the `t,q,p,u` schema, skipping `#` comment lines.
    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != "t,q,p,u" {
                    return Err(Error::input(format!(
                        "{}: expected header 't,q,p,u', got '{line}'",
                        path.display()
                    )));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::input(format!(
                    "{}:{}: expected 4 fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::input(format!(
                        "{}:{}: cannot parse '{s}' as a number",
                        path.display(),
                        lineno + 1
                    ))
                })
            };
            times.push(parse(fields[0])?);
            states.push(DVector::from_vec(vec![parse(fields[1])?, parse(fields[2])?]));
            inputs.push(DVector::from_vec(vec![parse(fields[3])?]));
        }
        if times.is_empty() {
            return Err(Error::input(format!(
                "{}: no data rows found",
                path.display()
            )));
        }
        Dataset::new(times, states, inputs)
    }
}

/// Splits a state into configuration and momentum halves `(q, p)`.
pub fn split_state(x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.len() % 2 != 0 {
        return Err(Error::input(format!(
            "state dimension {} has no (q, p) split",
            x.len()
        )));
    }
    let half = x.len() / 2;
    Ok((
        x.rows(0, half).into_owned(),
        x.rows(half, half).into_owned(),
    ))
}

/// Concatenates configuration and momentum into a state.
pub fn join_state(q: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
    let mut x = DVector::zeros(q.len() + p.len());
    x.rows_mut(0, q.len()).copy_from(q);
    x.rows_mut(q.len(), p.len()).copy_from(p);
    x
}

// ---------------------------------------------------------------------------
// Numerical helpers
// ---------------------------------------------------------------------------

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization with adaptive diagonal jitter: starting from
/// `1e-10` times the mean diagonal and escalating tenfold up to `1e-4`
/// times the mean diagonal.
pub(crate) fn jittered_cholesky(sym: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let size = sym.nrows();
    if size == 0 {
        return Err(Error::input("cannot factor an empty matrix"));
    }
    let mean_diag = (sym.trace() / size as f64).max(f64::MIN_POSITIVE);
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok((chol, 0.0));
    }
    let mut jitter = 1e-10 * mean_diag;
    let max_jitter = 1e-4 * mean_diag;
    while jitter <= max_jitter * (1.0 + 1e-12) {
        let mut m = sym.clone();
        for i in 0..size {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::numerical(format!(
        "covariance factorization failed even with jitter {max_jitter:.3e}"
    )))
}

/// Symmetrizes and floors the eigenvalues of `m` at
/// `rel_floor · max(trace, 0)`.
pub(crate) fn floor_spd(m: &DMatrix<f64>, rel_floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let floor = rel_floor * sym.trace().max(0.0);
    let mut eig = sym.clone().symmetric_eigen();
    let mut changed = false;
    for v in eig.eigenvalues.iter_mut() {
        if *v < floor {
            *v = floor;
            changed = true;
        }
    }
    if changed {
        eig.recompose()
    } else {
        sym
    }
}

// ---------------------------------------------------------------------------
// Covariance assembly
// ---------------------------------------------------------------------------

/// Dense `(K·n)×(K·n)` grid of `k_phs` blocks over the training states.
fn phs_kernel_grid(
    states: &[DVector<f64>],
    hp: &KernelHyperparams,
    phs: &PhsStructure,
) -> Result<DMatrix<f64>> {
    let n = hp.state_dim();
    let k = states.len();
    let jr: Vec<DMatrix<f64>> = states.iter().map(|x| phs.j_r(x)).collect();
    let mut grid = DMatrix::zeros(k * n, k * n);
    for a in 0..k {
        for b in a..k {
            let h = hess12_k_base(&states[a], &states[b], hp)?;
            let blk = &jr[a] * h * jr[b].transpose();
            grid.view_mut((a * n, b * n), (n, n)).copy_from(&blk);
            if b != a {
                grid.view_mut((b * n, a * n), (n, n))
                    .copy_from(&blk.transpose());
            }
        }
    }
    Ok(grid)
}

/// Like `phs_kernel_grid` but for the derivative of the block kernel with
/// respect to `ln ℓ_i`.
fn phs_kernel_grid_dlog_lengthscale(
    states: &[DVector<f64>],
    hp: &KernelHyperparams,
    phs: &PhsStructure,
    i: usize,
) -> Result<DMatrix<f64>> {
    let n = hp.state_dim();
    let k = states.len();
    let jr: Vec<DMatrix<f64>> = states.iter().map(|x| phs.j_r(x)).collect();
    let mut grid = DMatrix::zeros(k * n, k * n);
    for a in 0..k {
        for b in a..k {
            let h = dhess12_dlog_lengthscale(&states[a], &states[b], hp, i)?;
            let blk = &jr[a] * h * jr[b].transpose();
            grid.view_mut((a * n, b * n), (n, n)).copy_from(&blk);
            if b != a {
                grid.view_mut((b * n, a * n), (n, n))
                    .copy_from(&blk.transpose());
            }
        }
    }
    Ok(grid)
}

/// Structured product `B · grid · Bᵀ` exploiting the banded block rows of
/// the quadrature operator.
fn sandwich_b(ops: &MultistepOperators, grid: &DMatrix<f64>) -> DMatrix<f64> {
    let n = ops.state_dim();
    let m = ops.order();
    let windows = ops.windows();
    let l = windows.len();
    let mut out = DMatrix::zeros(l * n, l * n);
    for (i, wi) in windows.iter().enumerate() {
        for (ip, wip) in windows.iter().enumerate().skip(i) {
            for j in 0..=m {
                let bij = wi.b[j];
                if bij == 0.0 {
                    continue;
                }
                let row0 = (wi.start + j) * n;
                for jp in 0..=m {
                    let w = bij * wip.b[jp];
                    if w == 0.0 {
                        continue;
                    }
                    let col0 = (wip.start + jp) * n;
                    for r in 0..n {
                        for c in 0..n {
                            out[(i * n + r, ip * n + c)] += w * grid[(row0 + r, col0 + c)];
                        }
                    }
                }
            }
            if ip != i {
                for r in 0..n {
                    for c in 0..n {
                        out[(ip * n + r, i * n + c)] = out[(i * n + c, ip * n + r)];
                    }
                }
            }
        }
    }
    out
}

/// Projected noise covariance `A(σ_x² I ⊗ I_n)Aᵀ`.
fn noise_gram(ops: &MultistepOperators, noise_variance: f64) -> DMatrix<f64> {
    let n = ops.state_dim();
    let m = ops.order();
    let windows = ops.windows();
    let l = windows.len();
    let mut out = DMatrix::zeros(l * n, l * n);
    for (i, wi) in windows.iter().enumerate() {
        for (ip, wip) in windows.iter().enumerate().skip(i) {
            let mut acc = 0.0;
            for j in 0..=m {
                for jp in 0..=m {
                    if wi.start + j == wip.start + jp {
                        acc += wi.a[j] * wip.a[jp];
                    }
                }
            }
            if acc != 0.0 {
                let v = noise_variance * acc;
                for r in 0..n {
                    out[(i * n + r, ip * n + r)] = v;
                    out[(ip * n + r, i * n + r)] = v;
                }
            }
        }
    }
    out
}

/// Projected training covariance
/// `B·K_phs·Bᵀ + A(σ_x² I ⊗ I_n)Aᵀ`, symmetrized, with adaptive jitter on
/// the diagonal until a Cholesky factorization succeeds.
pub fn build_cov_y(
    dataset: &Dataset,
    hp: &KernelHyperparams,
    phs: &PhsStructure,
    ops: &MultistepOperators,
) -> Result<DMatrix<f64>> {
    let (cov, _, jitter) = build_cov_y_factored(dataset.states(), hp, phs, ops)?;
    let mut out = cov;
    if jitter > 0.0 {
        for i in 0..out.nrows() {
            out[(i, i)] += jitter;
        }
    }
    Ok(out)
}

/// Returns the symmetrized covariance (without jitter), its jittered
/// Cholesky factor, and the jitter that was applied.
fn build_cov_y_factored(
    states: &[DVector<f64>],
    hp: &KernelHyperparams,
    phs: &PhsStructure,
    ops: &MultistepOperators,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>, f64)> {
    check_model_dims(states, hp, phs, ops)?;
    let grid = phs_kernel_grid(states, hp, phs)?;
    let cov = symmetrize(&(sandwich_b(ops, &grid) + noise_gram(ops, hp.noise_variance)));
    let (chol, jitter) = jittered_cholesky(&cov)?;
    Ok((cov, chol, jitter))
}

fn check_model_dims(
    states: &[DVector<f64>],
    hp: &KernelHyperparams,
    phs: &PhsStructure,
    ops: &MultistepOperators,
) -> Result<()> {
    let n = hp.state_dim();
    if phs.state_dim() != n || ops.state_dim() != n {
        return Err(Error::input(
            "hyperparameters, structure, and operators disagree on the state dimension",
        ));
    }
    if ops.num_states() != states.len() {
        return Err(Error::input(format!(
            "operators cover {} states, dataset has {}",
            ops.num_states(),
            states.len()
        )));
    }
    Ok(())
}

/// Test cross-covariance `k_Y(x) = B·k_phs(X, x)`, shape `(ℓ·n)×n`.
fn k_y_at(
    states: &[DVector<f64>],
    hp: &KernelHyperparams,
    phs: &PhsStructure,
    ops: &MultistepOperators,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = hp.state_dim();
    let mut blocks: Vec<Option<DMatrix<f64>>> = vec![None; states.len()];
    let mut out = DMatrix::zeros(ops.label_len(), n);
    for (i, w) in ops.windows().iter().enumerate() {
        for j in 0..=ops.order() {
            let idx = w.start + j;
            if blocks[idx].is_none() {
                blocks[idx] = Some(k_phs(&states[idx], x, hp, phs)?);
            }
            let blk = blocks[idx].as_ref().unwrap();
            let bj = w.b[j];
            for r in 0..n {
                for c in 0..n {
                    out[(i * n + r, c)] += bj * blk[(r, c)];
                }
            }
        }
    }
    Ok(out)
}

/// Stacked input term `[ (G(x_1)u_1)ᵀ, …, (G(x_K)u_K)ᵀ ]ᵀ`.
fn stacked_inputs(dataset: &Dataset, phs: &PhsStructure) -> DVector<f64> {
    let n = dataset.state_dim();
    let mut flat = DVector::zeros(dataset.len() * n);
    for k in 0..dataset.len() {
        let gu = phs.g(&dataset.states()[k]) * &dataset.inputs()[k];
        flat.rows_mut(k * n, n).copy_from(&gu);
    }
    flat
}

// ---------------------------------------------------------------------------
// Hyperparameter fitting
// ---------------------------------------------------------------------------

/// Settings for the first-order adaptive-moment optimizer run on the
/// negative log marginal likelihood over log-hyperparameters.
#[derive(Debug, Clone)]
pub struct GpOptimizerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Initial hyperparameters; defaults to σ_s = 1, ℓ_i = 1, σ_x = 0.1.
    pub init: Option<KernelHyperparams>,
}

impl Default for GpOptimizerConfig {
    fn default() -> Self {
        GpOptimizerConfig {
            learning_rate: 0.01,
            iterations: 500,
            init: None,
        }
    }
}

/// Negative log marginal likelihood trace, one entry per evaluation.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub nlml: Vec<f64>,
}

struct NlmlProblem<'a> {
    states: &'a [DVector<f64>],
    phs: &'a PhsStructure,
    ops: &'a MultistepOperators,
    residual: &'a DVector<f64>,
}

impl NlmlProblem<'_> {
    /// NLML value and gradient in the log coordinates
    /// `(ln σ_s², ln ℓ_1, …, ln ℓ_n, ln σ_x²)`, via the trace identity
    /// `∂NLML/∂θ = ½[tr(C⁻¹ ∂C) − αᵀ ∂C α]` with `α = C⁻¹r`. The residual
    /// `r = Y − B g(X)U` does not depend on the kernel.
    fn value_and_grad(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let hp = KernelHyperparams::from_log(z)?;
        let n = hp.state_dim();
        let grid = phs_kernel_grid(self.states, &hp, self.phs)?;
        let signal_part = sandwich_b(self.ops, &grid);
        let noise_part = noise_gram(self.ops, hp.noise_variance);
        let cov = symmetrize(&(&signal_part + &noise_part));
        let (chol, _) = jittered_cholesky(&cov)?;

        let alpha = chol.solve(self.residual);
        let l = chol.l_dirty();
        let mut logdet = 0.0;
        for i in 0..cov.nrows() {
            logdet += l[(i, i)].ln();
        }
        logdet *= 2.0;
        let size = cov.nrows() as f64;
        let value = 0.5 * self.residual.dot(&alpha)
            + 0.5 * logdet
            + 0.5 * size * (2.0 * std::f64::consts::PI).ln();

        let cinv = chol.inverse();
        let mut grad = DVector::zeros(n + 2);
        let mut grad_for = |j: usize, dcov: &DMatrix<f64>| {
            let trace_term: f64 = cinv.iter().zip(dcov.iter()).map(|(a, b)| a * b).sum();
            let quad = alpha.dot(&(dcov * &alpha));
            grad[j] = 0.5 * (trace_term - quad);
        };
        // ∂C/∂ln σ_s² is the signal part itself (it is linear in σ_s²);
        // likewise the noise part for ∂C/∂ln σ_x².
        grad_for(0, &symmetrize(&signal_part));
        for i in 0..n {
            let dgrid = phs_kernel_grid_dlog_lengthscale(self.states, &hp, self.phs, i)?;
            grad_for(1 + i, &symmetrize(&sandwich_b(self.ops, &dgrid)));
        }
        grad_for(n + 1, &symmetrize(&noise_part));
        Ok((value, grad))
    }
}

/// Negative log marginal likelihood of a hyperparameter setting.
pub fn nlml(
    dataset: &Dataset,
    hp: &KernelHyperparams,
    phs: &PhsStructure,
    ops: &MultistepOperators,
) -> Result<f64> {
    let labels = ops.project_labels(&dataset.flat_states())?;
    let residual = &labels - ops.apply_b(&stacked_inputs(dataset, phs))?;
    let problem = NlmlProblem {
        states: dataset.states(),
        phs,
        ops,
        residual: &residual,
    };
    Ok(problem.value_and_grad(&hp.to_log())?.0)
}

/// Fits kernel hyperparameters by minimizing the negative log marginal
/// likelihood with a first-order adaptive-moment method over
/// log-hyperparameters, returning the best iterate seen.
pub fn fit_hyperparameters(
    dataset: &Dataset,
    phs: &PhsStructure,
    ops: &MultistepOperators,
    cfg: &GpOptimizerConfig,
) -> Result<KernelHyperparams> {
    fit_hyperparameters_traced(dataset, phs, ops, cfg).map(|(hp, _)| hp)
}

/// As [`fit_hyperparameters`], also returning the NLML trace.
pub fn fit_hyperparameters_traced(
    dataset: &Dataset,
    phs: &PhsStructure,
    ops: &MultistepOperators,
    cfg: &GpOptimizerConfig,
) -> Result<(KernelHyperparams, FitTrace)> {
    if dataset.is_empty() {
        return Err(Error::input(
            "hyperparameter fitting requires a nonempty dataset",
        ));
    }
    if ops.window_count() == 0 {
        return Err(Error::input(
            "hyperparameter fitting requires at least one multistep window",
        ));
    }
    let init = cfg
        .init
        .clone()
        .unwrap_or_else(|| KernelHyperparams::default_for_dim(dataset.state_dim()));
    if init.state_dim() != dataset.state_dim() {
        return Err(Error::input(
            "initial hyperparameters disagree with the dataset state dimension",
        ));
    }

    let labels = ops.project_labels(&dataset.flat_states())?;
    let residual = &labels - ops.apply_b(&stacked_inputs(dataset, phs))?;
    let problem = NlmlProblem {
        states: dataset.states(),
        phs,
        ops,
        residual: &residual,
    };

    // Log-hyperparameters are kept inside ±ln(1e8) so the exponentials in
    // the kernel stay finite.
    const Z_BOUND: f64 = 18.420680743952367;
    let mut z = init.to_log();
    let mut trace = FitTrace::default();

    let (f0, g0) = problem.value_and_grad(&z).map_err(|e| {
        Error::numerical(format!("marginal likelihood failed at initialization: {e}"))
    })?;
    if !f0.is_finite() {
        return Err(Error::numerical(
            "non-finite marginal likelihood at initialization",
        ));
    }
    trace.nlml.push(f0);

    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m: DVector<f64> = DVector::zeros(z.len());
    let mut v: DVector<f64> = DVector::zeros(z.len());
    let mut best_value = f0;
    let mut best_z = z.clone();
    let mut grad = g0;

    for t in 1..=cfg.iterations {
        for i in 0..z.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / (1.0 - beta1.powi(t as i32));
            let v_hat = v[i] / (1.0 - beta2.powi(t as i32));
            z[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
            z[i] = z[i].clamp(-Z_BOUND, Z_BOUND);
        }
        match problem.value_and_grad(&z) {
            Ok((f, g)) if f.is_finite() => {
                trace.nlml.push(f);
                if f < best_value {
                    best_value = f;
                    best_z.copy_from(&z);
                }
                grad = g;
            }
            // A failed step mid-run (e.g. factorization loss at an extreme
            // iterate) ends the search at the best iterate seen so far.
            _ => break,
        }
    }

    Ok((KernelHyperparams::from_log(&best_z)?, trace))
}

// ---------------------------------------------------------------------------
// Trained model and posteriors
// ---------------------------------------------------------------------------

/// A fitted multistep PHS Gaussian process: hyperparameters plus cached
/// factorizations of `Cov(Y)` and the anchored joint covariance `K_gg`,
/// enabling all closed-form posterior queries.
///
/// Immutable after construction; all queries are read-only.
#[derive(Debug)]
pub struct TrainedGp {
    dataset: Dataset,
    hp: KernelHyperparams,
    phs: PhsStructure,
    ops: MultistepOperators,
    anchor_h0: f64,
    cov_y_chol: Option<Cholesky<f64, Dyn>>,
    kgg_chol: Cholesky<f64, Dyn>,
    residual: DVector<f64>,
    alpha_f: DVector<f64>,
    alpha_h: DVector<f64>,
}

impl TrainedGp {
    /// Builds the cached factorizations for a fixed hyperparameter setting.
    ///
    /// The anchor observation `H(0) = anchor_h0` is treated as noiseless;
    /// it fixes the additive constant of the Hamiltonian posterior.
    pub fn new(
        dataset: Dataset,
        hp: KernelHyperparams,
        phs: PhsStructure,
        ops: MultistepOperators,
        anchor_h0: f64,
    ) -> Result<Self> {
        if dataset.state_dim() != hp.state_dim() {
            return Err(Error::input(
                "dataset and hyperparameters disagree on the state dimension",
            ));
        }
        if phs.input_dim() != dataset.input_dim() {
            return Err(Error::input(
                "dataset and structure disagree on the input dimension",
            ));
        }
        check_model_dims(dataset.states(), &hp, &phs, &ops)?;

        let n = dataset.state_dim();
        let ln = ops.label_len();
        let origin = DVector::zeros(n);

        let (residual, cov_y_chol, cov_y, alpha_f) = if ln > 0 {
            let labels = ops.project_labels(&dataset.flat_states())?;
            let residual = &labels - ops.apply_b(&stacked_inputs(&dataset, &phs))?;
            let (cov, chol, _) = build_cov_y_factored(dataset.states(), &hp, &phs, &ops)?;
            let alpha_f = chol.solve(&residual);
            (residual, Some(chol), cov, alpha_f)
        } else {
            (
                DVector::zeros(0),
                None,
                DMatrix::zeros(0, 0),
                DVector::zeros(0),
            )
        };

        // K_gg = [[k(0,0), K_Hf(0,X)], [K_Hf(0,X)ᵀ, Cov(Y)]].
        let mut kgg = DMatrix::zeros(1 + ln, 1 + ln);
        kgg[(0, 0)] = k_base(&origin, &origin, &hp)?;
        if ln > 0 {
            let row = k_hf_row(&origin, dataset.states(), &hp, &phs, &ops)?;
            for c in 0..ln {
                kgg[(0, 1 + c)] = row[c];
                kgg[(1 + c, 0)] = row[c];
            }
            kgg.view_mut((1, 1), (ln, ln)).copy_from(&cov_y);
        }
        let (kgg_chol, _) = jittered_cholesky(&symmetrize(&kgg))?;

        let mut y_aug = DVector::zeros(1 + ln);
        y_aug[0] = anchor_h0;
        y_aug.rows_mut(1, ln).copy_from(&residual);
        let alpha_h = kgg_chol.solve(&y_aug);

        Ok(TrainedGp {
            dataset,
            hp,
            phs,
            ops,
            anchor_h0,
            cov_y_chol,
            kgg_chol,
            residual,
            alpha_f,
            alpha_h,
        })
    }

    /// Fits hyperparameters on the dataset and builds the model, returning
    /// the NLML trace alongside.
    pub fn fit(
        dataset: Dataset,
        phs: PhsStructure,
        ops: MultistepOperators,
        cfg: &GpOptimizerConfig,
        anchor_h0: f64,
    ) -> Result<(Self, FitTrace)> {
        let (hp, trace) = fit_hyperparameters_traced(&dataset, &phs, &ops, cfg)?;
        let model = TrainedGp::new(dataset, hp, phs, ops, anchor_h0)?;
        Ok((model, trace))
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hp
    }

    pub fn phs(&self) -> &PhsStructure {
        &self.phs
    }

    pub fn ops(&self) -> &MultistepOperators {
        &self.ops
    }

    pub fn anchor_h0(&self) -> f64 {
        self.anchor_h0
    }

    pub fn state_dim(&self) -> usize {
        self.hp.state_dim()
    }

    fn check_query(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::input(format!(
                "query state has dimension {}, model expects {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// Posterior over the zero-input drift `f(x)`, as mean and covariance.
    ///
    /// The covariance is symmetrized and eigenvalue-floored at
    /// `1e-10 · trace`, so it is always safe to factor.
    pub fn posterior_drift(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_query(x)?;
        let prior = k_phs(x, x, &self.hp, &self.phs)?;
        match &self.cov_y_chol {
            None => Ok((DVector::zeros(x.len()), floor_spd(&prior, DRIFT_COV_FLOOR))),
            Some(chol) => {
                let ky = k_y_at(self.dataset.states(), &self.hp, &self.phs, &self.ops, x)?;
                let mean = ky.transpose() * &self.alpha_f;
                let cov = &prior - ky.transpose() * chol.solve(&ky);
                Ok((mean, floor_spd(&cov, DRIFT_COV_FLOOR)))
            }
        }
    }

    /// Cross-covariance row `K_{*g}(x) = [k(x,0), K_Hf(x,X)]`.
    fn k_star_g(&self, x: &DVector<f64>) -> Result<RowDVector<f64>> {
        let ln = self.ops.label_len();
        let origin = DVector::zeros(self.state_dim());
        let mut row = RowDVector::zeros(1 + ln);
        row[0] = k_base(x, &origin, &self.hp)?;
        if ln > 0 {
            let hf = k_hf_row(x, self.dataset.states(), &self.hp, &self.phs, &self.ops)?;
            for c in 0..ln {
                row[1 + c] = hf[c];
            }
        }
        Ok(row)
    }

    /// Posterior mean and variance of the anchored Hamiltonian at `x`.
    /// The variance is floored at zero.
    pub fn posterior_hamiltonian(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        self.check_query(x)?;
        let kg = self.k_star_g(x)?;
        let kg_col = kg.transpose();
        let mean = kg_col.dot(&self.alpha_h);
        let solved = self.kgg_chol.solve(&kg_col);
        let var = k_base(x, x, &self.hp)? - kg_col.dot(&solved);
        Ok((mean, var.max(0.0)))
    }

    /// Joint posterior covariance of `(H(x_a), H(x_b))`: symmetrized and
    /// eigenvalue-floored at zero.
    pub fn joint_energy_cov(
        &self,
        x_a: &DVector<f64>,
        x_b: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_query(x_a)?;
        self.check_query(x_b)?;
        let ka = self.k_star_g(x_a)?;
        let kb = self.k_star_g(x_b)?;
        let mut stacked = DMatrix::zeros(2, ka.len());
        stacked.row_mut(0).copy_from(&ka);
        stacked.row_mut(1).copy_from(&kb);
        let mut prior = DMatrix::zeros(2, 2);
        prior[(0, 0)] = k_base(x_a, x_a, &self.hp)?;
        prior[(0, 1)] = k_base(x_a, x_b, &self.hp)?;
        prior[(1, 0)] = prior[(0, 1)];
        prior[(1, 1)] = k_base(x_b, x_b, &self.hp)?;
        let rhs = stacked.transpose();
        let solved = self.kgg_chol.solve(&rhs);
        let cov = prior - &stacked * solved;
        Ok(floor_spd(&cov, 0.0))
    }

    /// Posterior mean and variance of the kinetic energy
    /// `T(q, p) = H(q, p) − H(q, 0)`. The variance is floored at zero.
    pub fn posterior_kinetic(&self, q: &DVector<f64>, p: &DVector<f64>) -> Result<(f64, f64)> {
        if self.state_dim() % 2 != 0 || 2 * q.len() != self.state_dim() || p.len() != q.len() {
            return Err(Error::input(
                "kinetic energy needs an even state dimension split as (q, p)",
            ));
        }
        let x_a = join_state(q, p);
        let x_b = join_state(q, &DVector::zeros(p.len()));
        let (mean_a, _) = self.posterior_hamiltonian(&x_a)?;
        let (mean_b, _) = self.posterior_hamiltonian(&x_b)?;
        let joint = self.joint_energy_cov(&x_a, &x_b)?;
        let var = (joint[(0, 0)] + joint[(1, 1)] - 2.0 * joint[(0, 1)]).max(0.0);
        Ok((mean_a - mean_b, var))
    }

    /// Posterior mean and variance of the potential energy
    /// `V(q) = H(q, 0)`.
    pub fn posterior_potential(&self, q: &DVector<f64>) -> Result<(f64, f64)> {
        if self.state_dim() % 2 != 0 || 2 * q.len() != self.state_dim() {
            return Err(Error::input(
                "potential energy needs an even state dimension split as (q, p)",
            ));
        }
        self.posterior_hamiltonian(&join_state(q, &DVector::zeros(q.len())))
    }

    /// Residual vector `r = Y − B g(X)U` shared by both posteriors.
    pub fn residual(&self) -> &DVector<f64> {
        &self.residual
    }

    /// Joint drift posterior stacked over `points`: the `(N·n)` mean and
    /// the full `(N·n)×(N·n)` covariance including cross-covariances
    /// between points. Symmetrized but not floored; callers factor it with
    /// jitter.
    pub fn joint_drift_posterior(
        &self,
        points: &[DVector<f64>],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.state_dim();
        for p in points {
            self.check_query(p)?;
        }
        let nn = points.len() * n;
        let mut cov = DMatrix::zeros(nn, nn);
        for a in 0..points.len() {
            for b in a..points.len() {
                let blk = k_phs(&points[a], &points[b], &self.hp, &self.phs)?;
                cov.view_mut((a * n, b * n), (n, n)).copy_from(&blk);
                if b != a {
                    cov.view_mut((b * n, a * n), (n, n))
                        .copy_from(&blk.transpose());
                }
            }
        }
        let mut mean = DVector::zeros(nn);
        if let Some(chol) = &self.cov_y_chol {
            let ln = self.ops.label_len();
            let mut ky_all = DMatrix::zeros(ln, nn);
            for (idx, pt) in points.iter().enumerate() {
                let ky = k_y_at(self.dataset.states(), &self.hp, &self.phs, &self.ops, pt)?;
                mean.rows_mut(idx * n, n)
                    .copy_from(&(ky.transpose() * &self.alpha_f));
                ky_all.view_mut((0, idx * n), (ln, n)).copy_from(&ky);
            }
            let solved = chol.solve(&ky_all);
            cov -= ky_all.transpose() * solved;
        }
        Ok((mean, symmetrize(&cov)))
    }
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

/// Self-describing serialized model: hyperparameters, anchor, multistep
/// settings, and a reference to the dataset the model was fit on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
    pub anchor_h0: f64,
    pub multistep_order: usize,
    pub gap_factor: f64,
    pub dataset_path: String,
    pub dataset_sha256: String,
}

impl ModelFile {
    pub fn hyperparams(&self) -> Result<KernelHyperparams> {
        KernelHyperparams::new(
            self.signal_variance,
            DVector::from_vec(self.lengthscales.clone()),
            self.noise_variance,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::input(format!("model serialization failed: {e}")))?;
        let mut f = fs::File::create(path)?;
        f.write_all(json.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("cannot parse model file {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multistep::assemble_operators;
    use approx::assert_relative_eq;

    fn mass_spring_phs() -> PhsStructure {
        PhsStructure::constant(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap()
    }

    /// Small noiseless mass-spring dataset: states on the unit orbit.
    fn small_dataset(k: usize) -> Dataset {
        let dt = 0.31;
        let times: Vec<f64> = (0..k).map(|i| i as f64 * dt).collect();
        let states: Vec<DVector<f64>> = times
            .iter()
            .map(|t| DVector::from_vec(vec![t.cos(), -t.sin()]))
            .collect();
        let inputs = vec![DVector::zeros(1); k];
        Dataset::new(times, states, inputs).unwrap()
    }

    fn hp2() -> KernelHyperparams {
        KernelHyperparams::new(1.0, DVector::from_vec(vec![1.0, 1.0]), 0.0025).unwrap()
    }

    fn small_model(k: usize) -> TrainedGp {
        let dataset = small_dataset(k);
        let ops = assemble_operators(dataset.times(), 2, 2).unwrap();
        TrainedGp::new(dataset, hp2(), mass_spring_phs(), ops, 0.0).unwrap()
    }

    #[test]
    fn dataset_validation() {
        let t = vec![0.0, 1.0];
        let s = vec![DVector::zeros(2), DVector::zeros(2)];
        let u = vec![DVector::zeros(1), DVector::zeros(1)];
        assert!(Dataset::new(t.clone(), s.clone(), u.clone()).is_ok());
        assert!(Dataset::new(vec![0.0, 0.0], s.clone(), u.clone()).is_err());
        assert!(Dataset::new(t.clone(), s.clone(), vec![DVector::zeros(1)]).is_err());
        let mixed = vec![DVector::zeros(2), DVector::zeros(3)];
        assert!(Dataset::new(t, mixed, u).is_err());
        assert!(Dataset::empty(2, 1).is_empty());
    }

    #[test]
    fn flat_states_are_state_major() {
        let d = Dataset::new(
            vec![0.0, 1.0],
            vec![
                DVector::from_vec(vec![1.0, 2.0]),
                DVector::from_vec(vec![3.0, 4.0]),
            ],
            vec![DVector::zeros(1), DVector::zeros(1)],
        )
        .unwrap();
        assert_eq!(d.flat_states(), DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn csv_roundtrip() {
        let d = small_dataset(5);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let dir = std::env::temp_dir().join("ebcbf_gp_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        std::fs::write(&path, &buf).unwrap();
        let back = Dataset::read_csv_file(&path).unwrap();
        assert_eq!(back.len(), d.len());
        for k in 0..d.len() {
            assert_relative_eq!(back.times()[k], d.times()[k]);
            assert_relative_eq!(back.states()[k], d.states()[k]);
        }
    }

    #[test]
    fn cov_y_vanishing_signal_leaves_noise_term() {
        let dataset = small_dataset(4);
        let ops = assemble_operators(dataset.times(), 1, 2).unwrap();
        let hp = KernelHyperparams::new(1e-30, DVector::from_vec(vec![1.0, 1.0]), 0.04).unwrap();
        let phs = mass_spring_phs();
        let cov = build_cov_y(&dataset, &hp, &phs, &ops).unwrap();
        let dense_a = ops.dense_a();
        let oracle = &dense_a * dense_a.transpose() * 0.04;
        assert!((&cov - &oracle).amax() <= 1e-10 * oracle.amax());
    }

    #[test]
    fn cov_y_single_window_scalar_hand_assembly() {
        // n = 1: J must vanish, take R = 0.5 so J_R = -0.5.
        let phs = PhsStructure::constant(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let hp = KernelHyperparams::new(2.0, DVector::from_vec(vec![0.7]), 0.09).unwrap();
        let dataset = Dataset::new(
            vec![0.0, 0.4],
            vec![DVector::from_vec(vec![0.3]), DVector::from_vec(vec![-0.2])],
            vec![DVector::zeros(1), DVector::zeros(1)],
        )
        .unwrap();
        let ops = assemble_operators(dataset.times(), 1, 1).unwrap();
        let cov = build_cov_y(&dataset, &hp, &phs, &ops).unwrap();

        let b = ops.dense_b();
        let a = ops.dense_a();
        let mut kmat = DMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                kmat[(i, j)] =
                    k_phs(&dataset.states()[i], &dataset.states()[j], &hp, &phs).unwrap()[(0, 0)];
            }
        }
        let oracle = &b * kmat * b.transpose() + &a * a.transpose() * 0.09;
        assert_relative_eq!(cov[(0, 0)], oracle[(0, 0)], max_relative = 1e-10);
    }

    #[test]
    fn cov_y_is_symmetric() {
        let dataset = small_dataset(7);
        let ops = assemble_operators(dataset.times(), 2, 2).unwrap();
        let cov = build_cov_y(&dataset, &hp2(), &mass_spring_phs(), &ops).unwrap();
        let defect = (&cov - cov.transpose()).amax();
        assert!(defect <= 1e-12 * cov.trace());
    }

    #[test]
    fn structured_cov_matches_dense_assembly() {
        let dataset = small_dataset(6);
        let hp = hp2();
        let phs = mass_spring_phs();
        let ops = assemble_operators(dataset.times(), 2, 2).unwrap();
        let grid = phs_kernel_grid(dataset.states(), &hp, &phs).unwrap();
        let dense_b = ops.dense_b();
        let dense_a = ops.dense_a();
        let oracle = &dense_b * &grid * dense_b.transpose()
            + &dense_a * dense_a.transpose() * hp.noise_variance;
        let fast = sandwich_b(&ops, &grid) + noise_gram(&ops, hp.noise_variance);
        assert!((&oracle - &fast).amax() <= 1e-12 * oracle.amax());
    }

    #[test]
    fn posteriors_match_dense_inverse_oracle() {
        // Explicit-inverse dense conditioning on a K = 5 dataset.
        let model = small_model(5);
        let dataset = model.dataset();
        let hp = model.hyperparams();
        let phs = model.phs();
        let ops = model.ops();

        let grid = phs_kernel_grid(dataset.states(), hp, phs).unwrap();
        let dense_b = ops.dense_b();
        let dense_a = ops.dense_a();
        let cov = symmetrize(
            &(&dense_b * &grid * dense_b.transpose()
                + &dense_a * dense_a.transpose() * hp.noise_variance),
        );
        let cov_inv = cov.clone().try_inverse().unwrap();
        let y = ops.project_labels(&dataset.flat_states()).unwrap();

        let x = DVector::from_vec(vec![0.4, -0.3]);

        // Drift.
        let mut kxy = DMatrix::zeros(dataset.len() * 2, 2);
        for (i, s) in dataset.states().iter().enumerate() {
            let blk = k_phs(s, &x, hp, phs).unwrap();
            kxy.view_mut((2 * i, 0), (2, 2)).copy_from(&blk);
        }
        let ky = &dense_b * kxy;
        let mean_oracle = ky.transpose() * &cov_inv * &y;
        let cov_oracle = k_phs(&x, &x, hp, phs).unwrap() - ky.transpose() * &cov_inv * &ky;
        let (mean, cov_f) = model.posterior_drift(&x).unwrap();
        assert!((&mean - &mean_oracle).amax() <= 1e-8 * mean_oracle.amax().max(1e-12));
        assert!((&cov_f - symmetrize(&cov_oracle)).amax() <= 1e-8 * cov_f.amax().max(1e-12));

        // Hamiltonian via the dense augmented system.
        let ln = ops.label_len();
        let origin = DVector::zeros(2);
        let mut kgg = DMatrix::zeros(1 + ln, 1 + ln);
        kgg[(0, 0)] = k_base(&origin, &origin, hp).unwrap();
        let row0 = k_hf_row(&origin, dataset.states(), hp, phs, ops).unwrap();
        for c in 0..ln {
            kgg[(0, 1 + c)] = row0[c];
            kgg[(1 + c, 0)] = row0[c];
        }
        kgg.view_mut((1, 1), (ln, ln)).copy_from(&cov);
        let kgg_inv = symmetrize(&kgg).try_inverse().unwrap();
        let mut y_aug = DVector::zeros(1 + ln);
        y_aug.rows_mut(1, ln).copy_from(&y);

        let mut kg = RowDVector::zeros(1 + ln);
        kg[0] = k_base(&x, &origin, hp).unwrap();
        let hf = k_hf_row(&x, dataset.states(), hp, phs, ops).unwrap();
        for c in 0..ln {
            kg[1 + c] = hf[c];
        }
        let mean_oracle = (&kg * &kgg_inv * &y_aug)[(0, 0)];
        let var_oracle = k_base(&x, &x, hp).unwrap() - (&kg * &kgg_inv * kg.transpose())[(0, 0)];
        let (mu_h, var_h) = model.posterior_hamiltonian(&x).unwrap();
        assert_relative_eq!(mu_h, mean_oracle, max_relative = 1e-8);
        assert_relative_eq!(
            var_h,
            var_oracle.max(0.0),
            max_relative = 1e-6,
            epsilon = 1e-12
        );

        // Joint energy covariance at two points.
        let xb = DVector::from_vec(vec![-0.2, 0.5]);
        let mut kgb = RowDVector::zeros(1 + ln);
        kgb[0] = k_base(&xb, &origin, hp).unwrap();
        let hfb = k_hf_row(&xb, dataset.states(), hp, phs, ops).unwrap();
        for c in 0..ln {
            kgb[1 + c] = hfb[c];
        }
        let joint = model.joint_energy_cov(&x, &xb).unwrap();
        let off_oracle = k_base(&x, &xb, hp).unwrap() - (&kg * &kgg_inv * kgb.transpose())[(0, 0)];
        assert_relative_eq!(joint[(0, 1)], off_oracle, max_relative = 1e-8, epsilon = 1e-12);
    }

    #[test]
    fn empty_dataset_falls_back_to_prior() {
        let dataset = Dataset::empty(2, 1);
        let ops = crate::multistep::MultistepOperators::from_windows(vec![], 2, 2, 0).unwrap();
        let model = TrainedGp::new(dataset, hp2(), mass_spring_phs(), ops, 0.7).unwrap();

        let x = DVector::from_vec(vec![0.5, -0.1]);
        let (mean, cov) = model.posterior_drift(&x).unwrap();
        assert_eq!(mean, DVector::zeros(2));
        let prior = k_phs(&x, &x, &hp2(), &mass_spring_phs()).unwrap();
        assert!((&cov - &prior).amax() <= 1e-9 * prior.trace());

        // Anchor-only Hamiltonian: a one-point GP conditioned on H(0)=0.7.
        let (mu, var) = model.posterior_hamiltonian(&x).unwrap();
        let k0 = k_base(&x, &DVector::zeros(2), &hp2()).unwrap();
        let s2 = hp2().signal_variance;
        assert_relative_eq!(mu, k0 / s2 * 0.7, max_relative = 1e-6);
        assert_relative_eq!(
            var,
            k_base(&x, &x, &hp2()).unwrap() - k0 * k0 / s2,
            max_relative = 1e-4,
            epsilon = 1e-9
        );
    }

    #[test]
    fn infinite_noise_washes_out_the_posterior() {
        let dataset = small_dataset(5);
        let ops = assemble_operators(dataset.times(), 2, 2).unwrap();
        let hp = KernelHyperparams::new(1.0, DVector::from_vec(vec![1.0, 1.0]), 1e12).unwrap();
        let model = TrainedGp::new(dataset, hp.clone(), mass_spring_phs(), ops, 0.0).unwrap();
        let x = DVector::from_vec(vec![0.4, 0.2]);
        let (mean, cov) = model.posterior_drift(&x).unwrap();
        assert!(mean.amax() <= 1e-6);
        let prior = k_phs(&x, &x, &hp, &mass_spring_phs()).unwrap();
        assert!((&cov - &prior).amax() <= 1e-6 * prior.trace());
    }

    #[test]
    fn anchor_is_interpolated_exactly() {
        let model = small_model(5);
        let origin = DVector::zeros(2);
        let (mu, var) = model.posterior_hamiltonian(&origin).unwrap();
        assert!((mu - model.anchor_h0()).abs() <= 1e-6);
        assert!(var <= 1e-8 * model.hyperparams().signal_variance);
    }

    #[test]
    fn joint_cov_is_consistent_with_marginals() {
        let model = small_model(6);
        let xa = DVector::from_vec(vec![0.3, 0.3]);
        let xb = DVector::from_vec(vec![-0.6, 0.1]);
        let joint = model.joint_energy_cov(&xa, &xb).unwrap();
        let (_, va) = model.posterior_hamiltonian(&xa).unwrap();
        let (_, vb) = model.posterior_hamiltonian(&xb).unwrap();
        assert_relative_eq!(joint[(0, 0)], va, max_relative = 1e-6, epsilon = 1e-12);
        assert_relative_eq!(joint[(1, 1)], vb, max_relative = 1e-6, epsilon = 1e-12);

        // Identical points: rank-1 with all entries equal.
        let joint_same = model.joint_energy_cov(&xa, &xa).unwrap();
        assert_relative_eq!(
            joint_same[(0, 0)],
            joint_same[(0, 1)],
            max_relative = 1e-9,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            joint_same[(1, 1)],
            joint_same[(0, 1)],
            max_relative = 1e-9,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kinetic_energy_at_rest_is_zero() {
        let model = small_model(5);
        let q = DVector::from_vec(vec![0.4]);
        let p0 = DVector::zeros(1);
        let (mean, var) = model.posterior_kinetic(&q, &p0).unwrap();
        assert!(mean.abs() <= 1e-10);
        assert!(var.abs() <= 1e-10);
    }

    #[test]
    fn kinetic_variance_is_nonnegative_and_means_add_up() {
        let model = small_model(6);
        let mut rng = crate::seeding::stream_rng(23, 0);
        use rand::Rng;
        for _ in 0..100 {
            let q = DVector::from_vec(vec![rng.random_range(-1.5..1.5)]);
            let p = DVector::from_vec(vec![rng.random_range(-1.5..1.5)]);
            let (mu_t, var_t) = model.posterior_kinetic(&q, &p).unwrap();
            let (mu_v, _) = model.posterior_potential(&q).unwrap();
            let (mu_h, _) = model.posterior_hamiltonian(&join_state(&q, &p)).unwrap();
            assert!(var_t >= 0.0);
            // Exact linearity of the posterior mean.
            assert_relative_eq!(mu_t + mu_v, mu_h, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn potential_equals_hamiltonian_at_zero_momentum() {
        let model = small_model(5);
        let q = DVector::from_vec(vec![-0.8]);
        let pot = model.posterior_potential(&q).unwrap();
        let ham = model
            .posterior_hamiltonian(&DVector::from_vec(vec![-0.8, 0.0]))
            .unwrap();
        assert_eq!(pot, ham);
    }

    #[test]
    fn conditioning_on_more_data_never_inflates_variance() {
        let hp = hp2();
        let phs = mass_spring_phs();
        let d_small = small_dataset(4);
        let d_big = small_dataset(8);
        let ops_small = assemble_operators(d_small.times(), 2, 2).unwrap();
        let ops_big = assemble_operators(d_big.times(), 2, 2).unwrap();
        let m_small = TrainedGp::new(d_small, hp.clone(), phs.clone(), ops_small, 0.0).unwrap();
        let m_big = TrainedGp::new(d_big, hp, phs, ops_big, 0.0).unwrap();
        for xs in [
            DVector::from_vec(vec![0.0, 0.9]),
            DVector::from_vec(vec![0.7, -0.7]),
            DVector::from_vec(vec![-1.2, 0.2]),
        ] {
            let (_, v_small) = m_small.posterior_hamiltonian(&xs).unwrap();
            let (_, v_big) = m_big.posterior_hamiltonian(&xs).unwrap();
            assert!(
                v_big <= v_small + 1e-9,
                "variance grew with data: {v_big} > {v_small}"
            );
        }
    }

    #[test]
    fn nlml_gradient_matches_finite_differences() {
        let dataset = small_dataset(5);
        let phs = mass_spring_phs();
        let ops = assemble_operators(dataset.times(), 2, 2).unwrap();
        let labels = ops.project_labels(&dataset.flat_states()).unwrap();
        let residual = &labels - ops.apply_b(&stacked_inputs(&dataset, &phs)).unwrap();
        let problem = NlmlProblem {
            states: dataset.states(),
            phs: &phs,
            ops: &ops,
            residual: &residual,
        };
        let z = KernelHyperparams::new(0.8, DVector::from_vec(vec![1.1, 0.9]), 0.02)
            .unwrap()
            .to_log();
        let (_, grad) = problem.value_and_grad(&z).unwrap();
        let eps = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += eps;
            zm[i] -= eps;
            let fp = problem.value_and_grad(&zp).unwrap().0;
            let fm = problem.value_and_grad(&zm).unwrap().0;
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (grad[i] - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                "param {i}: analytic {} vs fd {}",
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn fit_never_returns_worse_than_initialization() {
        let dataset = small_dataset(10);
        let phs = mass_spring_phs();
        let ops = assemble_operators(dataset.times(), 2, 2).unwrap();
        let cfg = GpOptimizerConfig {
            iterations: 40,
            ..GpOptimizerConfig::default()
        };
        let init = KernelHyperparams::default_for_dim(2);
        let (fitted, trace) = fit_hyperparameters_traced(&dataset, &phs, &ops, &cfg).unwrap();
        let f_init = nlml(&dataset, &init, &phs, &ops).unwrap();
        let f_fit = nlml(&dataset, &fitted, &phs, &ops).unwrap();
        assert!(f_fit <= f_init + 1e-9);
        assert_relative_eq!(trace.nlml[0], f_init, max_relative = 1e-10);
    }

    #[test]
    fn fit_on_empty_dataset_is_an_input_error() {
        let dataset = Dataset::empty(2, 1);
        let ops = crate::multistep::MultistepOperators::from_windows(vec![], 2, 2, 0).unwrap();
        let err = fit_hyperparameters(&dataset, &mass_spring_phs(), &ops, &Default::default())
            .unwrap_err();
        assert!(err.to_string().contains("nonempty"));
    }

    #[test]
    fn model_file_roundtrip() {
        let mf = ModelFile {
            signal_variance: 1.5,
            lengthscales: vec![0.9, 1.2],
            noise_variance: 0.003,
            anchor_h0: 0.0,
            multistep_order: 2,
            gap_factor: 10.0,
            dataset_path: "dataset.csv".into(),
            dataset_sha256: "abc".into(),
        };
        let dir = std::env::temp_dir().join("ebcbf_model_file_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        mf.save(&path).unwrap();
        let back = ModelFile::load(&path).unwrap();
        assert_eq!(back.lengthscales, mf.lengthscales);
        assert_eq!(back.multistep_order, 2);
        back.hyperparams().unwrap();
    }
}
