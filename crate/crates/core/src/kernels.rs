//! ARD squared-exponential kernel, its first and mixed second derivatives,
//! and the port-Hamiltonian matrix kernel built from them.
//!
//! A scalar Gaussian-process prior on the Hamiltonian with base kernel
//! `k_base` induces a prior on the zero-input drift `f = (J−R)∇H`. The
//! drift covariance is the matrix kernel
//!
//! ```text
//! k_phs(x, x') = J_R(x) · ∂²k_base/∂x∂x' · J_R(x')ᵀ,   J_R = J − R,
//! ```
//!
//! and the Hamiltonian/drift cross-covariance stacks `J_R(x_k)` times the
//! kernel gradient at each training state. All derivatives are analytic;
//! finite differences appear only in tests.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::multistep::MultistepOperators;

/// Hyperparameters of the ARD squared-exponential kernel
/// `k(x, x') = σ_s² · exp(−½ Σ_i (x_i − x'_i)² / ℓ_i²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelHyperparams {
    /// Signal variance σ_s² (energy²).
    pub signal_variance: f64,
    /// One strictly positive length-scale per state dimension (state units).
    pub lengthscales: DVector<f64>,
    /// Observation noise variance σ_x² (state units²).
    pub noise_variance: f64,
}

impl KernelHyperparams {
    pub fn new(
        signal_variance: f64,
        lengthscales: DVector<f64>,
        noise_variance: f64,
    ) -> Result<Self> {
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::input("signal variance must be finite and positive"));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::input("lengthscales must be finite and positive"));
        }
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(Error::input("noise variance must be finite and positive"));
        }
        Ok(KernelHyperparams {
            signal_variance,
            lengthscales,
            noise_variance,
        })
    }

    /// Isotropic unit-signal defaults used to initialize optimization:
    /// σ_s = 1, ℓ_i = 1, σ_x = 0.1.
    pub fn default_for_dim(n: usize) -> Self {
        KernelHyperparams {
            signal_variance: 1.0,
            lengthscales: DVector::from_element(n, 1.0),
            noise_variance: 0.01,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_variance.sqrt()
    }

    /// Log-space coordinates `(ln σ_s², ln ℓ_1, …, ln ℓ_n, ln σ_x²)`.
    /// Optimization runs in these coordinates so positivity never needs an
    /// explicit constraint.
    pub fn to_log(&self) -> DVector<f64> {
        let n = self.state_dim();
        let mut z = DVector::zeros(n + 2);
        z[0] = self.signal_variance.ln();
        for i in 0..n {
            z[1 + i] = self.lengthscales[i].ln();
        }
        z[n + 1] = self.noise_variance.ln();
        z
    }

    pub fn from_log(z: &DVector<f64>) -> Result<Self> {
        if z.len() < 3 {
            return Err(Error::input("log-hyperparameter vector too short"));
        }
        let n = z.len() - 2;
        KernelHyperparams::new(
            z[0].exp(),
            DVector::from_fn(n, |i, _| z[1 + i].exp()),
            z[n + 1].exp(),
        )
    }
}

type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Structure matrices of a port-Hamiltonian system: skew-symmetric
/// interconnection `J(x)`, PSD dissipation `R(x)`, and input map `G(x)`.
#[derive(Clone)]
pub struct PhsStructure {
    state_dim: usize,
    input_dim: usize,
    j: MatrixFn,
    r: MatrixFn,
    g: MatrixFn,
}

impl fmt::Debug for PhsStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhsStructure")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .finish()
    }
}

impl PhsStructure {
    pub fn new(state_dim: usize, input_dim: usize, j: MatrixFn, r: MatrixFn, g: MatrixFn) -> Self {
        PhsStructure {
            state_dim,
            input_dim,
            j,
            r,
            g,
        }
    }

    /// Structure with constant `J`, `R`, `G`.
    pub fn constant(j: DMatrix<f64>, r: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = j.nrows();
        if j.ncols() != n || r.nrows() != n || r.ncols() != n || g.nrows() != n {
            return Err(Error::input("inconsistent structure matrix shapes"));
        }
        let m = g.ncols();
        Ok(PhsStructure::new(
            n,
            m,
            Arc::new(move |_| j.clone()),
            Arc::new(move |_| r.clone()),
            Arc::new(move |_| g.clone()),
        ))
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn j(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.j)(x)
    }

    pub fn r(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.r)(x)
    }

    pub fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.g)(x)
    }

    /// `J_R(x) = J(x) − R(x)`.
    pub fn j_r(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.j(x) - self.r(x)
    }

    /// Checks skew-symmetry of `J` and symmetric positive
    /// semi-definiteness of `R` at the given sample states.
    pub fn check_structure(&self, samples: &[DVector<f64>]) -> Result<()> {
        for x in samples {
            let j = self.j(x);
            let skew_defect = (&j + j.transpose()).amax();
            if skew_defect > 1e-10 * (1.0 + j.amax()) {
                return Err(Error::input(format!(
                    "J(x) is not skew-symmetric at {x:?} (defect {skew_defect:.3e})"
                )));
            }
            let r = self.r(x);
            let sym_defect = (&r - r.transpose()).amax();
            if sym_defect > 1e-10 * (1.0 + r.amax()) {
                return Err(Error::input(format!(
                    "R(x) is not symmetric at {x:?} (defect {sym_defect:.3e})"
                )));
            }
            let sym = (&r + r.transpose()) * 0.5;
            let min_eig = sym
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if min_eig < -1e-10 * (1.0 + r.amax()) {
                return Err(Error::input(format!(
                    "R(x) has negative eigenvalue {min_eig:.3e} at {x:?}"
                )));
            }
        }
        Ok(())
    }
}

fn check_pair(x: &DVector<f64>, x2: &DVector<f64>, hp: &KernelHyperparams) -> Result<()> {
    let n = hp.state_dim();
    if x.len() != n || x2.len() != n {
        return Err(Error::input(format!(
            "kernel inputs have dimensions {} and {}, hyperparameters expect {}",
            x.len(),
            x2.len(),
            n
        )));
    }
    Ok(())
}

/// Base kernel value `σ_s² · exp(−½ Σ_i (x_i − x'_i)²/ℓ_i²)`.
pub fn k_base(x: &DVector<f64>, x2: &DVector<f64>, hp: &KernelHyperparams) -> Result<f64> {
    check_pair(x, x2, hp)?;
    let mut q = 0.0;
    for i in 0..x.len() {
        let d = (x[i] - x2[i]) / hp.lengthscales[i];
        q += d * d;
    }
    Ok(hp.signal_variance * (-0.5 * q).exp())
}

/// Gradient of `k_base` with respect to its first argument:
/// `−k_base(x, x') · diag(1/ℓ_i²) (x − x')`.
pub fn grad1_k_base(
    x: &DVector<f64>,
    x2: &DVector<f64>,
    hp: &KernelHyperparams,
) -> Result<DVector<f64>> {
    let k = k_base(x, x2, hp)?;
    Ok(DVector::from_fn(x.len(), |i, _| {
        let li2 = hp.lengthscales[i] * hp.lengthscales[i];
        -k * (x[i] - x2[i]) / li2
    }))
}

/// Mixed second derivative `∂²k_base/∂x ∂x'`:
/// `k · (Λ⁻¹ − d dᵀ)` with `Λ = diag(ℓ_i²)` and `d = Λ⁻¹(x − x')`.
pub fn hess12_k_base(
    x: &DVector<f64>,
    x2: &DVector<f64>,
    hp: &KernelHyperparams,
) -> Result<DMatrix<f64>> {
    let k = k_base(x, x2, hp)?;
    let n = x.len();
    let d = DVector::from_fn(n, |i, _| {
        (x[i] - x2[i]) / (hp.lengthscales[i] * hp.lengthscales[i])
    });
    let mut out = DMatrix::from_fn(n, n, |i, j| -k * d[i] * d[j]);
    for i in 0..n {
        out[(i, i)] += k / (hp.lengthscales[i] * hp.lengthscales[i]);
    }
    Ok(out)
}

/// Derivative of `hess12_k_base` with respect to `ln ℓ_i`, used by the
/// marginal-likelihood gradient.
pub(crate) fn dhess12_dlog_lengthscale(
    x: &DVector<f64>,
    x2: &DVector<f64>,
    hp: &KernelHyperparams,
    i: usize,
) -> Result<DMatrix<f64>> {
    let k = k_base(x, x2, hp)?;
    let n = x.len();
    let li2 = hp.lengthscales[i] * hp.lengthscales[i];
    let d = DVector::from_fn(n, |a, _| {
        (x[a] - x2[a]) / (hp.lengthscales[a] * hp.lengthscales[a])
    });
    let delta_i = x[i] - x2[i];
    // d/dz_i of k(Λ⁻¹ − ddᵀ) with z_i = ln ℓ_i:
    //   (δ_i²/ℓ_i²)·k·(Λ⁻¹ − ddᵀ)
    //   + k·(−(2/ℓ_i²) e_i e_iᵀ + (2δ_i/ℓ_i²)(e_i dᵀ + d e_iᵀ)).
    let scale = delta_i * delta_i / li2;
    let mut out = DMatrix::from_fn(n, n, |a, b| scale * (-k * d[a] * d[b]));
    for a in 0..n {
        out[(a, a)] += scale * k / (hp.lengthscales[a] * hp.lengthscales[a]);
    }
    out[(i, i)] -= 2.0 * k / li2;
    let c = 2.0 * delta_i / li2;
    for b in 0..n {
        out[(i, b)] += k * c * d[b];
    }
    for a in 0..n {
        out[(a, i)] += k * c * d[a];
    }
    Ok(out)
}

/// Matrix-valued drift kernel `J_R(x) · hess12_k_base(x, x') · J_R(x')ᵀ`.
pub fn k_phs(
    x: &DVector<f64>,
    x2: &DVector<f64>,
    hp: &KernelHyperparams,
    phs: &PhsStructure,
) -> Result<DMatrix<f64>> {
    if phs.state_dim() != hp.state_dim() {
        return Err(Error::input(
            "structure and hyperparameter dimensions disagree",
        ));
    }
    let h = hess12_k_base(x, x2, hp)?;
    Ok(phs.j_r(x) * h * phs.j_r(x2).transpose())
}

/// Hamiltonian/label cross-covariance row.
///
/// Stacks `(J_R(x_k) ∇₁k_base(x_k, x))ᵀ` across training states into a
/// `1×(K·n)` row and right-multiplies by `Bᵀ`, producing the `1×(ℓ·n)`
/// covariance between `H(x)` and the projected labels.
pub fn k_hf_row(
    x: &DVector<f64>,
    states: &[DVector<f64>],
    hp: &KernelHyperparams,
    phs: &PhsStructure,
    ops: &MultistepOperators,
) -> Result<RowDVector<f64>> {
    let n = hp.state_dim();
    if ops.state_dim() != n || phs.state_dim() != n {
        return Err(Error::input("operator state dimension mismatch"));
    }
    if ops.num_states() != states.len() {
        return Err(Error::input(format!(
            "operators cover {} states, got {}",
            ops.num_states(),
            states.len()
        )));
    }

    // Per-state blocks of the unprojected row.
    let mut blocks: Vec<Option<DVector<f64>>> = vec![None; states.len()];
    let mut out = RowDVector::zeros(ops.label_len());
    for (i, w) in ops.windows().iter().enumerate() {
        for j in 0..=ops.order() {
            let idx = w.start + j;
            if blocks[idx].is_none() {
                let grad = grad1_k_base(&states[idx], x, hp)?;
                blocks[idx] = Some(phs.j_r(&states[idx]) * grad);
            }
            let blk = blocks[idx].as_ref().unwrap();
            let bj = w.b[j];
            for r in 0..n {
                out[i * n + r] += bj * blk[r];
            }
        }
    }
    Ok(out)
}
