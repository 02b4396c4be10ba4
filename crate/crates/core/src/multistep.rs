//! Variable-step linear multistep operators.
//!
//! For a window of `M+1` consecutive samples the implicit Adams–Moulton rule
//! relates the last state difference to an interpolatory quadrature of the
//! drift over the final subinterval:
//!
//! ```text
//! x(t_{k+M}) − x(t_{k+M−1}) ≈ Σ_j b_j f(x(t_{k+j})),
//! ```
//!
//! with weights exact for polynomial integrands up to degree `M`. Stacking
//! one block row per window and extending each scalar coefficient by the
//! identity on the state dimension yields the operators `A` (differences)
//! and `B` (quadrature) that project a noisy state sequence into
//! derivative-consistent labels `Y = A·X̃`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Windows spanning a gap larger than this multiple of the median sampling
/// step are dropped: the local polynomial model is unreliable across them.
pub const DEFAULT_GAP_FACTOR: f64 = 10.0;

/// One multistep window: `M+1` consecutive samples starting at `start`,
/// with difference coefficients `a` and quadrature weights `b`.
#[derive(Debug, Clone)]
pub struct Window {
    pub start: usize,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
}

/// Stacked multistep operators over a sample sequence of `num_states`
/// states of dimension `state_dim`.
///
/// Block row `i` of either operator touches only the `order + 1`
/// consecutive sample indices of window `i`.
#[derive(Debug, Clone)]
pub struct MultistepOperators {
    windows: Vec<Window>,
    order: usize,
    state_dim: usize,
    num_states: usize,
}

/// Coefficients of the variable-step Adams–Moulton rule on the window
/// `times` (exactly `order + 1` strictly increasing timestamps).
///
/// Returns `(a, b)`: `a` encodes `x_{M} − x_{M−1}` and `b` the quadrature
/// weights over `[t_{M−1}, t_M]`, exact for polynomials of degree ≤ `order`.
pub fn vlmm_coefficients(times: &[f64], order: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if order < 1 {
        return Err(Error::input("multistep order must be at least 1"));
    }
    if times.len() != order + 1 {
        return Err(Error::input(format!(
            "order {} window needs {} timestamps, got {}",
            order,
            order + 1,
            times.len()
        )));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::input("timestamps must be strictly increasing"));
    }

    let m = order;
    // Work in coordinates local to the left endpoint of the integration
    // interval [t_{M-1}, t_M] to keep the Vandermonde system well scaled.
    let origin = times[m - 1];
    let s: Vec<f64> = times.iter().map(|t| t - origin).collect();
    let h = s[m];

    // Polynomial exactness: Σ_j b_j s_j^d = ∫_0^h s^d ds for d = 0..=M.
    let vander = DMatrix::from_fn(m + 1, m + 1, |d, j| s[j].powi(d as i32));
    let rhs = DVector::from_fn(m + 1, |d, _| h.powi(d as i32 + 1) / (d as f64 + 1.0));
    let b = vander
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("singular quadrature system in vlmm_coefficients"))?;

    let mut a = DVector::zeros(m + 1);
    a[m - 1] = -1.0;
    a[m] = 1.0;
    Ok((a, b))
}

/// Assembles stacked operators with the default gap factor.
pub fn assemble_operators(
    times: &[f64],
    order: usize,
    state_dim: usize,
) -> Result<MultistepOperators> {
    assemble_operators_with_gap_factor(times, order, state_dim, DEFAULT_GAP_FACTOR)
}

/// Assembles stacked operators, dropping windows whose largest internal
/// step exceeds `gap_factor` times the median step of `times`.
pub fn assemble_operators_with_gap_factor(
    times: &[f64],
    order: usize,
    state_dim: usize,
    gap_factor: f64,
) -> Result<MultistepOperators> {
    if state_dim == 0 {
        return Err(Error::input("state dimension must be positive"));
    }
    let k = times.len();
    if k <= order {
        return Err(Error::input(format!(
            "need more than {} samples for order {}, got {}",
            order, order, k
        )));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::input("timestamps must be strictly increasing"));
    }

    let mut steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    steps.sort_by(|a, b| a.total_cmp(b));
    let median_step = steps[steps.len() / 2];
    let max_allowed = gap_factor * median_step;

    let mut windows = Vec::with_capacity(k - order);
    for start in 0..(k - order) {
        let local = &times[start..=start + order];
        let widest = local
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0_f64, f64::max);
        if widest > max_allowed {
            continue;
        }
        let (a, b) = vlmm_coefficients(local, order)?;
        windows.push(Window { start, a, b });
    }

    MultistepOperators::from_windows(windows, order, state_dim, k)
}

impl MultistepOperators {
    /// Builds operators from explicit windows. Intended for tests and
    /// custom schemes; `assemble_operators` is the usual entry point.
    pub fn from_windows(
        windows: Vec<Window>,
        order: usize,
        state_dim: usize,
        num_states: usize,
    ) -> Result<Self> {
        for w in &windows {
            if w.a.len() != order + 1 || w.b.len() != order + 1 {
                return Err(Error::input("window coefficient length must be order + 1"));
            }
            if w.start + order >= num_states {
                return Err(Error::input("window extends past the sample sequence"));
            }
        }
        Ok(MultistepOperators {
            windows,
            order,
            state_dim,
            num_states,
        })
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    /// Number of label rows, `ℓ·n`.
    pub fn label_len(&self) -> usize {
        self.windows.len() * self.state_dim
    }

    /// Length of a flattened state sequence, `K·n`.
    pub fn flat_len(&self) -> usize {
        self.num_states * self.state_dim
    }

    fn check_flat(&self, flat: &DVector<f64>) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::input(format!(
                "flattened sequence has length {}, operators expect {}",
                flat.len(),
                self.flat_len()
            )));
        }
        Ok(())
    }

    /// Projected labels `Y = A·X̃` for a state-major flattened sequence
    /// `X̃ = [x_1ᵀ, …, x_Kᵀ]ᵀ`.
    pub fn project_labels(&self, noisy_states: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_blocked(noisy_states, |w| &w.a)
    }

    /// Applies the quadrature operator, `B·v`, to a state-major flattened
    /// vector.
    pub fn apply_b(&self, flat: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_blocked(flat, |w| &w.b)
    }

    fn apply_blocked<'a, F>(&'a self, flat: &DVector<f64>, coeff: F) -> Result<DVector<f64>>
    where
        F: Fn(&'a Window) -> &'a DVector<f64>,
    {
        self.check_flat(flat)?;
        let n = self.state_dim;
        let mut out = DVector::zeros(self.label_len());
        for (i, w) in self.windows.iter().enumerate() {
            let c = coeff(w);
            for j in 0..=self.order {
                let cj = c[j];
                if cj == 0.0 {
                    continue;
                }
                let src = (w.start + j) * n;
                for r in 0..n {
                    out[i * n + r] += cj * flat[src + r];
                }
            }
        }
        Ok(out)
    }

    /// Dense `(ℓ·n)×(K·n)` difference operator. For oracles and small
    /// problems; prefer the structured applications elsewhere.
    pub fn dense_a(&self) -> DMatrix<f64> {
        self.dense(|w| &w.a)
    }

    /// Dense `(ℓ·n)×(K·n)` quadrature operator.
    pub fn dense_b(&self) -> DMatrix<f64> {
        self.dense(|w| &w.b)
    }

    fn dense<'a, F>(&'a self, coeff: F) -> DMatrix<f64>
    where
        F: Fn(&'a Window) -> &'a DVector<f64>,
    {
        let n = self.state_dim;
        let mut out = DMatrix::zeros(self.label_len(), self.flat_len());
        for (i, w) in self.windows.iter().enumerate() {
            let c = coeff(w);
            for j in 0..=self.order {
                for r in 0..n {
                    out[(i * n + r, (w.start + j) * n + r)] = c[j];
                }
            }
        }
        out
    }
}
