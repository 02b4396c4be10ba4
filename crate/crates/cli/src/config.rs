//! Run configuration: a TOML manifest describing the system, data
//! generation, GP fitting, barrier, filter, and verification settings of
//! one reproducible experiment.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use ebcbf::barrier::{beta_from_eta, beta_from_eta_on_grid};
use ebcbf::gp::GpOptimizerConfig;
use ebcbf::kernels::KernelHyperparams;
use ebcbf::{
    BarrierSpec, CombineMode, EnergyConstraint, Error, FilterConfig, MassSpring, McConfig,
    NominalController, PhaseGrid, Result, SimConfig, Threshold,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub sim: SimSection,
    pub gp: GpSection,
    pub barrier: BarrierSection,
    pub filter: FilterSection,
    #[serde(default)]
    pub rollout: Option<RolloutSection>,
    #[serde(default)]
    pub mc: Option<McSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub stiffness: f64,
    pub mass: f64,
    #[serde(default)]
    pub damping: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default)]
    pub t0: f64,
    pub tf: f64,
    pub dt: f64,
    pub noise_std: f64,
    pub keep_fraction: f64,
    pub seed: u64,
    pub x0: Vec<f64>,
    /// Amplitude of the sinusoidal excitation applied while generating
    /// data; zero means the unforced system.
    #[serde(default)]
    pub drive_amplitude: f64,
    /// Angular frequency of the excitation.
    #[serde(default = "default_drive_frequency")]
    pub drive_frequency: f64,
}

fn default_drive_frequency() -> f64 {
    1.0
}

fn default_order() -> usize {
    2
}

fn default_gap_factor() -> f64 {
    ebcbf::multistep::DEFAULT_GAP_FACTOR
}

fn default_iterations() -> usize {
    500
}

fn default_learning_rate() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSection {
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_gap_factor")]
    pub gap_factor: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub anchor_h0: f64,
    /// Optional initial hyperparameters (σ_s, per-dimension ℓ, σ_x).
    #[serde(default)]
    pub init_signal_std: Option<f64>,
    #[serde(default)]
    pub init_lengthscales: Option<Vec<f64>>,
    #[serde(default)]
    pub init_noise_std: Option<f64>,
}

fn default_tau() -> f64 {
    ebcbf::barrier::DEFAULT_SOFTMIN_TEMPERATURE
}

fn default_combine() -> String {
    "softmin".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    /// Pointwise credible level η_EB; mutually exclusive with `beta`.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Explicit band multiplier β_EB.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Optional Bonferroni correction over this many grid cells, making
    /// the band uniform over an evaluation grid.
    #[serde(default)]
    pub bonferroni_cells: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// "softmin" or "min".
    #[serde(default = "default_combine")]
    pub combine: String,
    pub constraints: Vec<ConstraintConfig>,
}

/// One constraint row. `kind` selects the family; kinematic kinds use
/// `index`/`lower`/`upper`, energy kinds take a constant `bound` or an
/// affine one (`offset` + `linear·q`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub kind: String,
    #[serde(default)]
    pub index: Option<usize>,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
    #[serde(default)]
    pub bound: Option<f64>,
    #[serde(default)]
    pub offset: Option<f64>,
    #[serde(default)]
    pub linear: Option<Vec<f64>>,
}

fn default_gamma() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Credible level η_dyn; mutually exclusive with `beta_f`.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub beta_f: Option<f64>,
    #[serde(default)]
    pub input_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub input_upper: Option<Vec<f64>>,
    /// "zero" or "constant".
    #[serde(default)]
    pub nominal: Option<String>,
    #[serde(default)]
    pub nominal_value: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub t_span: f64,
    pub dt: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub n_samples: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub grid: GridConfig,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub grid: GridConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub q_min: f64,
    pub q_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub nq: usize,
    pub np: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sim.x0.len() != 2 {
            return Err(Error::config("sim.x0 must have exactly 2 entries (q, p)"));
        }
        self.system()?;
        self.sim_config().validate()?;
        self.barrier_spec()?;
        self.filter_config()?;
        Ok(())
    }

    /// The full configuration re-serialized as one JSON line, embedded in
    /// every output for provenance.
    pub fn echo_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn system(&self) -> Result<MassSpring> {
        MassSpring::new(
            self.system.stiffness,
            self.system.mass,
            self.system.damping,
        )
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            t0: self.sim.t0,
            tf: self.sim.tf,
            dt: self.sim.dt,
            noise_std: self.sim.noise_std,
            keep_fraction: self.sim.keep_fraction,
            seed: self.sim.seed,
        }
    }

    pub fn sim_x0(&self) -> DVector<f64> {
        DVector::from_vec(self.sim.x0.clone())
    }

    pub fn optimizer_config(&self) -> Result<GpOptimizerConfig> {
        let init = match (
            &self.gp.init_signal_std,
            &self.gp.init_lengthscales,
            &self.gp.init_noise_std,
        ) {
            (None, None, None) => None,
            (signal, lengths, noise) => {
                let signal = signal.unwrap_or(1.0);
                let lengths = lengths.clone().unwrap_or_else(|| vec![1.0, 1.0]);
                let noise = noise.unwrap_or(0.1);
                Some(KernelHyperparams::new(
                    signal * signal,
                    DVector::from_vec(lengths),
                    noise * noise,
                )?)
            }
        };
        Ok(GpOptimizerConfig {
            learning_rate: self.gp.learning_rate,
            iterations: self.gp.iterations,
            init,
        })
    }

    pub fn barrier_beta(&self) -> Result<f64> {
        match (self.barrier.eta, self.barrier.beta) {
            (Some(_), Some(_)) => Err(Error::config(
                "barrier: set either eta or beta, not both",
            )),
            (None, None) => Err(Error::config("barrier: set eta or beta")),
            (None, Some(beta)) => Ok(beta),
            (Some(eta), None) => match self.barrier.bonferroni_cells {
                Some(cells) => beta_from_eta_on_grid(eta, cells),
                None => beta_from_eta(eta),
            },
        }
    }

    pub fn barrier_spec(&self) -> Result<BarrierSpec> {
        let beta = self.barrier_beta()?;
        let combine = match self.barrier.combine.as_str() {
            "softmin" => CombineMode::SoftMin,
            "min" => CombineMode::ExactMin,
            other => {
                return Err(Error::config(format!(
                    "barrier.combine must be 'softmin' or 'min', got '{other}'"
                )))
            }
        };
        let constraints: Vec<EnergyConstraint> = self
            .barrier
            .constraints
            .iter()
            .map(constraint_from_config)
            .collect::<Result<_>>()?;
        BarrierSpec::new(constraints, beta, self.barrier.tau, combine)
    }

    pub fn filter_beta(&self) -> Result<f64> {
        match (self.filter.eta, self.filter.beta_f) {
            (Some(_), Some(_)) => Err(Error::config(
                "filter: set either eta or beta_f, not both",
            )),
            (None, None) => Err(Error::config("filter: set eta or beta_f")),
            (None, Some(beta)) => Ok(beta),
            (Some(eta), None) => beta_from_eta(eta),
        }
    }

    pub fn filter_config(&self) -> Result<FilterConfig> {
        let beta_f = self.filter_beta()?;
        let input_bounds = match (&self.filter.input_lower, &self.filter.input_upper) {
            (None, None) => None,
            (Some(lo), Some(hi)) => {
                if lo.len() != hi.len() {
                    return Err(Error::config("filter input bounds length mismatch"));
                }
                Some(lo.iter().cloned().zip(hi.iter().cloned()).collect())
            }
            _ => {
                return Err(Error::config(
                    "filter: input_lower and input_upper must be given together",
                ))
            }
        };
        let nominal = match self.filter.nominal.as_deref() {
            None | Some("zero") => NominalController::Zero,
            Some("constant") => {
                let v = self.filter.nominal_value.clone().ok_or_else(|| {
                    Error::config("filter.nominal = 'constant' needs nominal_value")
                })?;
                NominalController::Constant(DVector::from_vec(v))
            }
            Some(other) => {
                return Err(Error::config(format!(
                    "filter.nominal must be 'zero' or 'constant', got '{other}'"
                )))
            }
        };
        let cfg = FilterConfig {
            gamma: self.filter.gamma,
            beta_f,
            input_bounds,
            nominal,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mc_config(&self) -> Result<McConfig> {
        let mc = self
            .mc
            .as_ref()
            .ok_or_else(|| Error::config("config has no [mc] section"))?;
        let cfg = McConfig {
            n_samples: mc.n_samples,
            horizon: mc.horizon,
            dt: mc.dt,
            grid: grid_from_config(&mc.grid),
            seed: mc.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mc_x0(&self) -> Result<DVector<f64>> {
        let mc = self
            .mc
            .as_ref()
            .ok_or_else(|| Error::config("config has no [mc] section"))?;
        Ok(mc
            .x0
            .as_ref()
            .map(|v| DVector::from_vec(v.clone()))
            .unwrap_or_else(|| self.sim_x0()))
    }

    pub fn eval_grid(&self) -> Result<PhaseGrid> {
        let eval = self
            .eval
            .as_ref()
            .ok_or_else(|| Error::config("config has no [eval] section"))?;
        let grid = grid_from_config(&eval.grid);
        grid.validate()?;
        Ok(grid)
    }

    pub fn rollout_sim(&self) -> Result<(SimConfig, DVector<f64>)> {
        let ro = self
            .rollout
            .as_ref()
            .ok_or_else(|| Error::config("config has no [rollout] section"))?;
        let sim = SimConfig {
            t0: 0.0,
            tf: ro.t_span,
            dt: ro.dt,
            noise_std: 0.0,
            keep_fraction: 1.0,
            seed: self.sim.seed,
        };
        sim.validate()?;
        let x0 = ro
            .x0
            .as_ref()
            .map(|v| DVector::from_vec(v.clone()))
            .unwrap_or_else(|| self.sim_x0());
        Ok((sim, x0))
    }
}

pub fn grid_from_config(g: &GridConfig) -> PhaseGrid {
    PhaseGrid {
        q_min: g.q_min,
        q_max: g.q_max,
        p_min: g.p_min,
        p_max: g.p_max,
        nq: g.nq,
        np: g.np,
    }
}

fn constraint_from_config(c: &ConstraintConfig) -> Result<EnergyConstraint> {
    let threshold = |c: &ConstraintConfig| -> Result<Threshold> {
        match (c.bound, c.offset.is_some() || c.linear.is_some()) {
            (Some(b), false) => Ok(Threshold::Constant(b)),
            (None, true) => {
                let offset = c.offset.unwrap_or(0.0);
                let linear = c.linear.clone().unwrap_or_default();
                Ok(Threshold::affine(offset, DVector::from_vec(linear)))
            }
            (Some(_), true) => Err(Error::config(
                "constraint: give either 'bound' or 'offset'/'linear', not both",
            )),
            (None, false) => Err(Error::config(format!(
                "constraint kind '{}' needs 'bound' or 'offset'/'linear'",
                c.kind
            ))),
        }
    };
    match c.kind.as_str() {
        "position_min" => {
            let lower = c
                .lower
                .ok_or_else(|| Error::config("position_min needs 'lower'"))?;
            Ok(EnergyConstraint::position_min(c.index.unwrap_or(0), lower))
        }
        "position_max" => {
            let upper = c
                .upper
                .ok_or_else(|| Error::config("position_max needs 'upper'"))?;
            Ok(EnergyConstraint::position_max(c.index.unwrap_or(0), upper))
        }
        "kinetic_upper" => Ok(EnergyConstraint::KineticUpper(threshold(c)?)),
        "potential_upper" => Ok(EnergyConstraint::PotentialUpper(threshold(c)?)),
        "total_upper" => Ok(EnergyConstraint::TotalUpper(threshold(c)?)),
        "total_lower" => Ok(EnergyConstraint::TotalLower(threshold(c)?)),
        other => Err(Error::config(format!(
            "unknown constraint kind '{other}' (expected position_min, position_max, \
             kinetic_upper, potential_upper, total_upper, total_lower)"
        ))),
    }
}
