//! Subcommand implementations.
//!
//! Every command loads the TOML run configuration, works inside the output
//! directory, and embeds the config echo plus SHA-256 content hashes of
//! its input files into each artifact. Partially written outputs are
//! removed when a command fails.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use sha2::{Digest, Sha256};

use ebcbf::gp::fit_hyperparameters_traced;
use ebcbf::multistep::assemble_operators_with_gap_factor;
use ebcbf::sim::{generate_dataset, mc_safety_estimate, rollout_closed_loop, sinusoid_input};
use ebcbf::{Dataset, Error, ModelFile, Result, TrainedGp};

use crate::config::RunConfig;

pub const DATASET_FILE: &str = "dataset.csv";
pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "nlml_trace.csv";
pub const SURFACES_FILE: &str = "posterior_surfaces.csv";
pub const FILTERED_TRAJECTORY_FILE: &str = "trajectory_filtered.csv";
pub const NOMINAL_TRAJECTORY_FILE: &str = "trajectory_nominal.csv";
pub const MC_SUMMARY_FILE: &str = "mc_summary.json";

/// Tracks files created by the running command so they can be removed if
/// it fails partway.
#[derive(Default)]
struct Outputs {
    created: Vec<PathBuf>,
}

impl Outputs {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes)?;
        self.created.push(path.to_path_buf());
        Ok(())
    }

    fn discard(&self) {
        for p in &self.created {
            let _ = fs::remove_file(p);
        }
    }
}

fn with_cleanup<F>(f: F) -> Result<()>
where
    F: FnOnce(&mut Outputs) -> Result<()>,
{
    let mut outputs = Outputs::default();
    match f(&mut outputs) {
        Ok(()) => Ok(()),
        Err(e) => {
            outputs.discard();
            Err(e)
        }
    }
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

struct Context {
    cfg: RunConfig,
    cfg_path: PathBuf,
    out_dir: PathBuf,
}

impl Context {
    fn new(cfg_path: &Path, out_dir: Option<&Path>) -> Result<Self> {
        let cfg = RunConfig::load(cfg_path)?;
        let out_dir = out_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
        fs::create_dir_all(&out_dir)?;
        Ok(Context {
            cfg,
            cfg_path: cfg_path.to_path_buf(),
            out_dir,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Comment header carrying the config echo and input hashes.
    fn csv_preamble(&self, inputs: &[(&str, &Path)]) -> Result<String> {
        let mut out = format!("# config: {}\n", self.cfg.echo_json());
        let mut hashes = vec![format!("config={}", sha256_hex(&self.cfg_path)?)];
        for (name, path) in inputs {
            hashes.push(format!("{name}={}", sha256_hex(path)?));
        }
        out.push_str(&format!("# input_sha256: {}\n", hashes.join(" ")));
        Ok(out)
    }

    fn input_hashes(&self, inputs: &[(&str, &Path)]) -> Result<serde_json::Value> {
        let mut map = serde_json::Map::new();
        map.insert(
            "config".into(),
            serde_json::Value::String(sha256_hex(&self.cfg_path)?),
        );
        for (name, path) in inputs {
            map.insert(
                (*name).into(),
                serde_json::Value::String(sha256_hex(path)?),
            );
        }
        Ok(serde_json::Value::Object(map))
    }

    /// Rebuilds the trained model from `model.json` and the dataset it
    /// references.
    fn load_model(&self) -> Result<(TrainedGp, PathBuf, PathBuf)> {
        let model_path = self.path(MODEL_FILE);
        let mf = ModelFile::load(&model_path)?;
        let dataset_path = self.out_dir.join(&mf.dataset_path);
        let actual = sha256_hex(&dataset_path)?;
        if actual != mf.dataset_sha256 {
            return Err(Error::input(format!(
                "dataset {} does not match the hash recorded in {} (got {}, expected {})",
                dataset_path.display(),
                model_path.display(),
                actual,
                mf.dataset_sha256
            )));
        }
        let dataset = Dataset::read_csv_file(&dataset_path)?;
        let ops = assemble_operators_with_gap_factor(
            dataset.times(),
            mf.multistep_order,
            dataset.state_dim(),
            mf.gap_factor,
        )?;
        let model = TrainedGp::new(
            dataset,
            mf.hyperparams()?,
            self.cfg.system()?.phs_structure(),
            ops,
            mf.anchor_h0,
        )?;
        Ok((model, model_path, dataset_path))
    }
}

/// `gen-data`: integrate the ground-truth system, corrupt and subsample,
/// and write `dataset.csv`.
pub fn gen_data(cfg_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let ctx = Context::new(cfg_path, out_dir)?;
    with_cleanup(|outputs| {
        let system = ctx.cfg.system()?;
        let sim = ctx.cfg.sim_config();
        let drive = sinusoid_input(ctx.cfg.sim.drive_amplitude, ctx.cfg.sim.drive_frequency);
        let dataset = generate_dataset(&system, &sim, &ctx.cfg.sim_x0(), drive)?;

        let mut buf = Vec::new();
        buf.extend_from_slice(ctx.csv_preamble(&[])?.as_bytes());
        dataset.write_csv(&mut buf)?;
        outputs.write(&ctx.path(DATASET_FILE), &buf)?;
        println!(
            "wrote {} ({} samples over [{:.3}, {:.3}] s)",
            ctx.path(DATASET_FILE).display(),
            dataset.len(),
            sim.t0,
            sim.tf
        );
        Ok(())
    })
}

/// `fit`: fit kernel hyperparameters on `dataset.csv` by marginal
/// likelihood and write `model.json` plus the NLML trace.
pub fn fit(cfg_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let ctx = Context::new(cfg_path, out_dir)?;
    with_cleanup(|outputs| {
        let dataset_path = ctx.path(DATASET_FILE);
        let dataset = Dataset::read_csv_file(&dataset_path)?;
        let system = ctx.cfg.system()?;
        let phs = system.phs_structure();
        let ops = assemble_operators_with_gap_factor(
            dataset.times(),
            ctx.cfg.gp.order,
            dataset.state_dim(),
            ctx.cfg.gp.gap_factor,
        )?;
        let opt = ctx.cfg.optimizer_config()?;
        let (hp, trace) = fit_hyperparameters_traced(&dataset, &phs, &ops, &opt)?;

        let model = ModelFile {
            signal_variance: hp.signal_variance,
            lengthscales: hp.lengthscales.iter().cloned().collect(),
            noise_variance: hp.noise_variance,
            anchor_h0: ctx.cfg.gp.anchor_h0,
            multistep_order: ctx.cfg.gp.order,
            gap_factor: ctx.cfg.gp.gap_factor,
            dataset_path: DATASET_FILE.into(),
            dataset_sha256: sha256_hex(&dataset_path)?,
        };
        let mut value = serde_json::to_value(&model)
            .map_err(|e| Error::input(format!("model serialization failed: {e}")))?;
        let obj = value.as_object_mut().expect("model serializes to an object");
        obj.insert(
            "config".into(),
            serde_json::to_value(&ctx.cfg)
                .map_err(|e| Error::input(format!("config echo failed: {e}")))?,
        );
        obj.insert(
            "input_sha256".into(),
            ctx.input_hashes(&[("dataset", dataset_path.as_path())])?,
        );
        let json = serde_json::to_string_pretty(&value)
            .map_err(|e| Error::input(format!("model serialization failed: {e}")))?;
        outputs.write(&ctx.path(MODEL_FILE), format!("{json}\n").as_bytes())?;

        let mut csv = ctx.csv_preamble(&[("dataset", dataset_path.as_path())])?;
        csv.push_str("iter,nlml\n");
        for (i, v) in trace.nlml.iter().enumerate() {
            csv.push_str(&format!("{i},{v:.17e}\n"));
        }
        outputs.write(&ctx.path(TRACE_FILE), csv.as_bytes())?;

        println!(
            "fitted hyperparameters: signal_std = {:.4}, lengthscales = {:?}, noise_std = {:.4} \
             (NLML {:.4} -> {:.4} over {} evaluations)",
            hp.signal_variance.sqrt(),
            hp.lengthscales.as_slice(),
            hp.noise_variance.sqrt(),
            trace.nlml.first().unwrap_or(&f64::NAN),
            trace.nlml.iter().cloned().fold(f64::INFINITY, f64::min),
            trace.nlml.len()
        );
        Ok(())
    })
}

/// `eval-posterior`: evaluate drift, Hamiltonian, kinetic, and potential
/// posteriors plus the barrier on the `[eval]` grid.
pub fn eval_posterior(cfg_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let ctx = Context::new(cfg_path, out_dir)?;
    with_cleanup(|outputs| {
        let (model, model_path, dataset_path) = ctx.load_model()?;
        let grid = ctx.cfg.eval_grid()?;
        let spec = ctx.cfg.barrier_spec()?;

        let mut csv = ctx.csv_preamble(&[
            ("model", model_path.as_path()),
            ("dataset", dataset_path.as_path()),
        ])?;
        csv.push_str(
            "q,p,mu_f_q,mu_f_p,var_f_qq,var_f_qp,var_f_pp,mu_h,var_h,mu_t,var_t,mu_v,var_v,h_eb\n",
        );
        for point in grid.points() {
            let (mu_f, cov_f) = model.posterior_drift(&point)?;
            let (mu_h, var_h) = model.posterior_hamiltonian(&point)?;
            let q = DVector::from_vec(vec![point[0]]);
            let p = DVector::from_vec(vec![point[1]]);
            let (mu_t, var_t) = model.posterior_kinetic(&q, &p)?;
            let (mu_v, var_v) = model.posterior_potential(&q)?;
            let h_eb = spec.h_eb(&model, &point)?;
            csv.push_str(&format!(
                "{:.6e},{:.6e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                point[0],
                point[1],
                mu_f[0],
                mu_f[1],
                cov_f[(0, 0)],
                cov_f[(0, 1)],
                cov_f[(1, 1)],
                mu_h,
                var_h,
                mu_t,
                var_t,
                mu_v,
                var_v,
                h_eb
            ));
        }
        outputs.write(&ctx.path(SURFACES_FILE), csv.as_bytes())?;
        println!(
            "wrote {} ({} grid points)",
            ctx.path(SURFACES_FILE).display(),
            grid.len()
        );
        Ok(())
    })
}

/// `run-filter`: roll out the nominal and the filtered closed loop on the
/// ground-truth system and write both trajectories.
pub fn run_filter(cfg_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let ctx = Context::new(cfg_path, out_dir)?;
    with_cleanup(|outputs| {
        let (model, model_path, dataset_path) = ctx.load_model()?;
        let system = ctx.cfg.system()?;
        let spec = ctx.cfg.barrier_spec()?;
        let fcfg = ctx.cfg.filter_config()?;
        let (sim, x0) = ctx.cfg.rollout_sim()?;

        let preamble = ctx.csv_preamble(&[
            ("model", model_path.as_path()),
            ("dataset", dataset_path.as_path()),
        ])?;

        let nominal = rollout_closed_loop(&system, &fcfg, false, &x0, &sim, &spec, &model)?;
        let filtered = rollout_closed_loop(&system, &fcfg, true, &x0, &sim, &spec, &model)?;

        for (traj, file) in [
            (&nominal, NOMINAL_TRAJECTORY_FILE),
            (&filtered, FILTERED_TRAJECTORY_FILE),
        ] {
            let mut buf = Vec::new();
            buf.extend_from_slice(preamble.as_bytes());
            traj.write_csv(&mut buf)?;
            outputs.write(&ctx.path(file), &buf)?;
        }
        println!(
            "nominal: min h_EB = {:.6}, crossing = {}; filtered: min h_EB = {:.6}, crossing = {}",
            nominal.min_h_eb(),
            nominal
                .event
                .map(|e| format!("t = {:.3}", e.time))
                .unwrap_or_else(|| "none".into()),
            filtered.min_h_eb(),
            filtered
                .event
                .map(|e| format!("t = {:.3}", e.time))
                .unwrap_or_else(|| "none".into()),
        );
        Ok(())
    })
}

/// `mc-verify`: Monte-Carlo estimate of the probability that the filtered
/// closed loop stays in the design safe set.
pub fn mc_verify(cfg_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let ctx = Context::new(cfg_path, out_dir)?;
    with_cleanup(|outputs| {
        let (model, model_path, dataset_path) = ctx.load_model()?;
        let spec = ctx.cfg.barrier_spec()?;
        let fcfg = ctx.cfg.filter_config()?;
        let mc = ctx.cfg.mc_config()?;
        let x0 = ctx.cfg.mc_x0()?;

        let summary = mc_safety_estimate(&model, &spec, &fcfg, &x0, &mc)?;

        let mut value = serde_json::to_value(&summary)
            .map_err(|e| Error::input(format!("summary serialization failed: {e}")))?;
        let obj = value.as_object_mut().expect("summary serializes to an object");
        obj.insert(
            "config".into(),
            serde_json::to_value(&ctx.cfg)
                .map_err(|e| Error::input(format!("config echo failed: {e}")))?,
        );
        obj.insert(
            "input_sha256".into(),
            ctx.input_hashes(&[
                ("model", model_path.as_path()),
                ("dataset", dataset_path.as_path()),
            ])?,
        );
        let json = serde_json::to_string_pretty(&value)
            .map_err(|e| Error::input(format!("summary serialization failed: {e}")))?;
        outputs.write(&ctx.path(MC_SUMMARY_FILE), format!("{json}\n").as_bytes())?;

        println!(
            "safe fraction {}/{} = {:.4} (Wilson 95% [{:.4}, {:.4}])",
            summary.n_safe,
            summary.n_samples,
            summary.safe_fraction,
            summary.wilson_lo,
            summary.wilson_hi
        );
        Ok(())
    })
}
