//! Shared fixtures for the pipeline benchmarks.

use nalgebra::DVector;

use ebcbf::multistep::assemble_operators;
use ebcbf::sim::{generate_dataset, zero_input};
use ebcbf::{
    BarrierSpec, CombineMode, Dataset, EnergyConstraint, FilterConfig, KernelHyperparams,
    MassSpring, SimConfig, Threshold, TrainedGp,
};

/// Noisy mass-spring dataset in the benchmark regime, subsampled to
/// roughly `target` samples.
pub fn benchmark_dataset(target: usize) -> Dataset {
    let system = MassSpring::unit();
    let cfg = SimConfig {
        t0: 0.0,
        tf: 20.0,
        dt: 4e-3,
        noise_std: 0.05,
        keep_fraction: target as f64 / 5001.0,
        seed: 42,
    };
    generate_dataset(
        &system,
        &cfg,
        &DVector::from_vec(vec![1.2, 0.0]),
        zero_input(1),
    )
    .expect("benchmark dataset generates")
}

/// Model with plausible fixed hyperparameters over `target` samples.
pub fn benchmark_model(target: usize) -> TrainedGp {
    let dataset = benchmark_dataset(target);
    let ops = assemble_operators(dataset.times(), 2, 2).expect("operators assemble");
    let hp = KernelHyperparams::new(0.09, DVector::from_vec(vec![0.46, 0.54]), 0.0025)
        .expect("valid hyperparameters");
    TrainedGp::new(dataset, hp, MassSpring::unit().phs_structure(), ops, 0.0)
        .expect("model builds")
}

/// The kinetic-budget barrier encoding `q >= -1`.
pub fn benchmark_barrier() -> BarrierSpec {
    BarrierSpec::new(
        vec![EnergyConstraint::KineticUpper(Threshold::affine(
            1.0,
            DVector::from_vec(vec![1.0]),
        ))],
        2.716,
        20.0,
        CombineMode::SoftMin,
    )
    .expect("barrier builds")
}

pub fn benchmark_filter() -> FilterConfig {
    FilterConfig::new(1.0, 2.448).expect("filter config builds")
}
