//! Synthetic run tables drawn from a known coefficient set, for checking
//! that a fit recovers what generated the data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{count_parameters, solve_widths, ShapeFamily, TaskSpec};
use crate::energy_model::{total_energy, EnergyCoefficients, ModeledRun, RunCounts};
use crate::formats::RunRecord;
use crate::worksets::HardwareSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    /// Standard deviation of the multiplicative lognormal noise; 0 for exact energies.
    pub noise_sigma: f64,
    pub seed: u64,
    pub min_log2_ntp: u32,
    pub max_log2_ntp: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 500, noise_sigma: 0.0, seed: 0, min_log2_ntp: 5, max_log2_ntp: 22 }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Random tasks, shapes, depths, sizes and epoch counts, with energies from
/// `coeffs` on `hw`. Task dimensions are written into each row, so no
/// dataset catalog is needed to refit. Runtime is nominal: energy over idle power.
pub fn synthetic_runs(hw: &HardwareSpec, coeffs: &EnergyCoefficients, config: &SynthConfig) -> Vec<RunRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("finite sigma");
    let mut runs = Vec::with_capacity(config.count);
    while runs.len() < config.count {
        let n_train = log_uniform(&mut rng, 100.0, 200_000.0) as u64;
        let task = TaskSpec {
            n_features: log_uniform(&mut rng, 2.0, 1024.0) as usize,
            n_outputs: rng.random_range(1..=10),
            n_train,
            n_test: (n_train / 5).max(1),
            batch_size: TaskSpec::DEFAULT_BATCH_SIZE,
            dtype_bytes: TaskSpec::DEFAULT_DTYPE_BYTES,
        };
        let shape = ShapeFamily::SWEEP[rng.random_range(0..ShapeFamily::SWEEP.len())];
        let depth = rng.random_range(2..=8);
        let target = log_uniform(&mut rng, (1u64 << config.min_log2_ntp) as f64, (1u64 << config.max_log2_ntp) as f64);
        let Ok(arch) = solve_widths(shape, depth, target as u64, &task) else { continue };
        let epochs = rng.random_range(1..=50);
        let counts = RunCounts::for_task(&task, epochs);
        let run = ModeledRun::new(&arch, &task, hw);
        let exact = total_energy(counts, &run, coeffs);
        let energy = if config.noise_sigma > 0.0 { exact * noise.sample(&mut rng).exp() } else { exact };
        let i = runs.len();
        runs.push(RunRecord {
            run_id: format!("synth-{i:05}"),
            node_type: hw.name.clone(),
            dataset: format!("synth-{i:05}"),
            shape: shape.to_string(),
            depth,
            ntp: count_parameters(&arch),
            hardware_class: hw.class,
            epochs,
            train_batches: counts.train_batches,
            test_batches: counts.test_batches,
            runtime_s: energy / hw.idle_power_w.max(1.0),
            raw_energy_j: energy,
            standardized_energy_j: Some(energy),
            analysis_energy_j: None,
            flags: String::new(),
            n_features: Some(task.n_features),
            n_outputs: Some(task.n_outputs),
            n_train: Some(task.n_train),
            n_test: Some(task.n_test),
            batch_size: Some(task.batch_size),
            dtype_bytes: Some(task.dtype_bytes),
        });
    }
    runs
}
