//! Acceptance checks, one PASS/FAIL/SKIP line each.
//!
//! Run with `cargo test --test acceptance -- --nocapture`.
//!
//! The dataset replay check reads these variables and is skipped when
//! `MLP_ENERGY_POWER` or `MLP_ENERGY_JOBS` is unset:
//!
//! - `MLP_ENERGY_POWER`, `MLP_ENERGY_JOBS`: power and job CSV exports
//! - `MLP_ENERGY_DATASETS`: dataset catalog CSV (needed for the refit)
//! - `MLP_ENERGY_REFERENCE_NODE`: reference node type, default `cpu1`

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use mlp_energy::advisor::energy_per_datum;
use mlp_energy::arch::{count_parameters, solve_widths, NetworkArchitecture, ShapeFamily, TaskSpec};
use mlp_energy::energy_model::{build_design_row, total_energy, EnergyCoefficients, ModeledRun, RunCounts};
use mlp_energy::fitting::{fit, ErrorStats, FitConfig, FitProblem};
use mlp_energy::formats::{self, bundled_coefficients, bundled_hardware, DatasetCatalog, DatasetEntry, RunRecord};
use mlp_energy::ingest::{ingest, integrate_energy, standardize, IngestConfig, JobRecord, PowerSample, PowerSeries};
use mlp_energy::synth::{synthetic_runs, SynthConfig};
use mlp_energy::worksets::{
    compute_working_sets, place_working_sets, HardwareClass, HardwareSpec, MemoryLevel, PlacementMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Outcome;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

fn random_task(rng: &mut ChaCha8Rng) -> TaskSpec {
    TaskSpec {
        n_features: rng.random_range(1..=1024),
        n_outputs: rng.random_range(1..=20),
        n_train: log_uniform(rng, 1.0, 1e6) as u64,
        n_test: log_uniform(rng, 1.0, 1e5) as u64,
        batch_size: [1, 32, 256, 1024][rng.random_range(0..4)],
        dtype_bytes: [2, 4, 8][rng.random_range(0..3)],
    }
}

fn random_arch(rng: &mut ChaCha8Rng, task: &TaskSpec) -> NetworkArchitecture {
    let depth = rng.random_range(1..=10);
    let mut widths: Vec<usize> = (0..depth - 1).map(|_| log_uniform(rng, 1.0, 8192.0) as usize).collect();
    widths.push(task.n_outputs);
    NetworkArchitecture { input_width: task.n_features, layer_widths: widths, residual: rng.random_bool(0.3) }
}

fn random_hardware(rng: &mut ChaCha8Rng) -> HardwareSpec {
    let n_units = rng.random_range(1..=256);
    let bounded = rng.random_range(0..=3);
    let mut caps: Vec<u64> = (0..bounded).map(|_| log_uniform(rng, 1024.0, 256.0 * 1024.0 * 1024.0) as u64).collect();
    caps.sort_unstable();
    let mut levels: Vec<MemoryLevel> = caps
        .into_iter()
        .enumerate()
        .map(|(i, cap)| {
            let label = format!("L{}", i + 1);
            if rng.random_bool(0.5) {
                MemoryLevel::shared(&label, Some(cap), rng.random_range(1..=n_units))
            } else {
                MemoryLevel::per_unit(&label, cap)
            }
        })
        .collect();
    levels.push(MemoryLevel::shared("RAM", None, n_units));
    HardwareSpec { name: "random".into(), class: HardwareClass::Cpu, n_units, idle_power_w: 0.0, levels }
}

fn random_coefficients(rng: &mut ChaCha8Rng, levels: &[String]) -> EnergyCoefficients {
    let k: Vec<f64> = (0..EnergyCoefficients::len_for(levels.len()))
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { log_uniform(rng, 1e-12, 1e4) })
        .collect();
    EnergyCoefficients::from_vector(levels, &k).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn parameter_count_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let started = Instant::now();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let layers = rng.random_range(1..=6);
        let input = rng.random_range(1..=32);
        let widths: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=32)).collect();
        let arch = NetworkArchitecture { input_width: input, layer_widths: widths.clone(), residual: false };
        let mut enumerated = 0u64;
        let mut fan_in = input;
        for &w in &widths {
            for _unit in 0..w {
                for _src in 0..fan_in {
                    enumerated += 1;
                }
                enumerated += 1; // bias
            }
            fan_in = w;
        }
        if enumerated != count_parameters(&arch) {
            mismatches += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(mismatches == 0 && secs < 1.0, format!("1000 architectures, {mismatches} mismatches, {secs:.3} s"))
}

fn placement_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..10_000 {
        let task = random_task(&mut rng);
        let arch = random_arch(&mut rng, &task);
        let hw = random_hardware(&mut rng);
        if !place_working_sets(&compute_working_sets(&arch, &task), &hw).is_ordered() {
            violations += 1;
        }
    }
    verdict(violations == 0, format!("10000 samples, {violations} violations"))
}

fn design_matrix_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let task = random_task(&mut rng);
        let arch = random_arch(&mut rng, &task);
        let hw = random_hardware(&mut rng);
        let coeffs = random_coefficients(&mut rng, &hw.labels());
        let counts = RunCounts::for_task(&task, rng.random_range(0..=200));
        let run = ModeledRun::new(&arch, &task, &hw);
        let row = build_design_row(counts, &run, hw.levels.len());
        worst = worst.max(rel(row.dot(&coeffs.to_vector()), total_energy(counts, &run, &coeffs)));
    }
    verdict(worst <= 1e-9, format!("1000 cases, max relative difference {worst:.2e}"))
}

fn linearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_line, mut worst_epoch) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let task = random_task(&mut rng);
        let arch = random_arch(&mut rng, &task);
        let hw = random_hardware(&mut rng);
        let coeffs = random_coefficients(&mut rng, &hw.labels());
        let run = ModeledRun::new(&arch, &task, &hw);
        let ns = [1u64, 7, 23];
        let e: Vec<f64> =
            ns.iter().map(|&n| total_energy(RunCounts::for_task(&task, n), &run, &coeffs) - coeffs.k_e).collect();
        let slope_a = (e[1] - e[0]) / (ns[1] - ns[0]) as f64;
        let slope_b = (e[2] - e[0]) / (ns[2] - ns[0]) as f64;
        worst_line = worst_line.max(rel(slope_a, slope_b));
        for (&n, &en) in ns.iter().zip(&e) {
            worst_epoch = worst_epoch.max(rel(en / n as f64, e[0]));
        }
    }
    verdict(
        worst_line <= 1e-9 && worst_epoch <= 1e-9,
        format!("1000 cases, collinearity {worst_line:.2e}, per-epoch spread {worst_epoch:.2e}"),
    )
}

fn coefficient_recovery() -> Outcome {
    let hw = bundled_hardware("cpu1").unwrap();
    let truth = bundled_coefficients("cpu").unwrap();
    let started = Instant::now();

    let clean = synthetic_runs(&hw, &truth, &SynthConfig::default());
    let problem = FitProblem::from_runs(&clean, &hw, None, PlacementMode::WholeSet).unwrap();
    let result = match fit(&problem, &FitConfig::default()) {
        Ok(r) => r,
        Err(err) => return Outcome::Fail(format!("noise-free fit failed: {err}")),
    };
    let fitted = result.coefficients.to_vector();
    let names = truth.names();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for (j, (&got, &want)) in fitted.iter().zip(&truth.to_vector()).enumerate() {
        if result.unsupported.contains(&names[j]) {
            continue;
        }
        // a zero true coefficient is judged by its share of the predicted energy
        let err = if want > 0.0 {
            (got / want - 1.0).abs()
        } else {
            problem.rows.iter().zip(&problem.measured).map(|(r, e)| r.0[j] * got / e).fold(0.0, f64::max)
        };
        if err > worst {
            worst = err;
            worst_name = names[j].clone();
        }
    }

    let noisy = synthetic_runs(&hw, &truth, &SynthConfig { noise_sigma: 0.1, ..SynthConfig::default() });
    let problem = FitProblem::from_runs(&noisy, &hw, None, PlacementMode::WholeSet).unwrap();
    let noisy_error = match fit(&problem, &FitConfig::default()) {
        Ok(r) => ErrorStats::evaluate(&r.coefficients, &problem.rows, &problem.measured).mean_abs_rel_error,
        Err(err) => return Outcome::Fail(format!("noisy fit failed: {err}")),
    };
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-3 && (0.08..=0.12).contains(&noisy_error) && secs < 30.0,
        format!(
            "noise-free worst {worst:.2e} ({worst_name}), unsupported {:?}; σ=0.1 mean |Ê/E−1| {:.2}%; {secs:.1} s",
            result.unsupported,
            100.0 * noisy_error
        ),
    )
}

fn integration_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=60);
        let mut t = rng.random_range(-1000.0..1000.0);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push((t, rng.random_range(0.0..2000.0)));
            t += rng.random_range(0.01..600.0);
        }
        // closed-form antiderivative of the piecewise-linear curve
        let antiderivative = |x: f64| -> f64 {
            let mut total = 0.0;
            for seg in points.windows(2) {
                let ((t0, w0), (t1, w1)) = (seg[0], seg[1]);
                if x <= t0 {
                    break;
                }
                let d = x.min(t1) - t0;
                total += w0 * d + 0.5 * (w1 - w0) / (t1 - t0) * d * d;
            }
            total
        };
        let (lo, hi) = (points[0].0, points[n - 1].0);
        let a = rng.random_range(lo..hi);
        let b = rng.random_range(a..=hi);
        let series = PowerSeries::from_points(points.clone());
        let got = integrate_energy(&series, a, b).unwrap_or(f64::NAN);
        let want = antiderivative(b) - antiderivative(a);
        let err = if want == 0.0 { got.abs() } else { rel(got, want) };
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    let constant = integrate_energy(&PowerSeries::from_points(vec![(0.0, 300.0), (600.0, 300.0)]), 0.0, 600.0);
    verdict(
        worst <= 1e-9 && constant == Some(180_000.0),
        format!("1000 traces, max relative difference {worst:.2e}; 300 W × 600 s = {constant:?} J"),
    )
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn filter_fixture() -> Outcome {
    let power: Vec<PowerSample> = formats::read_csv_file(&fixture("golden_power.csv")).unwrap();
    let jobs: Vec<JobRecord> = formats::read_csv_file(&fixture("golden_jobs.csv")).unwrap();
    let out = match ingest(&power, &jobs, &IngestConfig::new("cpu1")) {
        Ok(out) => out,
        Err(err) => return Outcome::Fail(format!("ingest failed: {err}")),
    };
    let f = &out.report.filters;
    let ok = (f.zero_w, f.missing_data, f.long_runtime, f.sigma_outlier) == (1, 1, 1, 1)
        && f.retained == f.input - 4
        && out.runs.iter().filter(|r| r.is_retained()).count() == f.retained;
    verdict(
        ok,
        format!(
            "zero_w {}, missing {}, long {}, sigma {}, retained {} of {}",
            f.zero_w, f.missing_data, f.long_runtime, f.sigma_outlier, f.retained, f.input
        ),
    )
}

fn standardization_fixture() -> Outcome {
    let direct = 468.0 * 3600.0 - standardize(468.0 * 3600.0, 388.0, 220.0, 3600.0);

    // the same through the pipeline, with idle power from the fixture's samples
    let power: Vec<PowerSample> = formats::read_csv_file(&fixture("golden_power.csv")).unwrap();
    let jobs: Vec<JobRecord> = formats::read_csv_file(&fixture("golden_jobs.csv")).unwrap();
    let out = ingest(&power, &jobs, &IngestConfig::new("cpu1")).unwrap();
    let c01 = out.runs.iter().find(|r| r.run_id == "c01").unwrap();
    let piped = c01.raw_energy_j - c01.standardized_energy_j.unwrap_or(f64::NAN);
    verdict(
        direct == 604_800.0 && piped == 604_800.0,
        format!(
            "cpu4 {} W → cpu1 {} W over 3600 s: subtracted {direct} J (pipeline {piped} J)",
            out.report.idle_power_w["cpu4"], out.report.idle_power_w["cpu1"]
        ),
    )
}

struct Sweep {
    variation_while_fits: f64,
    increasing_after_spill: bool,
    spill_ntp: Option<u64>,
}

fn sweep(hw: &HardwareSpec, coeffs: &EnergyCoefficients, task: &TaskSpec, depth: usize) -> Sweep {
    let l2 = hw.labels().iter().position(|l| l == "L2").unwrap();
    let mut seen = std::collections::BTreeSet::new();
    let (mut fits, mut spilled) = (Vec::new(), Vec::new());
    for p in 5..=25 {
        let Ok(arch) = solve_widths(ShapeFamily::Rectangle, depth, 1 << p, task) else { continue };
        let ntp = count_parameters(&arch);
        if !seen.insert(ntp) {
            continue;
        }
        let run = ModeledRun::new(&arch, task, hw);
        let e = energy_per_datum(task, &run, coeffs);
        if run.placement.f <= l2 {
            fits.push(e);
        } else {
            spilled.push((ntp, e));
        }
    }
    let lo = fits.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fits.iter().copied().fold(0.0, f64::max);
    Sweep {
        variation_while_fits: hi / lo - 1.0,
        increasing_after_spill: spilled.len() >= 2 && spilled.windows(2).all(|w| w[1].1 > w[0].1),
        spill_ntp: spilled.first().map(|s| s.0),
    }
}

fn cache_cliff() -> Outcome {
    let hw = bundled_hardware("gpu1").unwrap();
    let coeffs = bundled_coefficients("gpu").unwrap();
    let mnist = TaskSpec::new(784, 10, 60_000, 10_000);
    let s = sweep(&hw, &coeffs, &mnist, 3);

    // context: the same sweep over other tasks and depths
    let mut panel = Vec::new();
    for (name, task) in [
        ("784/10", mnist.clone()),
        ("100/10", TaskSpec::new(100, 10, 10_000, 2_000)),
        ("16/2", TaskSpec::new(16, 2, 5_000, 1_000)),
    ] {
        for depth in [2, 4, 6, 8] {
            let p = sweep(&hw, &coeffs, &task, depth);
            panel.push(format!(
                "{name} d{depth}: {:.1}%{}",
                100.0 * p.variation_while_fits,
                if p.increasing_after_spill { "" } else { " (not increasing)" }
            ));
        }
    }
    println!("      sweep panel: {}", panel.join(", "));

    verdict(
        s.variation_while_fits < 0.10 && s.increasing_after_spill,
        format!(
            "784→10 task, depth 3: variation {:.1}% while f fits in L2, f spills at NTP {}, {}",
            100.0 * s.variation_while_fits,
            s.spill_ntp.map_or("never".to_string(), |n| n.to_string()),
            if s.increasing_after_spill { "strictly increasing after" } else { "NOT strictly increasing after" }
        ),
    )
}

fn dataset_replay() -> Outcome {
    let (Ok(power_path), Ok(jobs_path)) = (std::env::var("MLP_ENERGY_POWER"), std::env::var("MLP_ENERGY_JOBS")) else {
        return Outcome::Skip("MLP_ENERGY_POWER / MLP_ENERGY_JOBS not set".into());
    };
    let reference = std::env::var("MLP_ENERGY_REFERENCE_NODE").unwrap_or_else(|_| "cpu1".into());
    let power: Vec<PowerSample> = match formats::read_csv_file(Path::new(&power_path)) {
        Ok(p) => p,
        Err(err) => return Outcome::Fail(err.to_string()),
    };
    let jobs: Vec<JobRecord> = match formats::read_csv_file(Path::new(&jobs_path)) {
        Ok(j) => j,
        Err(err) => return Outcome::Fail(err.to_string()),
    };
    let out = match ingest(&power, &jobs, &IngestConfig::new(&reference)) {
        Ok(out) => out,
        Err(err) => return Outcome::Fail(format!("ingest failed: {err}")),
    };
    let f = &out.report.filters;
    let counts_ok = f.long_runtime == 163 && f.sigma_outlier == 78 && f.dropped() == 241;
    let mut detail = format!(
        "long {}, sigma {}, rejected {} (zero_w {}, missing {})",
        f.long_runtime,
        f.sigma_outlier,
        f.dropped(),
        f.zero_w,
        f.missing_data
    );

    let catalog = match std::env::var("MLP_ENERGY_DATASETS") {
        Ok(path) => match formats::read_csv_file::<DatasetEntry>(Path::new(&path)) {
            Ok(entries) => Some(DatasetCatalog::from_entries(entries)),
            Err(err) => return Outcome::Fail(err.to_string()),
        },
        Err(_) => None,
    };
    let mut errors: BTreeMap<&str, f64> = BTreeMap::new();
    for (hw_name, limit) in [("gpu1", 0.06), ("cpu1", 0.30)] {
        let hw = bundled_hardware(hw_name).unwrap();
        let runs: Vec<RunRecord> = out.runs.clone();
        let problem = match FitProblem::from_runs(&runs, &hw, catalog.as_ref(), PlacementMode::WholeSet) {
            Ok(p) => p,
            Err(err) => return Outcome::Fail(format!("{detail}; {hw_name} rows: {err}")),
        };
        match fit(&problem, &FitConfig::default()) {
            Ok(r) => {
                errors.insert(hw_name, r.errors.mean_abs_rel_error);
                detail += &format!(
                    "; {hw_name} refit {:.2}% (limit {:.0}%)",
                    100.0 * r.errors.mean_abs_rel_error,
                    100.0 * limit
                );
            }
            Err(err) => return Outcome::Fail(format!("{detail}; {hw_name} fit: {err}")),
        }
    }
    verdict(counts_ok && errors["gpu1"] <= 0.06 && errors["cpu1"] <= 0.30, detail)
}

#[test]
fn acceptance() {
    let checks: [(&str, Check); 10] = [
        ("parameter-count oracle", parameter_count_oracle),
        ("placement ordering", placement_ordering),
        ("design-matrix identity", design_matrix_identity),
        ("linearity in training-set size", linearity),
        ("coefficient recovery", coefficient_recovery),
        ("integration oracle", integration_oracle),
        ("filter fixture", filter_fixture),
        ("standardization fixture", standardization_fixture),
        ("cache cliff", cache_cliff),
        ("dataset replay", dataset_replay),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let (tag, detail) = match check() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed.push(i + 1);
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{:>2}] {name}: {detail}", i + 1);
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
