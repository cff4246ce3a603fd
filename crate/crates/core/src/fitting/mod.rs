//! Fitting energy coefficients to measured runs.
//!
//! Measured energies span several orders of magnitude, so the fit minimizes
//! the squared log ratio `Σ (log(row_i·k) − log E_i)²` rather than the
//! absolute error, subject to `k ≥ 0`.
//!
//! The solver works on a rescaled problem: every design column is divided by
//! its maximum and the energies by their geometric mean. A non-negative
//! linear fit of the relative error gives the starting point, and projected
//! Gauss–Newton steps (each one a small NNLS problem on the linearized log
//! residuals) with an Armijo backtracking line search do the rest.

mod nnls;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::energy_model::{build_design_row, DesignRow, EnergyCoefficients, ModeledRun};
use crate::formats::{DatasetCatalog, RunRecord};
use crate::worksets::{HardwareSpec, PlacementMode};

pub use nnls::nnls;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("no runs to fit")]
    Empty,
    #[error("{rows} design rows but {measured} measurements")]
    LengthMismatch { rows: usize, measured: usize },
    #[error("design row {index} has {got} entries, expected {expected}")]
    RowLength { index: usize, got: usize, expected: usize },
    #[error("run {id}: design row has a negative or non-finite entry")]
    InvalidRow { id: String },
    #[error("run {id}: invalid measurement {value} J (must be finite and positive)")]
    InvalidMeasurement { id: String, value: f64 },
    #[error("run {id}: design row is zero on every coefficient, so no k ≥ 0 can predict it")]
    DegenerateRow { id: String },
    #[error("{0}")]
    Run(String),
    #[error("design is rank-deficient after scaling; cannot separate {}", names.join(", "))]
    RankDeficient { names: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    /// Memory level labels the `a`/`m` columns refer to.
    pub levels: Vec<String>,
    pub rows: Vec<DesignRow>,
    /// Measured experiment energy, J.
    pub measured: Vec<f64>,
    /// Run identifiers for error messages; row indices are used when absent.
    pub ids: Vec<String>,
}

impl FitProblem {
    pub fn new(levels: Vec<String>, rows: Vec<DesignRow>, measured: Vec<f64>) -> Self {
        let ids = (0..rows.len()).map(|i| format!("#{i}")).collect();
        FitProblem { levels, rows, measured, ids }
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Self {
        self.ids = ids;
        self
    }

    /// Builds design rows for retained runs of the hardware's class. The
    /// measurement is the analysis energy when present, else the
    /// standardized energy, else the raw energy.
    pub fn from_runs(
        runs: &[RunRecord],
        hw: &HardwareSpec,
        catalog: Option<&DatasetCatalog>,
        mode: PlacementMode,
    ) -> Result<Self, FitError> {
        let mut rows = Vec::new();
        let mut measured = Vec::new();
        let mut ids = Vec::new();
        for run in runs.iter().filter(|r| r.is_retained() && r.hardware_class == hw.class) {
            let task = run.task(catalog).map_err(FitError::Run)?;
            let arch = run.architecture(&task).map_err(FitError::Run)?;
            let modeled = ModeledRun::with_mode(&arch, &task, hw, mode);
            rows.push(build_design_row(run.counts(), &modeled, hw.levels.len()));
            measured.push(run.analysis_energy_j.or(run.standardized_energy_j).unwrap_or(run.raw_energy_j));
            ids.push(run.run_id.clone());
        }
        Ok(FitProblem { levels: hw.labels(), rows, measured, ids })
    }

    fn id(&self, i: usize) -> String {
        self.ids.get(i).cloned().unwrap_or_else(|| format!("#{i}"))
    }

    fn validate(&self) -> Result<(), FitError> {
        if self.rows.is_empty() {
            return Err(FitError::Empty);
        }
        if self.rows.len() != self.measured.len() {
            return Err(FitError::LengthMismatch { rows: self.rows.len(), measured: self.measured.len() });
        }
        let expected = EnergyCoefficients::len_for(self.levels.len());
        for (i, row) in self.rows.iter().enumerate() {
            if row.0.len() != expected {
                return Err(FitError::RowLength { index: i, got: row.0.len(), expected });
            }
            if row.0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(FitError::InvalidRow { id: self.id(i) });
            }
            if row.0.iter().all(|&v| v == 0.0) {
                return Err(FitError::DegenerateRow { id: self.id(i) });
            }
        }
        for (i, &e) in self.measured.iter().enumerate() {
            if !(e.is_finite() && e > 0.0) {
                return Err(FitError::InvalidMeasurement { id: self.id(i), value: e });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    /// Projected Gauss–Newton; the default.
    GaussNewton,
    /// Plain projected gradient descent with backtracking.
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Stop once the projected gradient norm (scaled problem) is at most this.
    pub tol: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Starting points: the warm start plus `starts − 1` random perturbations of it.
    pub starts: usize,
    pub method: FitMethod,
    /// Fit anyway when columns are linearly dependent; the optimum is then not unique.
    pub allow_rank_deficient: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tol: 1e-8,
            max_iterations: 500,
            seed: 0,
            starts: 1,
            method: FitMethod::GaussNewton,
            allow_rank_deficient: false,
        }
    }
}

/// Agreement between predictions and measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    /// mean |Ê/E − 1|
    pub mean_abs_rel_error: f64,
    /// sqrt(mean log²(Ê/E))
    pub rms_log_ratio: f64,
    /// mean log(Ê/E)
    pub mean_log_ratio: f64,
}

impl ErrorStats {
    pub fn compute(predicted: &[f64], measured: &[f64]) -> Self {
        let n = predicted.len().max(1) as f64;
        let (mut abs, mut sq, mut sum) = (0.0, 0.0, 0.0);
        for (&p, &e) in predicted.iter().zip(measured) {
            let ratio = p / e;
            let l = ratio.ln();
            abs += (ratio - 1.0).abs();
            sq += l * l;
            sum += l;
        }
        ErrorStats { mean_abs_rel_error: abs / n, rms_log_ratio: (sq / n).sqrt(), mean_log_ratio: sum / n }
    }

    pub fn evaluate(coeffs: &EnergyCoefficients, rows: &[DesignRow], measured: &[f64]) -> Self {
        let predicted: Vec<f64> = rows.iter().map(|r| r.predict(coeffs)).collect();
        Self::compute(&predicted, measured)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: EnergyCoefficients,
    pub errors: ErrorStats,
    pub iterations: usize,
    pub converged: bool,
    pub projected_gradient_norm: f64,
    /// Objective after the starting point and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Coefficients whose column is zero in every row; pinned at 0.
    pub unsupported: Vec<String>,
}

impl FitResult {
    pub fn mean_abs_rel_error(&self) -> f64 {
        self.errors.mean_abs_rel_error
    }

    pub fn rms_log_ratio(&self) -> f64 {
        self.errors.rms_log_ratio
    }
}

/// The scaled problem the optimizer sees.
struct Scaled {
    x: DMatrix<f64>,
    log_y: DVector<f64>,
}

impl Scaled {
    fn predictions(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.x * z
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let pred = self.predictions(z);
        if pred.iter().any(|&p| p.is_nan() || p <= 0.0) {
            return f64::INFINITY;
        }
        pred.iter().zip(self.log_y.iter()).map(|(p, ly)| (p.ln() - ly).powi(2)).sum()
    }

    /// Residuals, Jacobian of the log predictions, and gradient.
    fn linearize(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let pred = self.predictions(z);
        let r = DVector::from_iterator(pred.len(), pred.iter().zip(self.log_y.iter()).map(|(p, ly)| p.ln() - ly));
        let mut jac = self.x.clone();
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row /= pred[i];
        }
        let grad = 2.0 * jac.tr_mul(&r);
        (r, jac, grad)
    }
}

fn projected_gradient_norm(z: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    z.iter()
        .zip(grad.iter())
        .map(|(&zj, &gj)| if zj > 0.0 { gj } else { gj.min(0.0) })
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

struct Run {
    z: DVector<f64>,
    iterations: usize,
    converged: bool,
    pg_norm: f64,
    trace: Vec<f64>,
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;
const STEP_TOL: f64 = 1e-13;
const WARM_START_FLOOR: f64 = 1e-12;

fn gauss_newton(problem: &Scaled, start: DVector<f64>, config: &FitConfig) -> Run {
    let mut z = start;
    let mut f = problem.objective(&z);
    let mut trace = vec![f];
    let mut pg_norm = f64::INFINITY;
    for iteration in 0..config.max_iterations {
        let (r, jac, grad) = problem.linearize(&z);
        pg_norm = projected_gradient_norm(&z, &grad);
        if pg_norm <= config.tol {
            return Run { z, iterations: iteration, converged: true, pg_norm, trace };
        }
        let target = &jac * &z - &r;
        let mut direction = nnls(&jac, &target) - &z;
        let mut slope = grad.dot(&direction);
        if slope.is_nan() || slope >= 0.0 {
            direction = (&z - &grad).map(|v| v.max(0.0)) - &z;
            slope = grad.dot(&direction);
        }
        match backtrack(problem, &z, f, &direction, slope) {
            Some((next, f_next)) => {
                let moved = (&next - &z).norm();
                z = next;
                f = f_next;
                trace.push(f);
                if moved <= STEP_TOL * (1.0 + z.norm()) {
                    // the step is below floating-point resolution: stationary
                    return Run { z, iterations: iteration + 1, converged: true, pg_norm, trace };
                }
            }
            None => {
                return Run { z, iterations: iteration, converged: false, pg_norm, trace };
            }
        }
    }
    let (_, _, grad) = problem.linearize(&z);
    let pg_final = projected_gradient_norm(&z, &grad);
    if pg_final.is_finite() {
        pg_norm = pg_final;
    }
    Run { z, iterations: config.max_iterations, converged: pg_norm <= config.tol, pg_norm, trace }
}

/// Armijo backtracking along a feasible direction.
fn backtrack(
    problem: &Scaled,
    z: &DVector<f64>,
    f: f64,
    direction: &DVector<f64>,
    slope: f64,
) -> Option<(DVector<f64>, f64)> {
    let mut alpha = 1.0;
    while alpha >= MIN_STEP {
        let candidate = (z + alpha * direction).map(|v| v.max(0.0));
        let f_candidate = problem.objective(&candidate);
        if f_candidate <= f + ARMIJO * alpha * slope {
            return Some((candidate, f_candidate));
        }
        alpha *= 0.5;
    }
    None
}

fn projected_gradient(problem: &Scaled, start: DVector<f64>, config: &FitConfig) -> Run {
    let mut z = start;
    let mut f = problem.objective(&z);
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut pg_norm = f64::INFINITY;
    for iteration in 0..config.max_iterations {
        let (_, _, grad) = problem.linearize(&z);
        pg_norm = projected_gradient_norm(&z, &grad);
        if pg_norm <= config.tol {
            return Run { z, iterations: iteration, converged: true, pg_norm, trace };
        }
        let mut accepted = None;
        while step >= MIN_STEP {
            let candidate = (&z - step * &grad).map(|v| v.max(0.0));
            let f_candidate = problem.objective(&candidate);
            let decrease = grad.dot(&(&candidate - &z));
            if f_candidate <= f + ARMIJO * decrease {
                accepted = Some((candidate, f_candidate));
                break;
            }
            step *= 0.5;
        }
        let Some((next, f_next)) = accepted else {
            return Run { z, iterations: iteration, converged: false, pg_norm, trace };
        };
        z = next;
        f = f_next;
        trace.push(f);
        step *= 2.0;
    }
    Run { z, iterations: config.max_iterations, converged: false, pg_norm, trace }
}

/// Columns taking part in the smallest singular direction, if it is numerically null.
fn dependent_columns(x: &DMatrix<f64>) -> Option<Vec<usize>> {
    let (rows, cols) = x.shape();
    if rows < cols {
        return Some((0..cols).collect());
    }
    let svd = x.clone().svd(false, true);
    let sv = &svd.singular_values;
    let (imin, &smin) = sv.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    if smin > 1e-10 * sv.max() {
        return None;
    }
    let v_t = svd.v_t.as_ref()?;
    let null = v_t.row(imin);
    let big = null.amax();
    Some((0..cols).filter(|&j| null[j].abs() >= 0.1 * big).collect())
}

pub fn fit(problem: &FitProblem, config: &FitConfig) -> Result<FitResult, FitError> {
    problem.validate()?;
    let p = EnergyCoefficients::len_for(problem.levels.len());
    let names = EnergyCoefficients::names_for(&problem.levels);
    let n = problem.rows.len();

    let scale: Vec<f64> = (0..p).map(|j| problem.rows.iter().map(|r| r.0[j]).fold(0.0, f64::max)).collect();
    let free: Vec<usize> = (0..p).filter(|&j| scale[j] > 0.0).collect();
    let unsupported = (0..p).filter(|&j| scale[j] == 0.0).map(|j| names[j].clone()).collect();

    let log_mean = problem.measured.iter().map(|e| e.ln()).sum::<f64>() / n as f64;
    let geo = log_mean.exp();
    let x = DMatrix::from_fn(n, free.len(), |i, c| problem.rows[i].0[free[c]] / scale[free[c]]);
    let log_y = DVector::from_iterator(n, problem.measured.iter().map(|e| e.ln() - log_mean));

    if !config.allow_rank_deficient {
        if let Some(cols) = dependent_columns(&x) {
            return Err(FitError::RankDeficient { names: cols.iter().map(|&c| names[free[c]].clone()).collect() });
        }
    }

    // Warm start: non-negative fit of the relative error, Σ (x_i·z / y_i − 1)².
    let y: Vec<f64> = log_y.iter().map(|l| l.exp()).collect();
    let relative = DMatrix::from_fn(n, free.len(), |i, c| x[(i, c)] / y[i]);
    let warm = nnls(&relative, &DVector::repeat(n, 1.0)).map(|v| v.max(WARM_START_FLOOR));

    let scaled = Scaled { x, log_y };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let mut best: Option<Run> = None;
    for start in 0..config.starts.max(1) {
        let z0 = if start == 0 { warm.clone() } else { warm.map(|v| v * jitter.sample(&mut rng).exp()) };
        let run = match config.method {
            FitMethod::GaussNewton => gauss_newton(&scaled, z0, config),
            FitMethod::ProjectedGradient => projected_gradient(&scaled, z0, config),
        };
        let better = match &best {
            None => true,
            Some(b) => run.trace.last() < b.trace.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one start");

    let mut k = vec![0.0; p];
    for (c, &j) in free.iter().enumerate() {
        k[j] = run.z[c] * geo / scale[j];
    }
    let mut coefficients =
        EnergyCoefficients::from_vector(&problem.levels, &k).expect("optimizer keeps coefficients non-negative");
    coefficients.class = None;
    let errors = ErrorStats::evaluate(&coefficients, &problem.rows, &problem.measured);

    Ok(FitResult {
        coefficients,
        errors,
        iterations: run.iterations,
        converged: run.converged,
        projected_gradient_norm: run.pg_norm,
        objective_trace: run.trace,
        unsupported,
    })
}
