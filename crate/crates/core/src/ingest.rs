//! Power telemetry and scheduler records to per-run energy.
//!
//! Node power is sampled at coarse intervals. A run's energy is the integral
//! of each of its nodes' piecewise-linear power curve over the run window,
//! summed across nodes. Runs then pass through data-quality filters, and
//! retained runs are standardized to a reference node type by removing the
//! difference in idle draw.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::RunRecord;
use crate::worksets::HardwareClass;

pub const MAX_RUNTIME_S: f64 = 75_000.0;
pub const SIGMA_LIMIT: f64 = 4.0;
pub const IDLE_QUANTILE: f64 = 0.02;
pub const OVERHEAD_QUANTILE: f64 = 0.05;
pub const MIN_IDLE_SAMPLES: usize = 50;
pub const REFERENCE_MAX_NTP: u64 = 1 << 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("power sample {row}: {reason}")]
    InvalidSample { row: usize, reason: String },
    #[error("job row {row} (run {run_id}): {reason}")]
    InvalidJob { row: usize, run_id: String, reason: String },
    #[error("run {run_id}: job rows disagree on {field}")]
    InconsistentRun { run_id: String, field: &'static str },
    #[error(
        "node type `{node_type}` has {got} power samples, need at least {needed} (or pass an idle-power override)"
    )]
    InsufficientSamples { node_type: String, got: usize, needed: usize },
    #[error("no reference runs for {class} overhead estimation")]
    NoReferenceRuns { class: HardwareClass },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub node_id: String,
    pub timestamp_s: f64,
    pub watts: f64,
}

/// One node's share of a run; a run on several nodes has one row per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub run_id: String,
    pub node_id: String,
    pub node_type: String,
    pub start_s: f64,
    pub end_s: f64,
    pub dataset: String,
    pub shape: String,
    pub depth: usize,
    pub ntp: u64,
    pub hardware_class: HardwareClass,
    pub epochs: u64,
    pub train_batches: u64,
    pub test_batches: u64,
}

/// A node's power curve: strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PowerSeries {
    pub times: Vec<f64>,
    pub watts: Vec<f64>,
}

impl PowerSeries {
    /// Sorts by time; of samples sharing a timestamp the last one wins.
    pub fn from_points(mut points: Vec<(f64, f64)>) -> Self {
        points.reverse();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        points.dedup_by(|later, earlier| later.0 == earlier.0);
        let (times, watts) = points.into_iter().unzip();
        PowerSeries { times, watts }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Linear interpolation, clamped to the end values outside the series.
    pub fn power_at(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.watts[0];
        }
        if t >= self.times[n - 1] {
            return self.watts[n - 1];
        }
        let hi = self.times.partition_point(|&x| x <= t);
        let lo = hi - 1;
        let (t0, t1) = (self.times[lo], self.times[hi]);
        let (p0, p1) = (self.watts[lo], self.watts[hi]);
        p0 + (p1 - p0) * (t - t0) / (t1 - t0)
    }

    /// Indices of samples that shape the curve over `[start, end]`: those
    /// inside the window plus the bracketing neighbours.
    fn contributing(&self, start: f64, end: f64) -> std::ops::Range<usize> {
        let first = self.times.partition_point(|&x| x <= start).saturating_sub(1);
        let last = self.times.partition_point(|&x| x < end).min(self.times.len() - 1);
        first..last + 1
    }

    fn overlaps(&self, start: f64, end: f64) -> bool {
        !self.is_empty() && start.max(self.times[0]) <= end.min(self.times[self.len() - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowEnergy {
    pub energy_j: f64,
    /// A 0 W reading shapes the curve inside the window.
    pub zero_w: bool,
}

/// Energy over `[start, end]` and whether a 0 W reading was involved.
/// `None` when the window does not overlap the series.
pub fn integrate_window(series: &PowerSeries, start: f64, end: f64) -> Option<WindowEnergy> {
    if !series.overlaps(start, end) {
        return None;
    }
    let range = series.contributing(start, end);
    let zero_w = series.watts[range.clone()].contains(&0.0);
    let mut knots = vec![start];
    knots.extend(series.times[range].iter().copied().filter(|&t| t > start && t < end));
    knots.push(end);
    let energy_j =
        knots.windows(2).map(|k| 0.5 * (series.power_at(k[0]) + series.power_at(k[1])) * (k[1] - k[0])).sum();
    Some(WindowEnergy { energy_j, zero_w })
}

/// Trapezoidal energy of the piecewise-linear power curve over `[start, end]`.
pub fn integrate_energy(series: &PowerSeries, start: f64, end: f64) -> Option<f64> {
    integrate_window(series, start, end).map(|w| w.energy_j)
}

/// Lower nearest-rank quantile of sorted data: element `ceil(q·N) − 1`.
pub fn lower_quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64 - 1e-9).ceil() as usize;
    Some(sorted[rank.saturating_sub(1).min(sorted.len() - 1)])
}

fn sorted(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    values
}

/// Why a run was dropped or flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Flag {
    ZeroW,
    MissingData,
    LongRuntime,
    SigmaOutlier,
    /// Kept, but standardization produced a negative energy.
    NegativeEnergy,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::ZeroW => "zero_w",
            Flag::MissingData => "missing_data",
            Flag::LongRuntime => "long_runtime",
            Flag::SigmaOutlier => "sigma_outlier",
            Flag::NegativeEnergy => "negative_energy",
        }
    }

    pub fn drops(self) -> bool {
        self != Flag::NegativeEnergy
    }
}

/// A run after integration, before standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredRun {
    pub job: JobRecord,
    /// `(node_type, node runtime s)` for every node row of the run.
    pub nodes: Vec<(String, f64)>,
    pub runtime_s: f64,
    /// NaN when any node's window had no power data.
    pub raw_energy_j: f64,
    pub zero_w: bool,
    pub missing: bool,
    pub standardized_energy_j: Option<f64>,
    pub flags: Vec<Flag>,
}

impl MeasuredRun {
    pub fn is_retained(&self) -> bool {
        self.flags.iter().all(|f| !f.drops())
    }

    fn group(&self) -> (String, u64, HardwareClass) {
        (self.job.dataset.clone(), self.job.ntp, self.job.hardware_class)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub input: usize,
    pub zero_w: usize,
    pub missing_data: usize,
    pub long_runtime: usize,
    pub sigma_outlier: usize,
    pub retained: usize,
    pub negative_energy: usize,
    /// σ-filter groups with fewer than two runs, as `dataset/ntp/class`.
    pub sigma_skipped_groups: Vec<String>,
}

impl FilterReport {
    pub fn dropped(&self) -> usize {
        self.zero_w + self.missing_data + self.long_runtime + self.sigma_outlier
    }
}

/// Groups node rows into runs and integrates each node's window.
pub fn measure_runs(power: &[PowerSample], jobs: &[JobRecord]) -> Result<Vec<MeasuredRun>, IngestError> {
    for (i, s) in power.iter().enumerate() {
        if !(s.watts.is_finite() && s.watts >= 0.0) {
            return Err(IngestError::InvalidSample {
                row: i + 1, reason: format!("power {} W must be ≥ 0", s.watts)
            });
        }
        if !s.timestamp_s.is_finite() {
            return Err(IngestError::InvalidSample { row: i + 1, reason: "timestamp is not finite".into() });
        }
    }
    let series = node_series(power);

    let mut by_run: BTreeMap<&str, Vec<(usize, &JobRecord)>> = BTreeMap::new();
    for (i, job) in jobs.iter().enumerate() {
        if !(job.start_s.is_finite() && job.end_s.is_finite() && job.end_s > job.start_s) {
            return Err(IngestError::InvalidJob {
                row: i + 1,
                run_id: job.run_id.clone(),
                reason: format!("end {} must be after start {}", job.end_s, job.start_s),
            });
        }
        by_run.entry(&job.run_id).or_default().push((i, job));
    }

    let empty = PowerSeries::default();
    let mut runs = Vec::with_capacity(by_run.len());
    for (run_id, rows) in by_run {
        let first = rows[0].1;
        for (_, row) in &rows[1..] {
            check_consistent(first, row)
                .map_err(|field| IngestError::InconsistentRun { run_id: run_id.into(), field })?;
        }
        let mut energy = 0.0;
        let mut zero_w = false;
        let mut missing = false;
        let mut nodes = Vec::with_capacity(rows.len());
        for (_, row) in &rows {
            let s = series.get(row.node_id.as_str()).unwrap_or(&empty);
            match integrate_window(s, row.start_s, row.end_s) {
                Some(w) => {
                    energy += w.energy_j;
                    zero_w |= w.zero_w;
                }
                None => missing = true,
            }
            nodes.push((row.node_type.clone(), row.end_s - row.start_s));
        }
        let start = rows.iter().map(|(_, r)| r.start_s).fold(f64::INFINITY, f64::min);
        let end = rows.iter().map(|(_, r)| r.end_s).fold(f64::NEG_INFINITY, f64::max);
        runs.push(MeasuredRun {
            job: first.clone(),
            nodes,
            runtime_s: end - start,
            raw_energy_j: if missing { f64::NAN } else { energy },
            zero_w,
            missing,
            standardized_energy_j: None,
            flags: Vec::new(),
        });
    }
    Ok(runs)
}

fn check_consistent(a: &JobRecord, b: &JobRecord) -> Result<(), &'static str> {
    let fields: [(&'static str, bool); 8] = [
        ("dataset", a.dataset == b.dataset),
        ("shape", a.shape == b.shape),
        ("depth", a.depth == b.depth),
        ("ntp", a.ntp == b.ntp),
        ("hardware_class", a.hardware_class == b.hardware_class),
        ("epochs", a.epochs == b.epochs),
        ("train_batches", a.train_batches == b.train_batches),
        ("test_batches", a.test_batches == b.test_batches),
    ];
    match fields.iter().find(|(_, same)| !same) {
        Some((name, _)) => Err(name),
        None => Ok(()),
    }
}

fn node_series(power: &[PowerSample]) -> BTreeMap<&str, PowerSeries> {
    let mut points: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for s in power {
        points.entry(&s.node_id).or_default().push((s.timestamp_s, s.watts));
    }
    points.into_iter().map(|(node, p)| (node, PowerSeries::from_points(p))).collect()
}

/// Flags dropped runs in order: 0 W readings, missing data, runtime over
/// `max_runtime_s`, then log-runtime outliers beyond `sigma_limit` sample
/// standard deviations within each (dataset, NTP, hardware class) group.
/// A run is counted under the first filter it fails.
pub fn apply_filters(runs: &mut [MeasuredRun], max_runtime_s: f64, sigma_limit: f64) -> FilterReport {
    let mut report = FilterReport { input: runs.len(), ..FilterReport::default() };
    for run in runs.iter_mut() {
        let flag = if run.zero_w {
            Some(Flag::ZeroW)
        } else if run.missing {
            Some(Flag::MissingData)
        } else if run.runtime_s > max_runtime_s {
            Some(Flag::LongRuntime)
        } else {
            None
        };
        if let Some(flag) = flag {
            run.flags.push(flag);
        }
    }

    let mut groups: BTreeMap<(String, u64, HardwareClass), Vec<usize>> = BTreeMap::new();
    for (i, run) in runs.iter().enumerate() {
        if run.is_retained() {
            groups.entry(run.group()).or_default().push(i);
        }
    }
    for ((dataset, ntp, class), members) in groups {
        if members.len() < 2 {
            report.sigma_skipped_groups.push(format!("{dataset}/{ntp}/{class}"));
            continue;
        }
        let logs: Vec<f64> = members.iter().map(|&i| runs[i].runtime_s.ln()).collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        for (&i, l) in members.iter().zip(&logs) {
            if (l - mean).abs() > sigma_limit * sd {
                runs[i].flags.push(Flag::SigmaOutlier);
            }
        }
    }

    for run in runs.iter() {
        match run.flags.first() {
            Some(Flag::ZeroW) => report.zero_w += 1,
            Some(Flag::MissingData) => report.missing_data += 1,
            Some(Flag::LongRuntime) => report.long_runtime += 1,
            Some(Flag::SigmaOutlier) => report.sigma_outlier += 1,
            _ => report.retained += 1,
        }
    }
    report
}

/// 2 % lower-nearest-rank quantile of each node type's power readings.
/// 0 W readings are telemetry faults and are left out.
pub fn idle_power(power: &[PowerSample], node_types: &BTreeMap<String, String>) -> BTreeMap<String, Vec<f64>> {
    let mut by_type: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in power.iter().filter(|s| s.watts > 0.0) {
        if let Some(node_type) = node_types.get(&s.node_id) {
            by_type.entry(node_type.clone()).or_default().push(s.watts);
        }
    }
    by_type.into_iter().map(|(t, w)| (t, sorted(w))).collect()
}

/// Idle power for one node type from its sorted readings.
pub fn idle_from_samples(node_type: &str, sorted_watts: &[f64]) -> Result<f64, IngestError> {
    if sorted_watts.len() < MIN_IDLE_SAMPLES {
        return Err(IngestError::InsufficientSamples {
            node_type: node_type.into(),
            got: sorted_watts.len(),
            needed: MIN_IDLE_SAMPLES,
        });
    }
    Ok(lower_quantile(sorted_watts, IDLE_QUANTILE).expect("nonempty"))
}

/// Removes the idle-draw difference between each node and the reference.
pub fn standardize(raw_energy_j: f64, node_idle_w: f64, reference_idle_w: f64, runtime_s: f64) -> f64 {
    raw_energy_j - (node_idle_w - reference_idle_w) * runtime_s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overheads {
    pub energy_j: f64,
    pub runtime_s: f64,
}

/// Independent `q`-quantiles of standardized energy and runtime over the
/// reference runs, given as `(standardized energy, runtime)`.
pub fn estimate_overheads(reference: &[(f64, f64)], q: f64) -> Option<Overheads> {
    let energy = sorted(reference.iter().map(|r| r.0).collect());
    let runtime = sorted(reference.iter().map(|r| r.1).collect());
    Some(Overheads { energy_j: lower_quantile(&energy, q)?, runtime_s: lower_quantile(&runtime, q)? })
}

/// Which runs define the per-experiment overhead.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSubset {
    /// Defaults to the dataset with the fewest batches per epoch.
    pub dataset: Option<String>,
    pub max_ntp: u64,
}

impl Default for ReferenceSubset {
    fn default() -> Self {
        ReferenceSubset { dataset: None, max_ntp: REFERENCE_MAX_NTP }
    }
}

impl ReferenceSubset {
    fn dataset_for<'a>(&'a self, runs: &'a [MeasuredRun]) -> Option<&'a str> {
        if let Some(d) = &self.dataset {
            return Some(d);
        }
        runs.iter().map(|r| (r.job.train_batches + r.job.test_batches, r.job.dataset.as_str())).min().map(|(_, d)| d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub reference_node_type: String,
    pub subtract_overheads: bool,
    /// Idle power by node type, replacing the estimate from samples.
    pub idle_overrides: BTreeMap<String, f64>,
    pub reference: ReferenceSubset,
    pub max_runtime_s: f64,
    pub sigma_limit: f64,
}

impl IngestConfig {
    pub fn new(reference_node_type: &str) -> Self {
        IngestConfig {
            reference_node_type: reference_node_type.into(),
            subtract_overheads: false,
            idle_overrides: BTreeMap::new(),
            reference: ReferenceSubset::default(),
            max_runtime_s: MAX_RUNTIME_S,
            sigma_limit: SIGMA_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub filters: FilterReport,
    pub idle_power_w: BTreeMap<String, f64>,
    pub overheads: BTreeMap<HardwareClass, Overheads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutput {
    /// Every input run, sorted by run id, dropped runs included with their flag.
    pub runs: Vec<RunRecord>,
    pub report: IngestReport,
}

pub fn ingest(power: &[PowerSample], jobs: &[JobRecord], config: &IngestConfig) -> Result<IngestOutput, IngestError> {
    let mut runs = measure_runs(power, jobs)?;
    let filters = apply_filters(&mut runs, config.max_runtime_s, config.sigma_limit);

    let node_types: BTreeMap<String, String> = jobs.iter().map(|j| (j.node_id.clone(), j.node_type.clone())).collect();
    let samples = idle_power(power, &node_types);
    let mut needed: BTreeSet<&str> =
        runs.iter().filter(|r| r.is_retained()).flat_map(|r| r.nodes.iter().map(|(t, _)| t.as_str())).collect();
    if !runs.iter().any(|r| r.is_retained()) {
        needed.clear();
    } else {
        needed.insert(&config.reference_node_type);
    }
    let mut idle_power_w = BTreeMap::new();
    for node_type in needed {
        let watts = match config.idle_overrides.get(node_type) {
            Some(&w) => w,
            None => idle_from_samples(node_type, samples.get(node_type).map(Vec::as_slice).unwrap_or(&[]))?,
        };
        idle_power_w.insert(node_type.to_string(), watts);
    }

    for run in runs.iter_mut().filter(|r| r.is_retained()) {
        let reference = idle_power_w[&config.reference_node_type];
        let adjustment: f64 = run.nodes.iter().map(|(t, secs)| (idle_power_w[t] - reference) * secs).sum();
        let e = run.raw_energy_j - adjustment;
        run.standardized_energy_j = Some(e);
        if e < 0.0 {
            run.flags.push(Flag::NegativeEnergy);
        }
    }
    let filters = FilterReport {
        negative_energy: runs.iter().filter(|r| r.flags.contains(&Flag::NegativeEnergy)).count(),
        ..filters
    };

    let mut overheads = BTreeMap::new();
    if config.subtract_overheads {
        for class in [HardwareClass::Cpu, HardwareClass::Gpu] {
            let retained: Vec<MeasuredRun> =
                runs.iter().filter(|r| r.is_retained() && r.job.hardware_class == class).cloned().collect();
            if retained.is_empty() {
                continue;
            }
            let dataset = config.reference.dataset_for(&retained).map(str::to_owned);
            let reference: Vec<(f64, f64)> = retained
                .iter()
                .filter(|r| Some(r.job.dataset.as_str()) == dataset.as_deref() && r.job.ntp <= config.reference.max_ntp)
                .map(|r| (r.standardized_energy_j.expect("retained runs are standardized"), r.runtime_s))
                .collect();
            let o = estimate_overheads(&reference, OVERHEAD_QUANTILE).ok_or(IngestError::NoReferenceRuns { class })?;
            overheads.insert(class, o);
        }
    }

    let records = runs
        .into_iter()
        .map(|r| {
            let analysis = r
                .standardized_energy_j
                .and_then(|e| overheads.get(&r.job.hardware_class).map(|o: &Overheads| e - o.energy_j));
            to_record(r, analysis)
        })
        .collect();
    Ok(IngestOutput { runs: records, report: IngestReport { filters, idle_power_w, overheads } })
}

fn to_record(run: MeasuredRun, analysis_energy_j: Option<f64>) -> RunRecord {
    let job = run.job;
    RunRecord {
        run_id: job.run_id,
        node_type: job.node_type,
        dataset: job.dataset,
        shape: job.shape,
        depth: job.depth,
        ntp: job.ntp,
        hardware_class: job.hardware_class,
        epochs: job.epochs,
        train_batches: job.train_batches,
        test_batches: job.test_batches,
        runtime_s: run.runtime_s,
        raw_energy_j: run.raw_energy_j,
        standardized_energy_j: run.standardized_energy_j,
        analysis_energy_j,
        flags: run.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(";"),
        n_features: None,
        n_outputs: None,
        n_train: None,
        n_test: None,
        batch_size: None,
        dtype_bytes: None,
    }
}
