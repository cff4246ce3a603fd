//! File formats: hardware specs and coefficient sets (TOML), the run table
//! and dataset catalog (CSV), and the fixed-precision number format used by
//! every report.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{NetworkArchitecture, ShapeFamily, TaskSpec};
use crate::energy_model::{EnergyCoefficients, RunCounts};
use crate::worksets::{HardwareClass, HardwareSpec};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{source_name}: {message}")]
    Parse { source_name: String, message: String },
    #[error("{0}: no such file and no bundled entry with that name")]
    NotFound(String),
    #[error("{path}: {err}")]
    Io { path: String, err: std::io::Error },
}

impl FormatError {
    fn parse(source_name: &str, message: impl ToString) -> Self {
        FormatError::Parse { source_name: source_name.to_string(), message: message.to_string() }
    }
}

const CPU1: &str = include_str!("../data/cpu1.toml");
const CPU1_L1D32K: &str = include_str!("../data/cpu1-l1d32k.toml");
const GPU1: &str = include_str!("../data/gpu1.toml");
const COEFFS_CPU: &str = include_str!("../data/coeffs-cpu.toml");
const COEFFS_GPU: &str = include_str!("../data/coeffs-gpu.toml");

pub const BUNDLED_HARDWARE: [&str; 3] = ["cpu1", "cpu1-l1d32k", "gpu1"];
pub const BUNDLED_COEFFICIENTS: [&str; 2] = ["cpu", "gpu"];

pub fn bundled_hardware(name: &str) -> Option<HardwareSpec> {
    let text = match name {
        "cpu1" => CPU1,
        "cpu1-l1d32k" => CPU1_L1D32K,
        "gpu1" => GPU1,
        _ => return None,
    };
    Some(parse_hardware(text, name).expect("bundled hardware spec parses"))
}

pub fn bundled_coefficients(name: &str) -> Option<EnergyCoefficients> {
    let text = match name {
        "cpu" => COEFFS_CPU,
        "gpu" => COEFFS_GPU,
        _ => return None,
    };
    Some(parse_coefficients(text, name).expect("bundled coefficients parse"))
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|err| FormatError::Io { path: path.display().to_string(), err })
}

pub fn parse_hardware(text: &str, source_name: &str) -> Result<HardwareSpec, FormatError> {
    let hw: HardwareSpec = toml::from_str(text).map_err(|e| FormatError::parse(source_name, e))?;
    hw.validate().map_err(|e| FormatError::parse(source_name, e))?;
    Ok(hw)
}

pub fn emit_hardware(hw: &HardwareSpec) -> String {
    toml::to_string(hw).expect("hardware spec serializes")
}

/// A file path, or failing that the name of a bundled spec.
pub fn load_hardware(arg: &str) -> Result<HardwareSpec, FormatError> {
    let path = Path::new(arg);
    if path.exists() {
        parse_hardware(&read_text(path)?, arg)
    } else {
        bundled_hardware(arg).ok_or_else(|| FormatError::NotFound(arg.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<HardwareClass>,
    k_e: f64,
    k_p: f64,
    k_o: f64,
    k_d: f64,
    levels: Vec<LevelCoefficients>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelCoefficients {
    label: String,
    a: f64,
    m: f64,
}

pub fn parse_coefficients(text: &str, source_name: &str) -> Result<EnergyCoefficients, FormatError> {
    let file: CoefficientFile = toml::from_str(text).map_err(|e| FormatError::parse(source_name, e))?;
    let coeffs = EnergyCoefficients {
        class: file.class,
        levels: file.levels.iter().map(|l| l.label.clone()).collect(),
        k_e: file.k_e,
        k_p: file.k_p,
        k_o: file.k_o,
        k_d: file.k_d,
        a: file.levels.iter().map(|l| l.a).collect(),
        m: file.levels.iter().map(|l| l.m).collect(),
    };
    coeffs.validate().map_err(|e| FormatError::parse(source_name, e))?;
    Ok(coeffs)
}

pub fn emit_coefficients(coeffs: &EnergyCoefficients) -> String {
    let file = CoefficientFile {
        class: coeffs.class,
        k_e: coeffs.k_e,
        k_p: coeffs.k_p,
        k_o: coeffs.k_o,
        k_d: coeffs.k_d,
        levels: coeffs
            .levels
            .iter()
            .zip(coeffs.a.iter().zip(&coeffs.m))
            .map(|(label, (&a, &m))| LevelCoefficients { label: label.clone(), a, m })
            .collect(),
    };
    toml::to_string(&file).expect("coefficients serialize")
}

pub fn load_coefficients(arg: &str) -> Result<EnergyCoefficients, FormatError> {
    let path = Path::new(arg);
    if path.exists() {
        parse_coefficients(&read_text(path)?, arg)
    } else {
        bundled_coefficients(arg).ok_or_else(|| FormatError::NotFound(arg.to_string()))
    }
}

pub fn parse_task(text: &str, source_name: &str) -> Result<TaskSpec, FormatError> {
    let task: TaskSpec = toml::from_str(text).map_err(|e| FormatError::parse(source_name, e))?;
    task.validate().map_err(|e| FormatError::parse(source_name, e))?;
    Ok(task)
}

/// Rounds to 9 significant digits and prints the shortest decimal form.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    // normalise -0
    if rounded == 0.0 {
        return "0".to_string();
    }
    if rounded.abs() < 1e-4 || rounded.abs() >= 1e15 {
        format!("{rounded:e}")
    } else {
        rounded.to_string()
    }
}

/// Same rounding as [`sig9`], as a number for JSON output.
pub fn round9(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.8e}").parse().expect("formatted float parses")
    } else {
        x
    }
}

/// One experiment in the run table: written by ingest, read by fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub node_type: String,
    pub dataset: String,
    pub shape: String,
    pub depth: usize,
    pub ntp: u64,
    pub hardware_class: HardwareClass,
    pub epochs: u64,
    pub train_batches: u64,
    pub test_batches: u64,
    pub runtime_s: f64,
    pub raw_energy_j: f64,
    #[serde(default)]
    pub standardized_energy_j: Option<f64>,
    #[serde(default)]
    pub analysis_energy_j: Option<f64>,
    /// `;`-separated filter outcomes; empty when the run passed every filter.
    #[serde(default)]
    pub flags: String,
    #[serde(default)]
    pub n_features: Option<usize>,
    #[serde(default)]
    pub n_outputs: Option<usize>,
    #[serde(default)]
    pub n_train: Option<u64>,
    #[serde(default)]
    pub n_test: Option<u64>,
    #[serde(default)]
    pub batch_size: Option<u64>,
    #[serde(default)]
    pub dtype_bytes: Option<u64>,
}

pub const RUN_TABLE_COLUMNS: [&str; 21] = [
    "run_id",
    "node_type",
    "dataset",
    "shape",
    "depth",
    "ntp",
    "hardware_class",
    "epochs",
    "train_batches",
    "test_batches",
    "runtime_s",
    "raw_energy_j",
    "standardized_energy_j",
    "analysis_energy_j",
    "flags",
    "n_features",
    "n_outputs",
    "n_train",
    "n_test",
    "batch_size",
    "dtype_bytes",
];

impl RunRecord {
    pub fn counts(&self) -> RunCounts {
        RunCounts::new(self.epochs, self.train_batches, self.test_batches)
    }

    pub fn flag_list(&self) -> Vec<&str> {
        self.flags.split(';').filter(|f| !f.is_empty()).collect()
    }

    /// Runs that survived every dropping filter. `negative_energy` is a
    /// warning, not a drop.
    pub fn is_retained(&self) -> bool {
        self.flag_list().iter().all(|f| *f == "negative_energy")
    }

    /// Task dimensions: from the record's own columns, else from the catalog.
    pub fn task(&self, catalog: Option<&DatasetCatalog>) -> Result<TaskSpec, String> {
        let from_catalog = catalog.and_then(|c| c.get(&self.dataset));
        let pick = |own: Option<u64>, cat: Option<u64>, name: &str| {
            own.or(cat).ok_or_else(|| {
                format!(
                    "run {}: no {name} for dataset `{}` (add the column or a dataset catalog)",
                    self.run_id, self.dataset
                )
            })
        };
        let task = TaskSpec {
            n_features: pick(
                self.n_features.map(|v| v as u64),
                from_catalog.map(|t| t.n_features as u64),
                "n_features",
            )? as usize,
            n_outputs: pick(self.n_outputs.map(|v| v as u64), from_catalog.map(|t| t.n_outputs as u64), "n_outputs")?
                as usize,
            n_train: pick(self.n_train, from_catalog.map(|t| t.n_train), "n_train")?,
            n_test: pick(self.n_test, from_catalog.map(|t| t.n_test), "n_test")?,
            batch_size: self.batch_size.unwrap_or(TaskSpec::DEFAULT_BATCH_SIZE),
            dtype_bytes: self.dtype_bytes.unwrap_or(TaskSpec::DEFAULT_DTYPE_BYTES),
        };
        task.validate().map_err(|e| format!("run {}: {e}", self.run_id))?;
        Ok(task)
    }

    /// Rebuilds the architecture from shape, depth and parameter count.
    pub fn architecture(&self, task: &TaskSpec) -> Result<NetworkArchitecture, String> {
        let shape: ShapeFamily = self.shape.parse().map_err(|e| format!("run {}: {e}", self.run_id))?;
        crate::arch::solve_widths(shape, self.depth, self.ntp, task).map_err(|e| format!("run {}: {e}", self.run_id))
    }

    fn to_fields(&self) -> Vec<String> {
        let opt_f = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        let opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.run_id.clone(),
            self.node_type.clone(),
            self.dataset.clone(),
            self.shape.clone(),
            self.depth.to_string(),
            self.ntp.to_string(),
            self.hardware_class.to_string(),
            self.epochs.to_string(),
            self.train_batches.to_string(),
            self.test_batches.to_string(),
            sig9(self.runtime_s),
            sig9(self.raw_energy_j),
            opt_f(self.standardized_energy_j),
            opt_f(self.analysis_energy_j),
            self.flags.clone(),
            opt_u(self.n_features.map(|v| v as u64)),
            opt_u(self.n_outputs.map(|v| v as u64)),
            opt_u(self.n_train),
            opt_u(self.n_test),
            opt_u(self.batch_size),
            opt_u(self.dtype_bytes),
        ]
    }
}

pub fn write_run_table<W: Write>(out: W, runs: &[RunRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUN_TABLE_COLUMNS)?;
    for run in runs {
        w.write_record(run.to_fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Parses CSV with a header row into `T`, naming the data row on failure.
pub fn read_csv<T, R>(input: R, source_name: &str) -> Result<Vec<T>, FormatError>
where
    T: for<'de> Deserialize<'de>,
    R: Read,
{
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize().enumerate() {
        let row = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
            FormatError::parse(source_name, format!("line {line} (data row {}): {e}", i + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_csv_file<T>(path: &Path) -> Result<Vec<T>, FormatError>
where
    T: for<'de> Deserialize<'de>,
{
    let file = fs::File::open(path).map_err(|err| FormatError::Io { path: path.display().to_string(), err })?;
    read_csv(file, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dataset: String,
    pub n_features: usize,
    pub n_outputs: usize,
    pub n_train: u64,
    pub n_test: u64,
}

/// Dataset dimensions keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetCatalog(pub BTreeMap<String, DatasetEntry>);

impl DatasetCatalog {
    pub fn from_entries(entries: Vec<DatasetEntry>) -> Self {
        DatasetCatalog(entries.into_iter().map(|e| (e.dataset.clone(), e)).collect())
    }

    pub fn get(&self, dataset: &str) -> Option<&DatasetEntry> {
        self.0.get(dataset)
    }
}
