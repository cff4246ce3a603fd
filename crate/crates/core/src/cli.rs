//! The `mlp-energy` command line.
//!
//! Every subcommand loads and validates all of its inputs before printing
//! anything, so a failing invocation leaves no partial output. Exit codes:
//! 0 success, 2 unreadable or malformed input, 3 inputs that disagree with
//! each other, 4 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::advisor::{self, AdvisorError, EpochModel, LossCurve};
use crate::arch::{count_ops, count_parameters, solve_widths, ArchError, NetworkArchitecture, ShapeFamily, TaskSpec};
use crate::energy_model::{build_design_row, EnergyBreakdown, EnergyCoefficients, ModeledRun, RunCounts};
use crate::fitting::{self, ErrorStats, FitConfig, FitError, FitMethod, FitProblem};
use crate::formats::{self, round9, sig9, DatasetCatalog, DatasetEntry, FormatError, RunRecord};
use crate::ingest::{self, IngestConfig, IngestError, JobRecord, PowerSample};
use crate::synth::{synthetic_runs, SynthConfig};
use crate::worksets::{HardwareSpec, PlacementMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Parse(String),
    Config(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => EXIT_PARSE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Parse(m) | CliError::Config(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<ArchError> for CliError {
    fn from(e: ArchError) -> Self {
        match e {
            ArchError::InfeasibleTarget { .. } => CliError::Config(e.to_string()),
            _ => CliError::Parse(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::InsufficientSamples { .. } | IngestError::NoReferenceRuns { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Parse(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Empty | FitError::Run(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<AdvisorError> for CliError {
    fn from(e: AdvisorError) -> Self {
        match e {
            AdvisorError::Arch(a) => a.into(),
            AdvisorError::InvalidEpochPoint { .. } | AdvisorError::InvalidLossPoint { .. } => {
                CliError::Parse(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mlp-energy", version, about = "Working-set energy model for fully connected network training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Working-set sizes and the memory level each one is placed in.
    Worksets(WorksetsArgs),
    /// Modeled energy of one training experiment, term by term.
    Predict(PredictArgs),
    /// Integrate node power over scheduler jobs into a filtered run table.
    Ingest(IngestArgs),
    /// Fit energy coefficients to a run table.
    Fit(FitArgs),
    /// Suggest parameter counts that sit just past a cache boundary.
    Advise(AdviseArgs),
    /// Generate a run table from known coefficients.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum OutputFormat {
    #[default]
    Table,
    JsonLines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Placement {
    #[default]
    WholeSet,
    PerLayer,
}

impl From<Placement> for PlacementMode {
    fn from(p: Placement) -> Self {
        match p {
            Placement::WholeSet => PlacementMode::WholeSet,
            Placement::PerLayer => PlacementMode::PerLayer,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    /// TOML task file (n_features, n_outputs, n_train, n_test, batch_size, dtype_bytes).
    #[arg(long, conflicts_with_all = ["features", "outputs", "train", "test"])]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub outputs: Option<usize>,
    /// Training examples.
    #[arg(long)]
    pub train: Option<u64>,
    /// Test examples.
    #[arg(long)]
    pub test: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub dtype_bytes: Option<u64>,
}

impl TaskArgs {
    fn load(&self) -> Result<TaskSpec, CliError> {
        let mut task = match &self.task {
            Some(path) => formats::parse_task(&formats::read_text(path)?, &path.display().to_string())?,
            None => {
                let missing = |name: &str| CliError::Parse(format!("task: pass --task FILE or --{name}"));
                TaskSpec::new(
                    self.features.ok_or_else(|| missing("features"))?,
                    self.outputs.ok_or_else(|| missing("outputs"))?,
                    self.train.ok_or_else(|| missing("train"))?,
                    self.test.ok_or_else(|| missing("test"))?,
                )
            }
        };
        if let Some(b) = self.batch_size {
            task.batch_size = b;
        }
        if let Some(d) = self.dtype_bytes {
            task.dtype_bytes = d;
        }
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    /// Layer widths including the output layer, e.g. 64,64,10.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["shape", "depth", "ntp"])]
    pub widths: Option<Vec<usize>>,
    /// Add identity shortcuts between equal-width layers (with --widths).
    #[arg(long, requires = "widths")]
    pub residual: bool,
    /// Shape family, e.g. rectangle, trapezoid, wide_first_4x.
    #[arg(long, requires_all = ["depth", "ntp"])]
    pub shape: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Target parameter count; the nearest network of the shape is used.
    #[arg(long)]
    pub ntp: Option<u64>,
}

impl ArchArgs {
    fn load(&self, task: &TaskSpec) -> Result<NetworkArchitecture, CliError> {
        if let Some(widths) = &self.widths {
            let arch = NetworkArchitecture::new(task.n_features, widths.clone(), self.residual)?;
            if arch.output_width() != task.n_outputs {
                return Err(CliError::Config(format!(
                    "output layer width {} does not match the task's {} outputs",
                    arch.output_width(),
                    task.n_outputs
                )));
            }
            return Ok(arch);
        }
        match (&self.shape, self.depth, self.ntp) {
            (Some(shape), Some(depth), Some(ntp)) => Ok(solve_widths(shape.parse()?, depth, ntp, task)?),
            _ => Err(CliError::Parse("architecture: pass --widths or --shape, --depth and --ntp".into())),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct WorksetsArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Hardware spec file or bundled name (cpu1, cpu1-l1d32k, gpu1).
    #[arg(long)]
    pub hardware: String,
    #[arg(long, value_enum, default_value_t)]
    pub placement: Placement,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub hardware: String,
    /// Coefficient file or bundled name (cpu, gpu).
    #[arg(long)]
    pub coeffs: String,
    #[arg(long)]
    pub epochs: u64,
    /// Defaults to ceil(train / batch size).
    #[arg(long)]
    pub train_batches: Option<u64>,
    /// Defaults to ceil(test / batch size).
    #[arg(long)]
    pub test_batches: Option<u64>,
    #[arg(long, value_enum, default_value_t)]
    pub placement: Placement,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// CSV: node_id,timestamp_s,watts
    #[arg(long)]
    pub power: PathBuf,
    /// CSV: run_id,node_id,node_type,start_s,end_s,dataset,shape,depth,ntp,hardware_class,epochs,train_batches,test_batches
    #[arg(long)]
    pub jobs: PathBuf,
    #[arg(long)]
    pub reference_node_type: String,
    /// Fill analysis_energy_j with standardized energy minus the class overhead.
    #[arg(long)]
    pub subtract_overheads: bool,
    /// Dataset defining the overhead reference runs (default: fewest batches).
    #[arg(long)]
    pub reference_dataset: Option<String>,
    /// Override the idle power of a node type, TYPE=WATTS; repeatable.
    #[arg(long = "idle-power", value_parser = parse_idle_override)]
    pub idle_power: Vec<(String, f64)>,
    /// Where to write the run table.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
}

fn parse_idle_override(s: &str) -> Result<(String, f64), String> {
    let (t, w) = s.split_once('=').ok_or_else(|| format!("expected TYPE=WATTS, got `{s}`"))?;
    let w: f64 = w.trim().parse().map_err(|e| format!("`{w}`: {e}"))?;
    if !(w.is_finite() && w >= 0.0) {
        return Err(format!("idle power must be non-negative, got {w}"));
    }
    Ok((t.trim().to_string(), w))
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Run table written by `ingest` or `synth`.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub hardware: String,
    /// CSV dataset catalog (dataset,n_features,n_outputs,n_train,n_test) for
    /// run tables without task columns.
    #[arg(long)]
    pub datasets: Option<PathBuf>,
    /// Fraction of runs held out for evaluation.
    #[arg(long, default_value_t = 0.0)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer starting points.
    #[arg(long, default_value_t = 1)]
    pub starts: usize,
    #[arg(long, value_enum, default_value_t)]
    pub method: Method,
    /// Fit even when some coefficients cannot be separated.
    #[arg(long)]
    pub allow_rank_deficient: bool,
    #[arg(long, value_enum, default_value_t)]
    pub placement: Placement,
    /// Where to write the fitted coefficient file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Method {
    #[default]
    GaussNewton,
    ProjectedGradient,
}

#[derive(Debug, Clone, Args)]
pub struct AdviseArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub shape: String,
    #[arg(long)]
    pub depth: usize,
    #[arg(long)]
    pub hardware: String,
    #[arg(long)]
    pub coeffs: String,
    /// CSV: ntp,epoch (loss-minimizing epoch per size).
    #[arg(long)]
    pub epoch_table: Option<PathBuf>,
    /// CSV: run_id,epoch,test_loss; needs --runs and --target-loss.
    #[arg(long, requires_all = ["runs", "target_loss"])]
    pub loss_table: Option<PathBuf>,
    /// Run table supplying energy and epoch counts for the loss table.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub hardware: String,
    #[arg(long)]
    pub coeffs: String,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    /// Lognormal noise sigma.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
}

/// A report cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(u64),
    Num(f64),
    Bool(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) => sig9(*x),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Int(i) => Value::from(*i),
            Cell::Num(x) => serde_json::Number::from_f64(round9(*x)).map(Value::Number).unwrap_or(Value::Null),
            Cell::Bool(b) => Value::Bool(*b),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<u64> for Cell {
    fn from(i: u64) -> Self {
        Cell::Int(i)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as u64)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map(Into::into).unwrap_or(Cell::Text(String::new()))
    }
}

/// One titled table of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Section {
    fn new(name: &str, columns: &[&str]) -> Self {
        Section { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    fn row(&mut self, cells: Vec<Cell>) -> &mut Self {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
        self
    }
}

macro_rules! cells {
    ($($x:expr),* $(,)?) => { vec![$(Cell::from($x)),*] };
}

/// Renders sections as aligned text tables or as one JSON object per row,
/// tagged with its section name.
pub fn render(sections: &[Section], format: OutputFormat) -> String {
    let mut out = String::new();
    match format {
        OutputFormat::Table => {
            for (i, s) in sections.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                out.push_str(&format!("# {}\n", s.name));
                let rendered: Vec<Vec<String>> = s.rows.iter().map(|r| r.iter().map(Cell::render).collect()).collect();
                let widths: Vec<usize> = (0..s.columns.len())
                    .map(|c| {
                        rendered.iter().map(|r| r[c].chars().count()).chain([s.columns[c].len()]).max().unwrap_or(0)
                    })
                    .collect();
                let line = |cells: &[String]| {
                    let padded: Vec<String> =
                        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}", w = w)).collect();
                    padded.join("  ").trim_end().to_string() + "\n"
                };
                out.push_str(&line(&s.columns));
                for r in &rendered {
                    out.push_str(&line(r));
                }
            }
        }
        OutputFormat::JsonLines => {
            for s in sections {
                for r in &s.rows {
                    let mut obj = Map::new();
                    obj.insert("record".into(), Value::String(s.name.clone()));
                    for (c, cell) in s.columns.iter().zip(r) {
                        obj.insert(c.clone(), cell.json());
                    }
                    out.push_str(&Value::Object(obj).to_string());
                    out.push('\n');
                }
            }
        }
    }
    out
}

fn load_hardware(arg: &str) -> Result<HardwareSpec, CliError> {
    Ok(formats::load_hardware(arg)?)
}

fn load_matching_coefficients(arg: &str, hw: &HardwareSpec) -> Result<EnergyCoefficients, CliError> {
    let coeffs = formats::load_coefficients(arg)?;
    coeffs.check_levels(hw).map_err(|e| CliError::Config(format!("{arg} vs {}: {e}", hw.name)))?;
    if let Some(class) = coeffs.class.filter(|&c| c != hw.class) {
        return Err(CliError::Config(format!("{arg} is for {class} hardware but {} is {}", hw.name, hw.class)));
    }
    Ok(coeffs)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn level_label(hw: &HardwareSpec, level: usize) -> String {
    hw.levels[level].label.clone()
}

fn network_section(arch: &NetworkArchitecture, task: &TaskSpec) -> Section {
    let ops = count_ops(arch, task);
    let widths: Vec<String> = arch.layer_widths.iter().map(|w| w.to_string()).collect();
    let mut s =
        Section::new("network", &["ntp", "input_width", "layer_widths", "residual", "forward_flops", "backward_flops"]);
    s.row(cells![count_parameters(arch), arch.input_width, widths.join(","), arch.residual, ops.forward, ops.backward]);
    s
}

pub fn cmd_worksets(args: &WorksetsArgs) -> Result<String, CliError> {
    let hw = load_hardware(&args.hardware)?;
    let task = args.task.load()?;
    let arch = args.arch.load(&task)?;
    let run = ModeledRun::with_mode(&arch, &task, &hw, args.placement.into());
    let ws = &run.working_sets;
    let p = &run.placement;

    let mut sets = Section::new("worksets", &["set", "bytes", "level"]);
    sets.row(cells!["d", ws.s_d, level_label(&hw, p.d)])
        .row(cells!["f", ws.s_f, level_label(&hw, p.f)])
        .row(cells!["f'", ws.s_f_prime, level_label(&hw, p.f_prime)])
        .row(cells!["b", ws.s_b, level_label(&hw, p.b)])
        .row(cells!["t_max", ws.max_t(), level_label(&hw, p.t)]);
    for (l, (&s, &c)) in ws.s_t.iter().zip(&p.t_layers).enumerate() {
        sets.row(cells![format!("t{}", l + 1), s, level_label(&hw, c)]);
    }
    let mut order = Section::new("ordering", &["chain", "levels", "holds"]);
    let chain = format!(
        "{} <= {} <= {} = {} <= {}",
        level_label(&hw, p.t),
        level_label(&hw, p.f_prime),
        level_label(&hw, p.f),
        level_label(&hw, p.b),
        level_label(&hw, p.d)
    );
    order.row(cells!["c_t <= c_f' <= c_f = c_b <= c_d", chain, p.is_ordered()]);
    Ok(render(&[network_section(&arch, &task), sets, order], args.format))
}

pub fn cmd_predict(args: &PredictArgs) -> Result<String, CliError> {
    let hw = load_hardware(&args.hardware)?;
    let coeffs = load_matching_coefficients(&args.coeffs, &hw)?;
    let task = args.task.load()?;
    let arch = args.arch.load(&task)?;
    let counts = RunCounts::new(
        args.epochs,
        args.train_batches.unwrap_or_else(|| task.train_batches()),
        args.test_batches.unwrap_or_else(|| task.test_batches()),
    );
    let run = ModeledRun::with_mode(&arch, &task, &hw, args.placement.into());
    let row = build_design_row(counts, &run, hw.levels.len());
    let b = EnergyBreakdown::new(&row, &coeffs);

    let mut c = Section::new("counts", &["epochs", "train_batches", "test_batches", "passes"]);
    c.row(cells![counts.epochs, counts.train_batches, counts.test_batches, counts.epochs * counts.passes_per_epoch()]);
    let mut terms = Section::new("energy", &["term", "energy_j"]);
    terms
        .row(cells!["experiment_overhead", b.experiment_overhead])
        .row(cells!["pass_overhead", b.pass_overhead])
        .row(cells!["operations", b.operations])
        .row(cells!["layer_overhead", b.layer_overhead]);
    for (label, access, bytes) in &b.levels {
        terms.row(cells![format!("access_{label}"), *access]).row(cells![format!("bytes_{label}"), *bytes]);
    }
    terms.row(cells!["total", b.total]);
    Ok(render(&[network_section(&arch, &task), c, terms], args.format))
}

pub fn cmd_ingest(args: &IngestArgs) -> Result<String, CliError> {
    let power: Vec<PowerSample> = formats::read_csv_file(&args.power)?;
    let jobs: Vec<JobRecord> = formats::read_csv_file(&args.jobs)?;
    let mut config = IngestConfig::new(&args.reference_node_type);
    config.subtract_overheads = args.subtract_overheads;
    config.reference.dataset = args.reference_dataset.clone();
    config.idle_overrides = args.idle_power.iter().cloned().collect();
    let out = ingest::ingest(&power, &jobs, &config)?;

    let mut table = Vec::new();
    formats::write_run_table(&mut table, &out.runs).map_err(|e| CliError::Parse(e.to_string()))?;
    write_file(&args.out, &table)?;

    let f = &out.report.filters;
    let mut filters = Section::new("filters", &["filter", "runs"]);
    filters
        .row(cells!["input", f.input])
        .row(cells!["zero_w", f.zero_w])
        .row(cells!["missing_data", f.missing_data])
        .row(cells!["long_runtime", f.long_runtime])
        .row(cells!["sigma_outlier", f.sigma_outlier])
        .row(cells!["retained", f.retained])
        .row(cells!["negative_energy", f.negative_energy]);
    let mut idle = Section::new("idle_power", &["node_type", "watts"]);
    for (t, w) in &out.report.idle_power_w {
        idle.row(cells![t.as_str(), *w]);
    }
    let mut sections = vec![filters, idle];
    if !out.report.overheads.is_empty() {
        let mut o = Section::new("overheads", &["hardware_class", "energy_j", "runtime_s"]);
        for (class, v) in &out.report.overheads {
            o.row(cells![class.to_string(), v.energy_j, v.runtime_s]);
        }
        sections.push(o);
    }
    if !f.sigma_skipped_groups.is_empty() {
        let mut s = Section::new("sigma_skipped", &["group"]);
        for g in &f.sigma_skipped_groups {
            s.row(cells![g.as_str()]);
        }
        sections.push(s);
    }
    Ok(render(&sections, args.format))
}

fn stats_row(split: &str, runs: usize, s: &ErrorStats) -> Vec<Cell> {
    cells![split, runs, s.mean_abs_rel_error, s.rms_log_ratio, s.mean_log_ratio]
}

pub fn cmd_fit(args: &FitArgs) -> Result<String, CliError> {
    let hw = load_hardware(&args.hardware)?;
    let runs: Vec<RunRecord> = formats::read_csv_file(&args.runs)?;
    let catalog = match &args.datasets {
        Some(path) => Some(DatasetCatalog::from_entries(formats::read_csv_file::<DatasetEntry>(path)?)),
        None => None,
    };
    if !(0.0..1.0).contains(&args.holdout) {
        return Err(CliError::Parse(format!("--holdout must be in [0, 1), got {}", args.holdout)));
    }
    let problem = FitProblem::from_runs(&runs, &hw, catalog.as_ref(), args.placement.into())?;
    if problem.rows.is_empty() {
        return Err(CliError::Config(format!("no retained {} runs in {}", hw.class, args.runs.display())));
    }

    let mut order: Vec<usize> = (0..problem.rows.len()).collect();
    let n_holdout = (args.holdout * order.len() as f64).round() as usize;
    if n_holdout > 0 {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(args.seed));
    }
    let (held, kept) = order.split_at(n_holdout);
    let subset = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        FitProblem {
            levels: problem.levels.clone(),
            rows: idx.iter().map(|&i| problem.rows[i].clone()).collect(),
            measured: idx.iter().map(|&i| problem.measured[i]).collect(),
            ids: idx.iter().map(|&i| problem.ids[i].clone()).collect(),
        }
    };
    let train = subset(kept);
    let config = FitConfig {
        seed: args.seed,
        starts: args.starts.max(1),
        method: match args.method {
            Method::GaussNewton => FitMethod::GaussNewton,
            Method::ProjectedGradient => FitMethod::ProjectedGradient,
        },
        allow_rank_deficient: args.allow_rank_deficient,
        ..FitConfig::default()
    };
    let result = fitting::fit(&train, &config)?;
    let mut coeffs = result.coefficients.clone();
    coeffs.class = Some(hw.class);

    let mut errors = Section::new("fit", &["split", "runs", "mean_abs_rel_error", "rms_log_ratio", "mean_log_ratio"]);
    errors.row(stats_row("train", train.rows.len(), &result.errors));
    if n_holdout > 0 {
        let test = subset(held);
        let stats = ErrorStats::evaluate(&coeffs, &test.rows, &test.measured);
        errors.row(stats_row("holdout", test.rows.len(), &stats));
    }
    let mut solver = Section::new("solver", &["iterations", "converged", "projected_gradient_norm", "unsupported"]);
    solver.row(cells![
        result.iterations,
        result.converged,
        result.projected_gradient_norm,
        result.unsupported.join(";")
    ]);
    let mut values = Section::new("coefficients", &["name", "value"]);
    for (name, v) in coeffs.names().into_iter().zip(coeffs.to_vector()) {
        values.row(cells![name, v]);
    }
    write_file(&args.out, formats::emit_coefficients(&coeffs).as_bytes())?;
    Ok(render(&[errors, solver, values], args.format))
}

#[derive(Debug, Deserialize)]
struct EpochRow {
    ntp: u64,
    epoch: f64,
}

#[derive(Debug, Deserialize)]
struct LossRow {
    run_id: String,
    epoch: u64,
    test_loss: f64,
}

/// Loss curves joined with run energies; energy after epoch `e` of `n` is
/// taken as `e/n` of the run's standardized energy.
fn loss_curves(runs: &[RunRecord], rows: Vec<LossRow>) -> Result<Vec<LossCurve>, CliError> {
    let by_id: BTreeMap<&str, &RunRecord> =
        runs.iter().filter(|r| r.is_retained()).map(|r| (r.run_id.as_str(), r)).collect();
    let mut points: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
    for row in &rows {
        if let Some((id, _)) = by_id.get_key_value(row.run_id.as_str()) {
            points.entry(id).or_default().push((row.epoch, row.test_loss));
        }
    }
    let mut curves = Vec::new();
    for (id, mut pts) in points {
        let run = by_id[id];
        if run.epochs == 0 {
            return Err(CliError::Config(format!("run {id} has zero epochs")));
        }
        let energy = run.standardized_energy_j.unwrap_or(run.raw_energy_j);
        pts.sort_by_key(|p| p.0);
        curves.push(LossCurve {
            ntp: run.ntp,
            points: pts.into_iter().map(|(e, loss)| (loss, energy * e as f64 / run.epochs as f64)).collect(),
        });
    }
    Ok(curves)
}

pub fn cmd_advise(args: &AdviseArgs) -> Result<String, CliError> {
    let hw = load_hardware(&args.hardware)?;
    let coeffs = load_matching_coefficients(&args.coeffs, &hw)?;
    let task = args.task.load()?;
    let shape: ShapeFamily = args.shape.parse()?;
    let model = match &args.epoch_table {
        Some(path) => {
            let rows: Vec<EpochRow> = formats::read_csv_file(path)?;
            Some(EpochModel::fit(&rows.iter().map(|r| (r.ntp, r.epoch)).collect::<Vec<_>>())?)
        }
        None => None,
    };
    let iso = match (&args.loss_table, &args.runs, args.target_loss) {
        (Some(losses), Some(runs), Some(target)) => {
            let runs: Vec<RunRecord> = formats::read_csv_file(runs)?;
            let rows: Vec<LossRow> = formats::read_csv_file(losses)?;
            Some(advisor::isoloss_energy(&loss_curves(&runs, rows)?, target)?)
        }
        _ => None,
    };
    let advice = advisor::recommend_ntp(&task, shape, args.depth, &hw, &coeffs, model.as_ref())?;

    let mut sections = Vec::new();
    if let Some(m) = &model {
        let mut s = Section::new("epoch_model", &["alpha", "c"]);
        s.row(cells![m.alpha, m.c]);
        sections.push(s);
    }
    let mut recs = Section::new(
        "recommendations",
        &[
            "rank",
            "ntp",
            "layer_widths",
            "anchor_set",
            "anchor_level",
            "anchor_bytes",
            "capacity_bytes",
            "energy_per_datum_j",
            "epochs",
            "energy_to_loss_j",
        ],
    );
    for (i, r) in advice.recommendations.iter().enumerate() {
        let widths: Vec<String> = r.layer_widths.iter().map(|w| w.to_string()).collect();
        recs.row(cells![
            i + 1,
            r.ntp,
            widths.join(","),
            r.anchor_set.to_string(),
            r.anchor_level.as_str(),
            r.anchor_size,
            r.capacity_bytes,
            r.energy_per_datum_j,
            r.epochs,
            r.energy_to_loss_j,
        ]);
    }
    sections.push(recs);
    if let Some(note) = &advice.note {
        let mut s = Section::new("note", &["note"]);
        s.row(cells![note.as_str()]);
        sections.push(s);
    }
    if let Some(points) = iso {
        let mut s = Section::new("isoloss", &["ntp", "energy_j", "runs"]);
        for p in points {
            s.row(cells![p.ntp, p.energy_j, p.runs]);
        }
        sections.push(s);
    }
    Ok(render(&sections, args.format))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String, CliError> {
    let hw = load_hardware(&args.hardware)?;
    let coeffs = load_matching_coefficients(&args.coeffs, &hw)?;
    if !(args.noise.is_finite() && args.noise >= 0.0) {
        return Err(CliError::Parse(format!("--noise must be non-negative, got {}", args.noise)));
    }
    let config = SynthConfig { count: args.count, noise_sigma: args.noise, seed: args.seed, ..SynthConfig::default() };
    let runs = synthetic_runs(&hw, &coeffs, &config);
    let mut table = Vec::new();
    formats::write_run_table(&mut table, &runs).map_err(|e| CliError::Parse(e.to_string()))?;
    write_file(&args.out, &table)?;
    let mut s = Section::new("synth", &["runs", "hardware", "noise_sigma", "seed"]);
    s.row(cells![runs.len(), hw.name.as_str(), args.noise, args.seed]);
    Ok(render(&[s], args.format))
}

pub fn execute(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Worksets(a) => cmd_worksets(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Advise(a) => cmd_advise(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `args`, runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = if e.use_stderr() { e.render().to_string() } else { e.to_string() };
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(text) => {
            let _ = stdout.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}
