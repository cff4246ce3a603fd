//! Network architectures: reconstructing layer widths from sweep
//! hyperparameters, and counting parameters and operations.
//!
//! Depth counts every parameterized layer, output layer included, so a
//! depth-2 network has one hidden layer followed by the output layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest first-hidden-layer width considered by [`solve_widths`].
pub const MAX_SOLVER_WIDTH: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("target of {target} parameters is below the minimum of {minimum} for this shape")]
    InfeasibleTarget { target: u64, minimum: u64 },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("unknown shape `{0}`")]
    UnknownShape(String),
}

/// Width profile of the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Rectangle,
    RectangleResidual,
    Trapezoid,
    Exponential,
    /// First hidden layer is `factor` times wider than the remaining hidden layers.
    WideFirst(u32),
}

impl ShapeFamily {
    /// The eight shapes of the original sweep.
    pub const SWEEP: [ShapeFamily; 8] = [
        ShapeFamily::Rectangle,
        ShapeFamily::RectangleResidual,
        ShapeFamily::Trapezoid,
        ShapeFamily::Exponential,
        ShapeFamily::WideFirst(2),
        ShapeFamily::WideFirst(4),
        ShapeFamily::WideFirst(8),
        ShapeFamily::WideFirst(16),
    ];

    fn validate(self) -> Result<(), ArchError> {
        match self {
            ShapeFamily::WideFirst(f) if f < 2 => {
                Err(ArchError::InvalidArchitecture(format!("wide_first factor must be at least 2, got {f}")))
            }
            _ => Ok(()),
        }
    }

    /// Layer widths (hidden layers then output) for a first hidden width `w`.
    pub fn widths(self, depth: usize, w: usize, n_outputs: usize) -> Vec<usize> {
        let hidden = depth.saturating_sub(1);
        let mut widths = Vec::with_capacity(depth);
        match self {
            ShapeFamily::Rectangle | ShapeFamily::RectangleResidual => {
                widths.extend(std::iter::repeat_n(w, hidden));
            }
            ShapeFamily::WideFirst(factor) => {
                if hidden > 0 {
                    widths.push(w * factor as usize);
                    widths.extend(std::iter::repeat_n(w, hidden - 1));
                }
            }
            ShapeFamily::Trapezoid => {
                let span = (depth - 1) as f64;
                for i in 0..hidden {
                    let x = w as f64 + (n_outputs as f64 - w as f64) * i as f64 / span;
                    widths.push(round_width(x));
                }
            }
            ShapeFamily::Exponential => {
                let span = (depth - 1) as f64;
                let ratio = n_outputs as f64 / w as f64;
                for i in 0..hidden {
                    let x = w as f64 * ratio.powf(i as f64 / span);
                    widths.push(round_width(x));
                }
            }
        }
        widths.push(n_outputs);
        widths
    }

    pub fn is_residual(self) -> bool {
        matches!(self, ShapeFamily::RectangleResidual)
    }
}

fn round_width(x: f64) -> usize {
    (x.round() as usize).max(1)
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeFamily::Rectangle => f.write_str("rectangle"),
            ShapeFamily::RectangleResidual => f.write_str("rectangle_residual"),
            ShapeFamily::Trapezoid => f.write_str("trapezoid"),
            ShapeFamily::Exponential => f.write_str("exponential"),
            ShapeFamily::WideFirst(n) => write!(f, "wide_first_{n}x"),
        }
    }
}

impl FromStr for ShapeFamily {
    type Err = ArchError;

    /// Accepts the sweep's names (`wide_first_4x`) as well as `wide_first(4)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let shape = match s {
            "rectangle" => ShapeFamily::Rectangle,
            "rectangle_residual" => ShapeFamily::RectangleResidual,
            "trapezoid" => ShapeFamily::Trapezoid,
            "exponential" => ShapeFamily::Exponential,
            _ => {
                let factor = s
                    .strip_prefix("wide_first_")
                    .and_then(|r| r.strip_suffix('x'))
                    .or_else(|| s.strip_prefix("wide_first(").and_then(|r| r.strip_suffix(')')))
                    .and_then(|n| n.parse::<u32>().ok())
                    .ok_or_else(|| ArchError::UnknownShape(s.to_string()))?;
                ShapeFamily::WideFirst(factor)
            }
        };
        shape.validate()?;
        Ok(shape)
    }
}

/// A concrete fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    pub input_width: usize,
    /// Hidden layers followed by the output layer.
    pub layer_widths: Vec<usize>,
    pub residual: bool,
}

impl NetworkArchitecture {
    pub fn new(input_width: usize, layer_widths: Vec<usize>, residual: bool) -> Result<Self, ArchError> {
        let arch = NetworkArchitecture { input_width, layer_widths, residual };
        arch.validate()?;
        Ok(arch)
    }

    /// Checks widths only; the two-layer minimum applies to [`solve_widths`].
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.input_width == 0 {
            return Err(ArchError::InvalidArchitecture("input width must be at least 1".into()));
        }
        if self.layer_widths.is_empty() {
            return Err(ArchError::InvalidArchitecture("network has no layers".into()));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(ArchError::InvalidArchitecture(format!("layer {i} has zero width")));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layer_widths.len()
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated architecture has layers")
    }

    /// `(fan_in, width)` for every layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.input_width)
            .chain(self.layer_widths.iter().copied())
            .zip(self.layer_widths.iter().copied())
    }

    /// Total number of units, Σ|l|.
    pub fn total_units(&self) -> u64 {
        self.layer_widths.iter().map(|&w| w as u64).sum()
    }
}

/// Dataset and batching parameters of a training task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_features: usize,
    pub n_outputs: usize,
    pub n_train: u64,
    pub n_test: u64,
    #[serde(default = "TaskSpec::default_batch_size")]
    pub batch_size: u64,
    #[serde(default = "TaskSpec::default_dtype_bytes")]
    pub dtype_bytes: u64,
}

impl TaskSpec {
    pub const DEFAULT_BATCH_SIZE: u64 = 256;
    pub const DEFAULT_DTYPE_BYTES: u64 = 4;

    fn default_batch_size() -> u64 {
        Self::DEFAULT_BATCH_SIZE
    }

    fn default_dtype_bytes() -> u64 {
        Self::DEFAULT_DTYPE_BYTES
    }

    /// A task with the sweep's batch size of 256 and FP32 scalars.
    pub fn new(n_features: usize, n_outputs: usize, n_train: u64, n_test: u64) -> Self {
        TaskSpec {
            n_features,
            n_outputs,
            n_train,
            n_test,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            dtype_bytes: Self::DEFAULT_DTYPE_BYTES,
        }
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let counts = [
            ("n_features", self.n_features as u64),
            ("n_outputs", self.n_outputs as u64),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ArchError::InvalidTask(format!("{name} must be at least 1")));
            }
        }
        if !matches!(self.dtype_bytes, 2 | 4 | 8) {
            return Err(ArchError::InvalidTask(format!("dtype_bytes must be 2, 4 or 8, got {}", self.dtype_bytes)));
        }
        Ok(())
    }

    /// Training batches per epoch (last partial batch included).
    pub fn train_batches(&self) -> u64 {
        self.n_train.div_ceil(self.batch_size)
    }

    pub fn test_batches(&self) -> u64 {
        self.n_test.div_ceil(self.batch_size)
    }
}

/// FLOPs per batch for the forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub forward: u64,
    pub backward: u64,
}

/// Σ_l (fan_in_l + 1)·|l|. Residual links carry no parameters.
pub fn count_parameters(arch: &NetworkArchitecture) -> u64 {
    arch.layers().map(|(fan_in, width)| (fan_in as u64 + 1) * width as u64).sum()
}

/// One multiply-accumulate (2 FLOPs) per parameter per datum forward; the
/// backward pass does two matrix products per layer, so twice that.
pub fn count_ops(arch: &NetworkArchitecture, task: &TaskSpec) -> OpCounts {
    let forward = 2 * count_parameters(arch) * task.batch_size;
    OpCounts { forward, backward: 2 * forward }
}

/// Finds the member of `shape` with `depth` layers whose parameter count is
/// nearest `target_ntp`. Ties go to the smaller network.
pub fn solve_widths(
    shape: ShapeFamily,
    depth: usize,
    target_ntp: u64,
    task: &TaskSpec,
) -> Result<NetworkArchitecture, ArchError> {
    shape.validate()?;
    if depth < 2 {
        return Err(ArchError::InvalidArchitecture(format!("depth must be at least 2, got {depth}")));
    }
    if task.n_features == 0 || task.n_outputs == 0 {
        return Err(ArchError::InvalidTask("feature and output counts must be at least 1".into()));
    }
    let build = |w: usize| NetworkArchitecture {
        input_width: task.n_features,
        layer_widths: shape.widths(depth, w, task.n_outputs),
        residual: shape.is_residual(),
    };

    let smallest = build(1);
    let minimum = count_parameters(&smallest);
    if target_ntp < minimum {
        return Err(ArchError::InfeasibleTarget { target: target_ntp, minimum });
    }

    // Parameter count is non-decreasing in w for every family, so the scan
    // stops at the first width reaching the target.
    let mut best = (target_ntp - minimum, smallest);
    for w in 2..=MAX_SOLVER_WIDTH {
        let arch = build(w);
        let ntp = count_parameters(&arch);
        let dist = ntp.abs_diff(target_ntp);
        if dist < best.0 {
            best = (dist, arch);
        }
        if ntp >= target_ntp {
            break;
        }
    }
    Ok(best.1)
}
