//! Working-set sizes and their placement in a memory hierarchy.
//!
//! Four working sets drive the model:
//!
//! * `f` / `f'`: the parameters, touched by training and test forward passes.
//! * `b`: parameters, their gradients, and one value per unit per datum.
//! * `t_l`: a layer's input and output activations (or their gradients) for a batch.
//! * `d`: the training and test data.
//!
//! Parameters and parameter gradients are replicated on every processing
//! unit; per-datum data (`t_l`, the unit values of `b`, and `d`) is split
//! evenly across units. Each set is placed in the lowest level that can hold
//! it together with the sets that are live at the same time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{count_parameters, NetworkArchitecture, TaskSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HardwareError {
    #[error("hardware spec `{name}`: {reason}")]
    Invalid { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardwareClass {
    Cpu,
    Gpu,
}

impl fmt::Display for HardwareClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HardwareClass::Cpu => "cpu",
            HardwareClass::Gpu => "gpu",
        })
    }
}

impl FromStr for HardwareClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpu" => Ok(HardwareClass::Cpu),
            "gpu" => Ok(HardwareClass::Gpu),
            other => Err(format!("unknown hardware class `{other}` (expected cpu or gpu)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "per-unit")]
    PerUnit,
    #[serde(rename = "shared")]
    Shared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLevel {
    pub label: String,
    /// Bytes per unit for per-unit levels, total bytes for shared ones.
    /// Ignored (unbounded) for the last level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_bytes: Option<u64>,
    pub scope: Scope,
    /// Units sharing one instance of a shared level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_by: Option<u32>,
}

impl MemoryLevel {
    pub fn per_unit(label: &str, capacity_bytes: u64) -> Self {
        MemoryLevel {
            label: label.to_string(),
            capacity_bytes: Some(capacity_bytes),
            scope: Scope::PerUnit,
            shared_by: None,
        }
    }

    pub fn shared(label: &str, capacity_bytes: Option<u64>, shared_by: u32) -> Self {
        MemoryLevel { label: label.to_string(), capacity_bytes, scope: Scope::Shared, shared_by: Some(shared_by) }
    }

    fn sharers(&self) -> u64 {
        match self.scope {
            Scope::PerUnit => 1,
            Scope::Shared => self.shared_by.unwrap_or(1) as u64,
        }
    }
}

/// A node's processing units and memory levels, fastest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    pub class: HardwareClass,
    /// Cores or SMs across the whole node.
    pub n_units: u32,
    pub idle_power_w: f64,
    pub levels: Vec<MemoryLevel>,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<(), HardwareError> {
        let fail = |reason: String| HardwareError::Invalid { name: self.name.clone(), reason };
        if self.n_units == 0 {
            return Err(fail("n_units must be at least 1".into()));
        }
        if self.levels.is_empty() {
            return Err(fail("at least one memory level is required".into()));
        }
        if !(self.idle_power_w.is_finite() && self.idle_power_w >= 0.0) {
            return Err(fail("idle_power_w must be finite and non-negative".into()));
        }
        let top = self.levels.len() - 1;
        for (i, level) in self.levels.iter().enumerate() {
            if self.levels[..i].iter().any(|l| l.label == level.label) {
                return Err(fail(format!("duplicate level label `{}`", level.label)));
            }
            if i < top && !matches!(level.capacity_bytes, Some(c) if c > 0) {
                return Err(fail(format!("level `{}` needs a positive capacity_bytes", level.label)));
            }
            match (level.scope, level.shared_by) {
                (Scope::Shared, None) => return Err(fail(format!("shared level `{}` needs shared_by", level.label))),
                (Scope::Shared, Some(k)) if k == 0 || k > self.n_units => {
                    return Err(fail(format!("level `{}`: shared_by must be in 1..={}", level.label, self.n_units)))
                }
                (Scope::PerUnit, Some(k)) if k != 1 => {
                    return Err(fail(format!("per-unit level `{}` cannot set shared_by", level.label)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.levels.iter().map(|l| l.label.clone()).collect()
    }

    pub fn top(&self) -> usize {
        self.levels.len() - 1
    }

    /// Capacity a level offers; `None` for the unbounded last level.
    pub fn capacity(&self, level: usize) -> Option<u64> {
        if level == self.top() {
            None
        } else {
            self.levels[level].capacity_bytes
        }
    }

    /// Whether `replicated` bytes per unit plus `distributed` bytes split
    /// across all units fit in `level`.
    pub fn fits(&self, level: usize, replicated: u64, distributed: u64) -> bool {
        let Some(capacity) = self.capacity(level) else {
            return true;
        };
        let n = self.n_units as u128;
        let k = self.levels[level].sharers() as u128;
        // replicated + distributed·k/n ≤ capacity, in integers
        replicated as u128 * n + distributed as u128 * k <= capacity as u128 * n
    }

    /// Footprint of a set at `level`: one replicated copy plus the share of
    /// the distributed data belonging to the units attached to that level.
    pub fn effective_size(&self, level: usize, replicated: u64, distributed: u64) -> f64 {
        let k = self.levels[level].sharers() as f64;
        replicated as f64 + distributed as f64 * k / self.n_units as f64
    }

    /// Lowest level holding the given footprint.
    pub fn lowest_fit(&self, replicated: u64, distributed: u64) -> usize {
        (0..self.levels.len()).find(|&c| self.fits(c, replicated, distributed)).unwrap_or(self.top())
    }
}

/// Byte sizes of every working set for one architecture and task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingSets {
    pub s_f: u64,
    pub s_f_prime: u64,
    pub s_b: u64,
    /// One entry per layer.
    pub s_t: Vec<u64>,
    pub s_d: u64,
    pub total_units: u64,
    /// Per-layer parameter bytes, Θ_l.
    pub s_theta: Vec<u64>,
}

impl WorkingSets {
    pub fn layers(&self) -> usize {
        self.s_t.len()
    }

    pub fn max_t(&self) -> u64 {
        self.s_t.iter().copied().max().unwrap_or(0)
    }

    /// Parameters plus parameter gradients: the replicated part of `b`.
    pub fn b_replicated(&self) -> u64 {
        2 * self.s_f
    }

    /// Unit values for the batch: the distributed part of `b`.
    pub fn b_distributed(&self) -> u64 {
        self.s_b - self.b_replicated()
    }
}

pub fn compute_working_sets(arch: &NetworkArchitecture, task: &TaskSpec) -> WorkingSets {
    let dtype = task.dtype_bytes;
    let batch = task.batch_size;
    let ntp = count_parameters(arch);
    let total_units = arch.total_units();
    WorkingSets {
        s_f: ntp * dtype,
        s_f_prime: ntp * dtype,
        s_b: (2 * ntp + total_units * batch) * dtype,
        s_t: arch.layers().map(|(fan_in, width)| (width as u64 + fan_in as u64) * batch * dtype).collect(),
        s_d: (task.n_train + task.n_test) * (task.n_features + task.n_outputs) as u64 * dtype,
        total_units,
        s_theta: arch.layers().map(|(fan_in, width)| (fan_in as u64 + 1) * width as u64 * dtype).collect(),
    }
}

/// What decides where the parameter sets live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlacementMode {
    /// The entire parameter set must fit alongside the largest `t_l`.
    #[default]
    WholeSet,
    /// Only the largest single layer's parameters must fit.
    PerLayer,
}

impl FromStr for PlacementMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whole-set" => Ok(PlacementMode::WholeSet),
            "per-layer" => Ok(PlacementMode::PerLayer),
            other => Err(format!("unknown placement `{other}` (expected whole-set or per-layer)")),
        }
    }
}

/// Level index of each working set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// Level of each `t_l`.
    pub t_layers: Vec<usize>,
    /// Level of the largest `t_l`.
    pub t: usize,
    pub f_prime: usize,
    pub f: usize,
    pub b: usize,
    pub d: usize,
}

impl Placement {
    /// c_t ≤ c_f' ≤ c_f = c_b ≤ c_d
    pub fn is_ordered(&self) -> bool {
        self.t <= self.f_prime && self.f_prime <= self.f && self.f == self.b && self.b <= self.d
    }
}

pub fn place_working_sets(ws: &WorkingSets, hw: &HardwareSpec) -> Placement {
    place_working_sets_with(ws, hw, PlacementMode::WholeSet)
}

pub fn place_working_sets_with(ws: &WorkingSets, hw: &HardwareSpec, mode: PlacementMode) -> Placement {
    let params = match mode {
        PlacementMode::WholeSet => ws.s_f,
        PlacementMode::PerLayer => ws.s_theta.iter().copied().max().unwrap_or(0),
    };
    let t_max = ws.max_t();
    let live_b = t_max + ws.b_distributed();

    let t_layers: Vec<usize> = ws.s_t.iter().map(|&s| hw.lowest_fit(0, s)).collect();
    let t = hw.lowest_fit(0, t_max);
    let b = hw.lowest_fit(2 * params, live_b);
    let f = b;
    let f_prime = hw.lowest_fit(params, t_max).min(f);
    let d = hw.lowest_fit(2 * params, live_b + ws.s_d).max(b);
    Placement { t_layers, t, f_prime, f, b, d }
}
