//! Affine access-energy model.
//!
//! Accessing a working set of `s` bytes that lives at level `c` costs
//! `a[c] + m[c]·s` joules. A pass pays a fixed overhead, a per-FLOP cost, a
//! per-layer cost and one access to each working set it touches:
//!
//! | pass            | working sets             | FLOPs        |
//! |-----------------|--------------------------|--------------|
//! | training forward| `d`, `f`, every `t_l`    | forward      |
//! | backward        | `b`, every `t_l`         | backward     |
//! | test forward    | `d`, `f'`, every `t_l`   | forward      |
//!
//! An experiment of `n` epochs with `h_t` training and `h_s` test batches per
//! epoch costs `k_e + n·(h_t·(E_f + E_b) + h_s·E_f')`. Because every term is
//! linear in the coefficients, the same total is the dot product of a
//! per-experiment [`DesignRow`] with the coefficient vector
//! `[k_e, k_p, k_o, k_d, a_1..a_C, m_1..m_C]`, which is what fitting uses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{count_ops, NetworkArchitecture, OpCounts, TaskSpec};
use crate::worksets::{
    compute_working_sets, place_working_sets_with, HardwareClass, HardwareSpec, Placement, PlacementMode, WorkingSets,
};

/// Number of scalar coefficients preceding the per-level `a` and `m` blocks.
pub const SCALAR_COEFFICIENTS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("coefficient levels {coefficients:?} do not match hardware levels {hardware:?}")]
    LevelMismatch { coefficients: Vec<String>, hardware: Vec<String> },
    #[error("coefficient `{name}` must be finite and non-negative, got {value}")]
    InvalidCoefficient { name: String, value: f64 },
    #[error("expected {expected} coefficients for {levels} levels, got {got}")]
    WrongLength { expected: usize, got: usize, levels: usize },
}

/// Model coefficients in SI units (J, J/FLOP, J/byte).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoefficients {
    pub class: Option<HardwareClass>,
    /// Memory level labels, fastest first; `a` and `m` follow this order.
    pub levels: Vec<String>,
    /// Per experiment.
    pub k_e: f64,
    /// Per pass.
    pub k_p: f64,
    /// Per FLOP.
    pub k_o: f64,
    /// Per layer per pass.
    pub k_d: f64,
    /// Per access, by level.
    pub a: Vec<f64>,
    /// Per byte accessed, by level.
    pub m: Vec<f64>,
}

impl EnergyCoefficients {
    pub fn zeros(levels: &[String]) -> Self {
        EnergyCoefficients {
            class: None,
            levels: levels.to_vec(),
            k_e: 0.0,
            k_p: 0.0,
            k_o: 0.0,
            k_d: 0.0,
            a: vec![0.0; levels.len()],
            m: vec![0.0; levels.len()],
        }
    }

    pub fn len_for(levels: usize) -> usize {
        SCALAR_COEFFICIENTS + 2 * levels
    }

    /// `[k_e, k_p, k_o, k_d, a_L1, …, m_L1, …]`
    pub fn names_for(levels: &[String]) -> Vec<String> {
        let mut names: Vec<String> = ["k_e", "k_p", "k_o", "k_d"].iter().map(|s| s.to_string()).collect();
        names.extend(levels.iter().map(|l| format!("a_{l}")));
        names.extend(levels.iter().map(|l| format!("m_{l}")));
        names
    }

    pub fn names(&self) -> Vec<String> {
        Self::names_for(&self.levels)
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = vec![self.k_e, self.k_p, self.k_o, self.k_d];
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.m);
        v
    }

    pub fn from_vector(levels: &[String], k: &[f64]) -> Result<Self, EnergyError> {
        let expected = Self::len_for(levels.len());
        if k.len() != expected {
            return Err(EnergyError::WrongLength { expected, got: k.len(), levels: levels.len() });
        }
        let c = levels.len();
        let coeffs = EnergyCoefficients {
            class: None,
            levels: levels.to_vec(),
            k_e: k[0],
            k_p: k[1],
            k_o: k[2],
            k_d: k[3],
            a: k[4..4 + c].to_vec(),
            m: k[4 + c..].to_vec(),
        };
        coeffs.validate()?;
        Ok(coeffs)
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        let expected = self.levels.len();
        if self.a.len() != expected || self.m.len() != expected {
            return Err(EnergyError::WrongLength {
                expected: Self::len_for(expected),
                got: SCALAR_COEFFICIENTS + self.a.len() + self.m.len(),
                levels: expected,
            });
        }
        for (name, value) in self.names().into_iter().zip(self.to_vector()) {
            if !(value.is_finite() && value >= 0.0) {
                return Err(EnergyError::InvalidCoefficient { name, value });
            }
        }
        Ok(())
    }

    /// Coefficients apply only to hardware with the same level labels, in order.
    pub fn check_levels(&self, hw: &HardwareSpec) -> Result<(), EnergyError> {
        let hardware = hw.labels();
        if hardware != self.levels {
            return Err(EnergyError::LevelMismatch { coefficients: self.levels.clone(), hardware });
        }
        Ok(())
    }
}

/// Energy of one access to `size` bytes resident at `level`.
pub fn phi(size: u64, level: usize, coeffs: &EnergyCoefficients) -> f64 {
    coeffs.a[level] + coeffs.m[level] * size as f64
}

/// Epoch and batch counts of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub epochs: u64,
    pub train_batches: u64,
    pub test_batches: u64,
}

impl RunCounts {
    pub fn new(epochs: u64, train_batches: u64, test_batches: u64) -> Self {
        RunCounts { epochs, train_batches, test_batches }
    }

    /// Batch counts implied by the task's data sizes and batch size.
    pub fn for_task(task: &TaskSpec, epochs: u64) -> Self {
        RunCounts::new(epochs, task.train_batches(), task.test_batches())
    }

    /// Passes per epoch: 2·h_t + h_s.
    pub fn passes_per_epoch(&self) -> u64 {
        2 * self.train_batches + self.test_batches
    }
}

/// Everything about one configuration the model needs besides counts and
/// coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeledRun {
    pub working_sets: WorkingSets,
    pub placement: Placement,
    pub ops: OpCounts,
    pub layers: usize,
}

impl ModeledRun {
    pub fn new(arch: &NetworkArchitecture, task: &TaskSpec, hw: &HardwareSpec) -> Self {
        Self::with_mode(arch, task, hw, PlacementMode::WholeSet)
    }

    pub fn with_mode(arch: &NetworkArchitecture, task: &TaskSpec, hw: &HardwareSpec, mode: PlacementMode) -> Self {
        let working_sets = compute_working_sets(arch, task);
        let placement = place_working_sets_with(&working_sets, hw, mode);
        ModeledRun { working_sets, placement, ops: count_ops(arch, task), layers: arch.depth() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    TrainForward,
    TrainBackward,
    TestForward,
}

pub fn pass_energy(kind: PassKind, run: &ModeledRun, coeffs: &EnergyCoefficients) -> f64 {
    let ws = &run.working_sets;
    let p = &run.placement;
    let inter_layer: f64 = ws.s_t.iter().zip(&p.t_layers).map(|(&s, &c)| phi(s, c, coeffs)).sum();
    let fixed = coeffs.k_p + coeffs.k_d * run.layers as f64 + inter_layer;
    match kind {
        PassKind::TrainForward => {
            fixed + coeffs.k_o * run.ops.forward as f64 + phi(ws.s_d, p.d, coeffs) + phi(ws.s_f, p.f, coeffs)
        }
        PassKind::TestForward => {
            fixed
                + coeffs.k_o * run.ops.forward as f64
                + phi(ws.s_d, p.d, coeffs)
                + phi(ws.s_f_prime, p.f_prime, coeffs)
        }
        PassKind::TrainBackward => fixed + coeffs.k_o * run.ops.backward as f64 + phi(ws.s_b, p.b, coeffs),
    }
}

/// Modeled energy of a whole experiment.
pub fn total_energy(counts: RunCounts, run: &ModeledRun, coeffs: &EnergyCoefficients) -> f64 {
    let train = pass_energy(PassKind::TrainForward, run, coeffs) + pass_energy(PassKind::TrainBackward, run, coeffs);
    let test = pass_energy(PassKind::TestForward, run, coeffs);
    coeffs.k_e + counts.epochs as f64 * (counts.train_batches as f64 * train + counts.test_batches as f64 * test)
}

/// Per-experiment weights aligned with the coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow(pub Vec<f64>);

impl DesignRow {
    pub fn levels(&self) -> usize {
        (self.0.len() - SCALAR_COEFFICIENTS) / 2
    }

    pub fn dot(&self, k: &[f64]) -> f64 {
        self.0.iter().zip(k).map(|(x, y)| x * y).sum()
    }

    pub fn predict(&self, coeffs: &EnergyCoefficients) -> f64 {
        self.dot(&coeffs.to_vector())
    }
}

pub fn build_design_row(counts: RunCounts, run: &ModeledRun, n_levels: usize) -> DesignRow {
    let n = counts.epochs as f64;
    let ht = counts.train_batches as f64;
    let hs = counts.test_batches as f64;
    let passes = n * counts.passes_per_epoch() as f64;
    let ws = &run.working_sets;
    let p = &run.placement;

    let mut row = vec![0.0; EnergyCoefficients::len_for(n_levels)];
    row[0] = 1.0;
    row[1] = passes;
    row[2] = n * ((ht + hs) * run.ops.forward as f64 + ht * run.ops.backward as f64);
    row[3] = passes * run.layers as f64;

    let mut access = |level: usize, times: f64, bytes: u64| {
        row[SCALAR_COEFFICIENTS + level] += times;
        row[SCALAR_COEFFICIENTS + n_levels + level] += times * bytes as f64;
    };
    access(p.d, n * (ht + hs), ws.s_d);
    access(p.f, n * ht, ws.s_f);
    access(p.b, n * ht, ws.s_b);
    access(p.f_prime, n * hs, ws.s_f_prime);
    for (&s, &c) in ws.s_t.iter().zip(&p.t_layers) {
        access(c, passes, s);
    }
    DesignRow(row)
}

/// Contribution of each coefficient group to a modeled total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub experiment_overhead: f64,
    pub pass_overhead: f64,
    pub operations: f64,
    pub layer_overhead: f64,
    /// `(label, access term, byte term)` per level.
    pub levels: Vec<(String, f64, f64)>,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn new(row: &DesignRow, coeffs: &EnergyCoefficients) -> Self {
        let k = coeffs.to_vector();
        let term = |i: usize| row.0[i] * k[i];
        let c = coeffs.levels.len();
        let levels = coeffs
            .levels
            .iter()
            .enumerate()
            .map(|(i, label)| (label.clone(), term(SCALAR_COEFFICIENTS + i), term(SCALAR_COEFFICIENTS + c + i)))
            .collect();
        EnergyBreakdown {
            experiment_overhead: term(0),
            pass_overhead: term(1),
            operations: term(2),
            layer_overhead: term(3),
            levels,
            total: row.dot(&k),
        }
    }

    pub fn sum_of_terms(&self) -> f64 {
        self.experiment_overhead
            + self.pass_overhead
            + self.operations
            + self.layer_overhead
            + self.levels.iter().map(|(_, a, m)| a + m).sum::<f64>()
    }
}
