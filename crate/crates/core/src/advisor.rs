//! Network sizing advice.
//!
//! Modeled energy per datum stays nearly flat while a working set fits in a
//! cache level and rises once it spills. Sizes whose working set just fills
//! or slightly overflows a level are therefore the candidates worth
//! training: as large as possible for the same per-datum cost.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::arch::{solve_widths, ArchError, NetworkArchitecture, ShapeFamily, TaskSpec};
use crate::energy_model::{total_energy, EnergyCoefficients, ModeledRun, RunCounts};
use crate::worksets::{compute_working_sets, HardwareSpec, WorkingSets};

pub const MIN_LOG2_NTP: u32 = 5;
pub const MAX_LOG2_NTP: u32 = 25;
pub const GRID_STEPS: [f64; 4] = [1.0, 1.25, 1.5, 1.75];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvisorError {
    #[error("epoch model needs at least two distinct NTP values, got {0}")]
    TooFewPoints(usize),
    #[error("epoch table row {row}: {reason}")]
    InvalidEpochPoint { row: usize, reason: String },
    #[error("epoch model gives a non-positive base {base} at NTP {ntp}")]
    InvalidEpochModel { ntp: u64, base: f64 },
    #[error("loss curve for NTP {ntp}: loss {loss} and energy {energy} must be positive")]
    InvalidLossPoint { ntp: u64, loss: f64, energy: f64 },
    #[error(transparent)]
    Arch(#[from] ArchError),
}

/// `epoch^(-1/3) = alpha·ln NTP + c`, where epoch is the loss-minimizing epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochModel {
    pub alpha: f64,
    pub c: f64,
}

impl EpochModel {
    /// Ordinary least squares in the transformed space over `(ntp, epoch)` pairs.
    pub fn fit(table: &[(u64, f64)]) -> Result<Self, AdvisorError> {
        for (i, &(ntp, epoch)) in table.iter().enumerate() {
            if ntp == 0 || !(epoch.is_finite() && epoch > 0.0) {
                return Err(AdvisorError::InvalidEpochPoint {
                    row: i + 1,
                    reason: format!("need NTP ≥ 1 and epoch > 0, got ({ntp}, {epoch})"),
                });
            }
        }
        let xs: Vec<f64> = table.iter().map(|&(ntp, _)| (ntp as f64).ln()).collect();
        let ys: Vec<f64> = table.iter().map(|&(_, e)| e.powf(-1.0 / 3.0)).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        if table.is_empty() || sxx == 0.0 {
            let mut distinct: Vec<u64> = table.iter().map(|p| p.0).collect();
            distinct.dedup();
            return Err(AdvisorError::TooFewPoints(distinct.len()));
        }
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let alpha = sxy / sxx;
        Ok(EpochModel { alpha, c: my - alpha * mx })
    }

    pub fn base(&self, ntp: u64) -> f64 {
        self.alpha * (ntp as f64).ln() + self.c
    }

    /// Predicted loss-minimizing epoch, rounded and at least 1.
    pub fn epochs(&self, ntp: u64) -> Result<u64, AdvisorError> {
        let base = self.base(ntp);
        if !(base > 0.0 && base.is_finite()) {
            return Err(AdvisorError::InvalidEpochModel { ntp, base });
        }
        Ok((base.powi(-3).round() as u64).max(1))
    }
}

/// Modeled training energy until the predicted loss-minimizing epoch.
pub fn energy_to_loss(
    task: &TaskSpec,
    arch: &NetworkArchitecture,
    hw: &HardwareSpec,
    coeffs: &EnergyCoefficients,
    model: &EpochModel,
) -> Result<f64, AdvisorError> {
    let ntp = crate::arch::count_parameters(arch);
    let epochs = model.epochs(ntp)?;
    let run = ModeledRun::new(arch, task, hw);
    Ok(total_energy(RunCounts::for_task(task, epochs), &run, coeffs))
}

/// Energy of one epoch, without the per-experiment overhead, per training example.
pub fn energy_per_datum(task: &TaskSpec, run: &ModeledRun, coeffs: &EnergyCoefficients) -> f64 {
    (total_energy(RunCounts::for_task(task, 1), run, coeffs) - coeffs.k_e) / task.n_train as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorSet {
    /// Backward pass: parameters, gradients and the batch's unit values.
    B,
    /// Forward-pass parameters.
    F,
    /// Largest inter-layer activation block.
    T,
}

impl AnchorSet {
    pub const ALL: [AnchorSet; 3] = [AnchorSet::B, AnchorSet::F, AnchorSet::T];

    /// `(replicated, distributed)` bytes of this set.
    pub fn footprint(self, ws: &WorkingSets) -> (u64, u64) {
        match self {
            AnchorSet::B => (ws.b_replicated(), ws.b_distributed()),
            AnchorSet::F => (ws.s_f, 0),
            AnchorSet::T => (0, ws.max_t()),
        }
    }
}

impl fmt::Display for AnchorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorSet::B => "b",
            AnchorSet::F => "f",
            AnchorSet::T => "t",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub ntp: u64,
    pub layer_widths: Vec<usize>,
    pub anchor_level: String,
    pub anchor_set: AnchorSet,
    /// Footprint of the anchor set at the anchor level, bytes.
    pub anchor_size: f64,
    pub capacity_bytes: u64,
    pub energy_per_datum_j: f64,
    pub epochs: Option<u64>,
    pub energy_to_loss_j: Option<f64>,
    pub rationale: String,
}

impl Recommendation {
    /// Sort key: energy to loss when an epoch model was given, else per datum.
    pub fn score(&self) -> f64 {
        self.energy_to_loss_j.unwrap_or(self.energy_per_datum_j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Advice {
    pub recommendations: Vec<Recommendation>,
    /// Why the list is empty, when it is.
    pub note: Option<String>,
}

/// A grid point that admits a network of the requested shape and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub arch: NetworkArchitecture,
    pub ntp: u64,
    pub working_sets: WorkingSets,
}

/// Target NTPs: powers of two from 2^5 to 2^25, each refined by
/// ×1.25, ×1.5 and ×1.75 below the next power.
pub fn ntp_grid() -> Vec<u64> {
    let max = 1u64 << MAX_LOG2_NTP;
    let mut grid: Vec<u64> = (MIN_LOG2_NTP..=MAX_LOG2_NTP)
        .flat_map(|p| GRID_STEPS.iter().map(move |s| ((1u64 << p) as f64 * s) as u64))
        .filter(|&n| n <= max)
        .collect();
    grid.dedup();
    grid
}

/// Solves an architecture for every grid target; targets the shape cannot
/// reach are skipped. Sizes depend only on task, shape and depth, so the
/// result can be reused across hardware.
pub fn candidates(task: &TaskSpec, shape: ShapeFamily, depth: usize) -> Result<Vec<Candidate>, AdvisorError> {
    task.validate()?;
    let mut out: Vec<Candidate> = Vec::new();
    for target in ntp_grid() {
        let arch = match solve_widths(shape, depth, target, task) {
            Ok(a) => a,
            Err(ArchError::InfeasibleTarget { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let ntp = crate::arch::count_parameters(&arch);
        if out.last().is_some_and(|c| c.ntp == ntp) {
            continue;
        }
        let working_sets = compute_working_sets(&arch, task);
        out.push(Candidate { arch, ntp, working_sets });
    }
    Ok(out)
}

/// For each bounded level and anchor set, the most efficient candidate whose
/// anchor footprint lies in `[capacity, 2·capacity]`, ranked by score.
pub fn recommend_from(
    candidates: &[Candidate],
    task: &TaskSpec,
    hw: &HardwareSpec,
    coeffs: &EnergyCoefficients,
    epoch_model: Option<&EpochModel>,
) -> Result<Advice, AdvisorError> {
    let mut recommendations = Vec::new();
    for level in 0..hw.top() {
        let Some(capacity) = hw.capacity(level) else { continue };
        let label = &hw.levels[level].label;
        for anchor in AnchorSet::ALL {
            let mut best: Option<Recommendation> = None;
            for cand in candidates {
                let (replicated, distributed) = anchor.footprint(&cand.working_sets);
                let size = hw.effective_size(level, replicated, distributed);
                if size < capacity as f64 || size > 2.0 * capacity as f64 {
                    continue;
                }
                let run = ModeledRun::new(&cand.arch, task, hw);
                let per_datum = energy_per_datum(task, &run, coeffs);
                let (epochs, to_loss) = match epoch_model {
                    Some(m) => {
                        let e = m.epochs(cand.ntp)?;
                        (Some(e), Some(total_energy(RunCounts::for_task(task, e), &run, coeffs)))
                    }
                    None => (None, None),
                };
                let rec = Recommendation {
                    ntp: cand.ntp,
                    layer_widths: cand.arch.layer_widths.clone(),
                    anchor_level: label.clone(),
                    anchor_set: anchor,
                    anchor_size: size,
                    capacity_bytes: capacity,
                    energy_per_datum_j: per_datum,
                    epochs,
                    energy_to_loss_j: to_loss,
                    rationale: format!(
                        "{anchor} occupies {:.2}× of {label} ({size:.0} of {capacity} B)",
                        size / capacity as f64
                    ),
                };
                if best.as_ref().is_none_or(|b| rec.score() < b.score()) {
                    best = Some(rec);
                }
            }
            recommendations.extend(best);
        }
    }
    recommendations.sort_by(|a, b| {
        a.score().total_cmp(&b.score()).then(a.ntp.cmp(&b.ntp)).then(a.anchor_level.cmp(&b.anchor_level))
    });
    let note = recommendations.is_empty().then(|| {
        format!(
            "no candidate NTP in 2^{MIN_LOG2_NTP}..2^{MAX_LOG2_NTP} puts a working set within 1–2× of any bounded level on {}",
            hw.name
        )
    });
    Ok(Advice { recommendations, note })
}

pub fn recommend_ntp(
    task: &TaskSpec,
    shape: ShapeFamily,
    depth: usize,
    hw: &HardwareSpec,
    coeffs: &EnergyCoefficients,
    epoch_model: Option<&EpochModel>,
) -> Result<Advice, AdvisorError> {
    let grid = candidates(task, shape, depth)?;
    recommend_from(&grid, task, hw, coeffs, epoch_model)
}

/// One training run's loss trajectory: `(test loss, cumulative energy J)`
/// in training order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub ntp: u64,
    pub points: Vec<(f64, f64)>,
}

/// Energy at which a curve first reaches `target`, interpolated linearly in
/// (log loss, log energy) over the first segment that brackets it.
pub fn energy_at_loss(points: &[(f64, f64)], target: f64) -> Option<f64> {
    if let Some(&(_, e)) = points.first().filter(|p| p.0 == target) {
        return Some(e);
    }
    points.windows(2).find_map(|seg| {
        let ((l0, e0), (l1, e1)) = (seg[0], seg[1]);
        if l1 == target {
            return Some(e1);
        }
        if !(l0 > target && target > l1) {
            return None;
        }
        let frac = (target.ln() - l0.ln()) / (l1.ln() - l0.ln());
        Some((e0.ln() + frac * (e1.ln() - e0.ln())).exp())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IsolossPoint {
    pub ntp: u64,
    pub energy_j: f64,
    /// Runs at this NTP that reached the target.
    pub runs: usize,
}

/// Energy to reach `target` per NTP: the median across that NTP's runs that
/// reach it. NTPs with no such run are left out.
pub fn isoloss_energy(curves: &[LossCurve], target: f64) -> Result<Vec<IsolossPoint>, AdvisorError> {
    let mut by_ntp: std::collections::BTreeMap<u64, Vec<f64>> = std::collections::BTreeMap::new();
    for curve in curves {
        for &(loss, energy) in &curve.points {
            if !(loss > 0.0 && energy > 0.0 && loss.is_finite() && energy.is_finite()) {
                return Err(AdvisorError::InvalidLossPoint { ntp: curve.ntp, loss, energy });
            }
        }
        if let Some(e) = energy_at_loss(&curve.points, target) {
            by_ntp.entry(curve.ntp).or_default().push(e);
        }
    }
    Ok(by_ntp
        .into_iter()
        .map(|(ntp, mut energies)| {
            energies.sort_by(f64::total_cmp);
            let n = energies.len();
            let median = if n % 2 == 1 { energies[n / 2] } else { 0.5 * (energies[n / 2 - 1] + energies[n / 2]) };
            IsolossPoint { ntp, energy_j: median, runs: n }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{bundled_coefficients, bundled_hardware};
    use crate::testutil::any_hardware;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn mnist_like() -> TaskSpec {
        TaskSpec::new(784, 10, 60_000, 10_000)
    }

    #[test]
    fn grid_shape() {
        let grid = ntp_grid();
        assert_eq!(grid.first(), Some(&32));
        assert_eq!(grid.last(), Some(&(1 << 25)));
        assert_eq!(grid.len(), 20 * 4 + 1);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn epoch_model_examples() {
        let flat = EpochModel { alpha: 0.0, c: 1.0 };
        assert_eq!(flat.epochs(1 << 10).unwrap(), 1);
        assert_eq!(flat.epochs(1 << 20).unwrap(), 1);
        let bad = EpochModel { alpha: -1.0, c: 1.0 };
        assert!(matches!(bad.epochs(1 << 10), Err(AdvisorError::InvalidEpochModel { .. })));
    }

    #[test]
    fn epoch_model_recovers_exact_table() {
        let truth = EpochModel { alpha: 0.02, c: 0.1 };
        let table: Vec<(u64, f64)> =
            [1u64 << 8, 1 << 12, 1 << 16, 1 << 20].iter().map(|&n| (n, truth.base(n).powi(-3))).collect();
        let fitted = EpochModel::fit(&table).unwrap();
        assert!((fitted.alpha - truth.alpha).abs() < 1e-12);
        assert!((fitted.c - truth.c).abs() < 1e-12);
        assert!(matches!(EpochModel::fit(&[(16, 3.0), (16, 4.0)]), Err(AdvisorError::TooFewPoints(1))));
    }

    #[test]
    fn epochs_shrink_as_networks_grow() {
        let m = EpochModel { alpha: 0.03, c: 0.05 };
        let mut last = u64::MAX;
        for p in 5..=25 {
            let e = m.epochs(1 << p).unwrap();
            assert!(e <= last);
            last = e;
        }
        assert!(m.epochs(1 << 25).unwrap() < m.epochs(1 << 5).unwrap());
    }

    #[test]
    fn energy_to_loss_with_single_epoch() {
        let task = mnist_like();
        let hw = bundled_hardware("cpu1").unwrap();
        let coeffs = bundled_coefficients("cpu").unwrap();
        let arch = solve_widths(ShapeFamily::Rectangle, 3, 1 << 14, &task).unwrap();
        let run = ModeledRun::new(&arch, &task, &hw);
        let one = total_energy(RunCounts::for_task(&task, 1), &run, &coeffs);
        let got = energy_to_loss(&task, &arch, &hw, &coeffs, &EpochModel { alpha: 0.0, c: 1.0 }).unwrap();
        assert_eq!(got, one);
        let half = EpochModel { alpha: 0.0, c: 0.5 };
        assert!(energy_to_loss(&task, &arch, &hw, &coeffs, &half).unwrap() > got);
    }

    #[test]
    fn isoloss_interpolation() {
        let curve = [(0.4, 100.0), (0.1, 1000.0)];
        let e = energy_at_loss(&curve, 0.2).unwrap();
        let want = 10f64.powf(2.0 + (0.2f64.log10() - 0.4f64.log10()) / (0.1f64.log10() - 0.4f64.log10()));
        assert!((e - want).abs() < 1e-9 * want);
        assert!((e - 316.2).abs() < 0.5);
        assert_eq!(energy_at_loss(&curve, 0.4), Some(100.0));
        assert_eq!(energy_at_loss(&curve, 0.1), Some(1000.0));
        assert_eq!(energy_at_loss(&curve, 0.05), None);
    }

    #[test]
    fn isoloss_first_bracket_and_median() {
        // noisy curve crossing 0.3 twice; the first crossing counts
        let noisy = [(0.5, 10.0), (0.25, 20.0), (0.35, 30.0), (0.2, 40.0)];
        let first = energy_at_loss(&noisy, 0.3).unwrap();
        assert!(first > 10.0 && first < 20.0);
        let curves = vec![
            LossCurve { ntp: 64, points: vec![(1.0, 1.0), (0.5, 2.0)] },
            LossCurve { ntp: 64, points: vec![(1.0, 3.0), (0.5, 4.0)] },
            LossCurve { ntp: 64, points: vec![(1.0, 5.0), (0.5, 9.0)] },
            LossCurve { ntp: 128, points: vec![(1.0, 1.0), (0.9, 2.0)] },
        ];
        let iso = isoloss_energy(&curves, 0.5).unwrap();
        assert_eq!(iso, vec![IsolossPoint { ntp: 64, energy_j: 4.0, runs: 3 }]);
        assert!(isoloss_energy(&curves, 0.01).unwrap().is_empty());
    }

    #[test]
    fn gpu_forward_anchor_band() {
        let task = mnist_like();
        let hw = bundled_hardware("gpu1").unwrap();
        let coeffs = bundled_coefficients("gpu").unwrap();
        let advice = recommend_ntp(&task, ShapeFamily::Rectangle, 3, &hw, &coeffs, None).unwrap();
        let l2 = advice
            .recommendations
            .iter()
            .find(|r| r.anchor_level == "L2" && r.anchor_set == AnchorSet::F)
            .expect("an f anchor at L2");
        let lo = 1.5 * (1u64 << 20) as f64;
        assert!(l2.ntp as f64 >= lo && l2.ntp as f64 <= 2.0 * lo, "{}", l2.ntp);
        // 2^21 parameters is inside the band
        let ws = compute_working_sets(&solve_widths(ShapeFamily::Rectangle, 3, 1 << 21, &task).unwrap(), &task);
        let size = hw.effective_size(1, ws.s_f, 0);
        assert!(size >= 6.0 * (1u64 << 20) as f64 && size <= 12.0 * (1u64 << 20) as f64);
    }

    #[test]
    fn exact_capacity_is_included() {
        let task = mnist_like();
        let hw = bundled_hardware("gpu1").unwrap();
        let coeffs = bundled_coefficients("gpu").unwrap();
        let grid = candidates(&task, ShapeFamily::Rectangle, 3).unwrap();
        let cand = grid.iter().find(|c| c.ntp >= 1 << 21).unwrap().clone();
        let mut exact = hw.clone();
        exact.levels[1].capacity_bytes = Some(cand.working_sets.s_f);
        let advice = recommend_from(std::slice::from_ref(&cand), &task, &exact, &coeffs, None).unwrap();
        assert!(advice
            .recommendations
            .iter()
            .any(|r| r.anchor_set == AnchorSet::F && r.anchor_size == r.capacity_bytes as f64));
    }

    #[test]
    fn nothing_in_range_gives_note() {
        let task = TaskSpec::new(2, 1, 10, 10);
        let mut hw = bundled_hardware("cpu1").unwrap();
        for level in &mut hw.levels[..3] {
            level.capacity_bytes = Some(1 << 40);
        }
        let coeffs = bundled_coefficients("cpu").unwrap();
        let advice = recommend_ntp(&task, ShapeFamily::Rectangle, 2, &hw, &coeffs, None).unwrap();
        assert!(advice.recommendations.is_empty());
        assert!(advice.note.is_some());
    }

    #[test]
    fn ranked_by_energy_to_loss_with_model() {
        let task = mnist_like();
        let hw = bundled_hardware("cpu1").unwrap();
        let coeffs = bundled_coefficients("cpu").unwrap();
        let model = EpochModel { alpha: 0.02, c: 0.05 };
        let advice = recommend_ntp(&task, ShapeFamily::Rectangle, 3, &hw, &coeffs, Some(&model)).unwrap();
        assert!(!advice.recommendations.is_empty());
        let scores: Vec<f64> = advice.recommendations.iter().map(|r| r.energy_to_loss_j.unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] <= w[1]));
    }

    fn shared_grid() -> &'static (TaskSpec, Vec<Candidate>) {
        static GRID: OnceLock<(TaskSpec, Vec<Candidate>)> = OnceLock::new();
        GRID.get_or_init(|| {
            let task = TaskSpec::new(64, 4, 20_000, 2_000);
            let grid = candidates(&task, ShapeFamily::Trapezoid, 4).unwrap();
            (task, grid)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn recommendations_satisfy_their_band(hw in any_hardware()) {
            let (task, grid) = shared_grid();
            let coeffs = EnergyCoefficients::zeros(&hw.labels());
            let advice = recommend_from(grid, task, &hw, &coeffs, None).unwrap();
            for r in &advice.recommendations {
                let cap = r.capacity_bytes as f64;
                prop_assert!(r.anchor_size >= cap && r.anchor_size <= 2.0 * cap, "{r:?}");
            }
        }
    }
}
