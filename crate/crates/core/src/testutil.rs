//! Proptest strategies shared by the unit tests.

use proptest::prelude::*;

use crate::arch::{solve_widths, NetworkArchitecture, ShapeFamily, TaskSpec};
use crate::energy_model::{EnergyCoefficients, ModeledRun, RunCounts};
use crate::worksets::{HardwareClass, HardwareSpec, MemoryLevel};

const MIB: u64 = 1 << 20;

pub fn any_hardware() -> impl Strategy<Value = HardwareSpec> {
    (1u32..400, prop::collection::vec((1u64..(64 * MIB), any::<bool>(), 1u32..64), 0..4)).prop_map(
        |(n_units, levels)| {
            let mut out: Vec<MemoryLevel> = levels
                .into_iter()
                .enumerate()
                .map(|(i, (cap, shared, k))| {
                    let label = format!("L{}", i + 1);
                    if shared {
                        MemoryLevel::shared(&label, Some(cap), k.min(n_units))
                    } else {
                        MemoryLevel::per_unit(&label, cap)
                    }
                })
                .collect();
            out.push(MemoryLevel::shared("RAM", None, n_units));
            HardwareSpec { name: "random".into(), class: HardwareClass::Cpu, n_units, idle_power_w: 0.0, levels: out }
        },
    )
}

pub fn any_shape() -> impl Strategy<Value = ShapeFamily> {
    prop::sample::select(ShapeFamily::SWEEP.to_vec())
}

pub fn any_task() -> impl Strategy<Value = TaskSpec> {
    (
        1usize..800,
        1usize..20,
        1u64..200_000,
        1u64..50_000,
        prop::sample::select(vec![1u64, 32, 256, 1024]),
        prop::sample::select(vec![2u64, 4, 8]),
    )
        .prop_map(|(n_features, n_outputs, n_train, n_test, batch_size, dtype_bytes)| TaskSpec {
            n_features,
            n_outputs,
            n_train,
            n_test,
            batch_size,
            dtype_bytes,
        })
}

pub fn any_architecture() -> impl Strategy<Value = (NetworkArchitecture, TaskSpec)> {
    (any_shape(), 2usize..12, 5u32..24, any_task()).prop_map(|(shape, depth, log_ntp, task)| {
        let target = 1u64 << log_ntp;
        let arch = solve_widths(shape, depth, target, &task).unwrap_or_else(|_| NetworkArchitecture {
            input_width: task.n_features,
            layer_widths: shape.widths(depth, 1, task.n_outputs),
            residual: shape.is_residual(),
        });
        (arch, task)
    })
}

pub fn coefficients_for(levels: &[String]) -> impl Strategy<Value = EnergyCoefficients> {
    let n = EnergyCoefficients::len_for(levels.len());
    let levels = levels.to_vec();
    prop::collection::vec(prop_oneof![Just(0.0), 1e-12f64..1e3], n)
        .prop_map(move |k| EnergyCoefficients::from_vector(&levels, &k).unwrap())
}

#[derive(Debug, Clone)]
pub struct Case {
    pub run: ModeledRun,
    pub counts: RunCounts,
    pub coeffs: EnergyCoefficients,
}

pub fn any_case() -> impl Strategy<Value = Case> {
    (any_architecture(), any_hardware(), 1u64..3000, 1u64..800, 0u64..200).prop_flat_map(
        |((arch, task), hw, epochs, ht, hs)| {
            let run = ModeledRun::new(&arch, &task, &hw);
            let counts = RunCounts::new(epochs, ht, hs);
            coefficients_for(&hw.labels()).prop_map(move |coeffs| Case { run: run.clone(), counts, coeffs })
        },
    )
}
