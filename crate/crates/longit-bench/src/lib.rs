//! Shared builders for the criterion benchmarks.

use std::collections::BTreeMap;

use longit::sim::{ArmSpec, DropoutSpec, SimSpec};
use longit::LongDataset;

/// A two-arm four-occasion trial from the random-intercept generator.
pub fn trial(n_subjects: usize, seed: u64) -> LongDataset {
    let spec = SimSpec {
        n_subjects,
        n_occasions: 4,
        arms: vec![
            ArmSpec {
                label: "C".into(),
                share: 0.5,
            },
            ArmSpec {
                label: "Z".into(),
                share: 0.5,
            },
        ],
        intercepts: vec![-1.0, -0.5, 0.0, 0.5],
        treatment_effects: BTreeMap::from([("Z".to_string(), vec![1.0; 4])]),
        sigma: 1.5,
        dropout: DropoutSpec {
            intercept: -2.0,
            prev_outcome: 1.0,
            treatment: BTreeMap::new(),
            time: vec![0.0, 0.0],
        },
        omega: 0.0,
        seed,
    };
    let complete = longit::simulate_complete(&spec).unwrap();
    longit::apply_dropout(&complete, &spec).unwrap()
}
