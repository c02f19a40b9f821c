//! Patient-level train/val/test assignment. Every sweep and frame of a
//! patient inherits the patient's split, so no frame-level leakage is
//! possible by construction.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Format(format!("unknown split {other:?}"))),
        }
    }
}

pub type SplitAssignment = HashMap<String, Split>;

/// Patient counts per split under largest-remainder rounding.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let quota: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // distribute leftovers by descending fractional part; ties go to the
    // earlier split (train, then val, then test)
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quota[a] - quota[a].floor();
        let fb = quota[b] - quota[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..n - assigned {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Randomly assign patients to splits honoring the ratios by patient
/// count. Deterministic for a fixed seed and patient list.
pub fn split_patients(
    patients: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, DataError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Format(format!("split ratios sum to {sum}, expected 1")));
    }
    if ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(DataError::Format("negative split ratio".into()));
    }
    let nonzero = [ratios.0, ratios.1, ratios.2].iter().filter(|&&r| r > 0.0).count();
    if patients.len() < nonzero {
        return Err(DataError::Format(format!(
            "{} patients cannot cover {nonzero} nonzero splits",
            patients.len()
        )));
    }
    let mut shuffled = patients.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let counts = split_counts(patients.len(), ratios);
    let mut assignment = SplitAssignment::with_capacity(patients.len());
    let mut it = shuffled.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for _ in 0..count {
            let pid = it.next().expect("counts sum to n");
            assignment.insert(pid, split);
        }
    }
    Ok(assignment)
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.10, 0.20);
