use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::stats;

/// Disjoint patient-id sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl PatientSplit {
    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.val) && self.train.is_disjoint(&self.test) && self.val.is_disjoint(&self.test)
    }
}

/// Orders patients by a seeded hash of their id and cuts the ordering at
/// `round(f_train * n)` and `round((f_train + f_val) * n)`.
pub fn patient_split<'a, I>(patients: I, seed: u64, fractions: [f64; 3]) -> PatientSplit
where
    I: IntoIterator<Item = &'a str>,
{
    let unique: BTreeSet<&str> = patients.into_iter().collect();
    let mut keyed: Vec<(u64, &str)> = unique
        .into_iter()
        .map(|id| (stats::derive_seed(seed, stats::fnv1a(id.as_bytes())), id))
        .collect();
    keyed.sort();
    let n = keyed.len() as f64;
    let total: f64 = fractions.iter().sum();
    let a = ((fractions[0] / total) * n).round() as usize;
    let b = (((fractions[0] + fractions[1]) / total) * n).round() as usize;
    let take = |r: std::ops::Range<usize>| keyed[r].iter().map(|(_, id)| id.to_string()).collect();
    let split = PatientSplit {
        train: take(0..a),
        val: take(a..b.max(a)),
        test: take(b.max(a)..keyed.len()),
    };
    assert!(split.is_disjoint(), "patient split leaked across partitions");
    split
}
