//! Krippendorff's alpha via the coincidence matrix. The measurement level
//! is a distance strategy looked up by name.

use super::AnnotationRecord;
use crate::registry::Registry;
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Squared difference function between two observed values.
pub trait Distance: Send + Sync {
    /// `values` are the distinct pairable values in ascending order and
    /// `marginals[i]` how often `values[i]` occurs among pairable values.
    fn delta2(&self, values: &[f64], marginals: &[f64], c: usize, k: usize) -> f64;
}

pub struct NominalDistance;
pub struct OrdinalDistance;
pub struct IntervalDistance;
pub struct RatioDistance;

impl Distance for NominalDistance {
    fn delta2(&self, _: &[f64], _: &[f64], c: usize, k: usize) -> f64 {
        if c == k {
            0.0
        } else {
            1.0
        }
    }
}

impl Distance for OrdinalDistance {
    fn delta2(&self, _: &[f64], n: &[f64], c: usize, k: usize) -> f64 {
        let (lo, hi) = (c.min(k), c.max(k));
        let span: f64 = n[lo..=hi].iter().sum::<f64>() - (n[lo] + n[hi]) / 2.0;
        span * span
    }
}

impl Distance for IntervalDistance {
    fn delta2(&self, v: &[f64], _: &[f64], c: usize, k: usize) -> f64 {
        (v[c] - v[k]).powi(2)
    }
}

impl Distance for RatioDistance {
    fn delta2(&self, v: &[f64], _: &[f64], c: usize, k: usize) -> f64 {
        let sum = v[c] + v[k];
        if sum == 0.0 {
            0.0
        } else {
            ((v[c] - v[k]) / sum).powi(2)
        }
    }
}

pub type LevelRegistry = Registry<dyn Distance>;

/// `nominal`, `ordinal`, `interval` and `ratio`.
pub fn builtin_levels() -> LevelRegistry {
    let mut reg: LevelRegistry = Registry::new("measurement level");
    reg.register("nominal", Arc::new(NominalDistance));
    reg.register("ordinal", Arc::new(OrdinalDistance));
    reg.register("interval", Arc::new(IntervalDistance));
    reg.register("ratio", Arc::new(RatioDistance));
    reg
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AlphaOutcome {
    Defined {
        alpha: f64,
        pairable_values: usize,
    },
    /// No pairable values, or no expected disagreement.
    Undefined {
        reason: String,
    },
}

impl AlphaOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Defined { alpha, .. } => Some(*alpha),
            Self::Undefined { .. } => None,
        }
    }
}

/// Alpha over units, each listing the values it received (missing ones
/// simply absent). Units with fewer than two values are not pairable and
/// are ignored.
pub fn alpha_from_units(units: &[Vec<f64>], level: &dyn Distance) -> AlphaOutcome {
    let pairable: Vec<&Vec<f64>> = units.iter().filter(|u| u.len() >= 2).collect();
    let mut values: Vec<f64> = pairable.iter().flat_map(|u| u.iter().copied()).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let idx = |x: f64| {
        values
            .binary_search_by(|v| v.total_cmp(&x))
            .expect("value collected")
    };

    let q = values.len();
    let mut o = vec![vec![0.0; q]; q];
    for u in &pairable {
        let w = 1.0 / (u.len() as f64 - 1.0);
        for (i, &a) in u.iter().enumerate() {
            for (j, &b) in u.iter().enumerate() {
                if i != j {
                    o[idx(a)][idx(b)] += w;
                }
            }
        }
    }
    let marginals: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    if n < 2.0 {
        return AlphaOutcome::Undefined {
            reason: "fewer than two pairable values".into(),
        };
    }

    let mut d_o = 0.0;
    let mut d_e = 0.0;
    for c in 0..q {
        for k in 0..q {
            let d = level.delta2(&values, &marginals, c, k);
            d_o += o[c][k] * d;
            d_e += marginals[c] * marginals[k] * d;
        }
    }
    d_o /= n;
    d_e /= n * (n - 1.0);
    if d_e == 0.0 {
        return AlphaOutcome::Undefined {
            reason: "no expected disagreement (all pairable values identical)".into(),
        };
    }
    AlphaOutcome::Defined {
        alpha: 1.0 - d_o / d_e,
        pairable_values: n.round() as usize,
    }
}

/// One unit per item holding each annotator's total error count.
pub fn units_from_records(records: &[AnnotationRecord]) -> Vec<Vec<f64>> {
    let mut by_item: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in records {
        by_item
            .entry(&r.item_id)
            .or_default()
            .insert(&r.annotator_id, r.counts.total() as f64);
    }
    by_item
        .into_values()
        .map(|m| m.into_values().collect())
        .collect()
}

/// Agreement on per-item total error counts.
pub fn krippendorff_alpha(records: &[AnnotationRecord], level: &dyn Distance) -> AlphaOutcome {
    alpha_from_units(&units_from_records(records), level)
}
