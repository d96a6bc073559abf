//! Blinded expert error annotation: sessions, seeded per-annotator queues,
//! the five-category error taxonomy, error averages and agreement.

mod alpha;
mod store;
mod summary;

pub use alpha::{
    alpha_from_units, builtin_levels, krippendorff_alpha, units_from_records, AlphaOutcome,
    Distance, IntervalDistance, LevelRegistry, NominalDistance, OrdinalDistance, RatioDistance,
};
pub use store::{AnnotatorProgress, Progress, SessionStore};
pub use summary::{error_summary, SummaryRow};

use crate::digest::hash_fields;
use crate::promptkit::MethodFlags;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

/// Clinically significant errors in one generated report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorCounts {
    pub false_prediction: u32,
    pub omission: u32,
    pub wrong_location: u32,
    pub wrong_severity: u32,
    pub absent_comparison: u32,
}

impl ErrorCounts {
    pub const fn new(
        false_prediction: u32,
        omission: u32,
        wrong_location: u32,
        wrong_severity: u32,
        absent_comparison: u32,
    ) -> Self {
        Self {
            false_prediction,
            omission,
            wrong_location,
            wrong_severity,
            absent_comparison,
        }
    }

    pub fn total(&self) -> u64 {
        [
            self.false_prediction,
            self.omission,
            self.wrong_location,
            self.wrong_severity,
            self.absent_comparison,
        ]
        .iter()
        .map(|&c| u64::from(c))
        .sum()
    }
}

/// Counts as submitted, before range checks. Signed so that a negative
/// count is reported as a validation failure rather than a parse failure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsInput {
    pub false_prediction: i64,
    pub omission: i64,
    pub wrong_location: i64,
    pub wrong_severity: i64,
    pub absent_comparison: i64,
}

impl CountsInput {
    pub fn validate(&self) -> Result<ErrorCounts, EvalError> {
        let check = |name: &str, v: i64| -> Result<u32, EvalError> {
            u32::try_from(v).map_err(|_| {
                EvalError::Validation(format!("{name} must be a non-negative integer, got {v}"))
            })
        };
        Ok(ErrorCounts {
            false_prediction: check("false_prediction", self.false_prediction)?,
            omission: check("omission", self.omission)?,
            wrong_location: check("wrong_location", self.wrong_location)?,
            wrong_severity: check("wrong_severity", self.wrong_severity)?,
            absent_comparison: check("absent_comparison", self.absent_comparison)?,
        })
    }
}

impl From<ErrorCounts> for CountsInput {
    fn from(c: ErrorCounts) -> Self {
        Self {
            false_prediction: c.false_prediction.into(),
            omission: c.omission.into(),
            wrong_location: c.wrong_location.into(),
            wrong_severity: c.wrong_severity.into(),
            absent_comparison: c.absent_comparison.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub annotator_id: String,
    pub item_id: String,
    pub counts: ErrorCounts,
    pub submitted_at: String,
}

/// One generated report entering a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub study_id: String,
    pub model: String,
    pub flags: MethodFlags,
    pub output_text: String,
    pub references: Vec<String>,
    pub image_path: Option<PathBuf>,
}

/// What an annotator is shown. Carries nothing that identifies the model,
/// the method or the study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub item_id: String,
    pub candidate: String,
    pub references: Vec<String>,
    pub has_image: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenItem {
    pub model: String,
    pub flags: MethodFlags,
    pub study_id: String,
}

/// Item id to origin. Kept apart from the session and read only when
/// summarizing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnblindingMap {
    pub session_id: String,
    pub items: BTreeMap<String, HiddenItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSession {
    pub session_id: String,
    pub seed: u64,
    pub items: BTreeMap<String, BlindedItem>,
    /// Served order per annotator.
    pub queues: BTreeMap<String, Vec<String>>,
    /// Image per item, served by item id and never listed in payloads.
    pub images: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no generations to evaluate")]
    EmptyGenerations,
    #[error("no annotators")]
    NoAnnotators,
    #[error("annotator {0:?} listed twice")]
    DuplicateAnnotator(String),
    #[error("{model} ({method}) on study {study_id} listed twice")]
    DuplicateItem {
        model: String,
        method: String,
        study_id: String,
    },
    #[error("session {0:?} already exists")]
    SessionExists(String),
    #[error("session {0:?} not found")]
    SessionNotFound(String),
    #[error("annotator {0:?} is not part of this session")]
    UnknownAnnotator(String),
    #[error("item {item_id:?} is not in the queue of {annotator_id:?}")]
    ItemNotFound {
        annotator_id: String,
        item_id: String,
    },
    #[error("{annotator_id:?} already annotated item {item_id:?}")]
    Conflict {
        annotator_id: String,
        item_id: String,
    },
    #[error("invalid annotation: {0}")]
    Validation(String),
    #[error("no annotations")]
    NoAnnotations,
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Seed for one annotator's queue, derived from the session seed and the
/// annotator id.
fn annotator_seed(seed: u64, annotator_id: &str) -> u64 {
    let h = hash_fields(["queue", &seed.to_string(), annotator_id]);
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

/// Assigns opaque item ids and a seeded permutation per annotator. Ids are
/// digests of the origin plus session and seed, so neither they nor their
/// sort order reveal which model or method produced the text.
pub fn create_session(
    session_id: &str,
    generations: &[Generation],
    annotator_ids: &[String],
    seed: u64,
) -> Result<(EvalSession, UnblindingMap), EvalError> {
    if generations.is_empty() {
        return Err(EvalError::EmptyGenerations);
    }
    if annotator_ids.is_empty() {
        return Err(EvalError::NoAnnotators);
    }
    let mut seen = BTreeSet::new();
    for a in annotator_ids {
        if !seen.insert(a.as_str()) {
            return Err(EvalError::DuplicateAnnotator(a.clone()));
        }
    }

    let mut items = BTreeMap::new();
    let mut images = BTreeMap::new();
    let mut unblinding = UnblindingMap {
        session_id: session_id.to_string(),
        items: BTreeMap::new(),
    };
    let seed_s = seed.to_string();
    for g in generations {
        let label = g.flags.label();
        let digest = hash_fields(["item", session_id, &seed_s, &g.model, &label, &g.study_id]);
        let item_id = format!("item-{}", &digest[..16]);
        if unblinding.items.contains_key(&item_id) {
            return Err(EvalError::DuplicateItem {
                model: g.model.clone(),
                method: label,
                study_id: g.study_id.clone(),
            });
        }
        items.insert(
            item_id.clone(),
            BlindedItem {
                item_id: item_id.clone(),
                candidate: g.output_text.clone(),
                references: g.references.clone(),
                has_image: g.image_path.is_some(),
            },
        );
        if let Some(p) = &g.image_path {
            images.insert(item_id.clone(), p.clone());
        }
        unblinding.items.insert(
            item_id,
            HiddenItem {
                model: g.model.clone(),
                flags: g.flags,
                study_id: g.study_id.clone(),
            },
        );
    }

    let ordered: Vec<String> = items.keys().cloned().collect();
    let queues = annotator_ids
        .iter()
        .map(|a| {
            let mut q = ordered.clone();
            q.shuffle(&mut ChaCha8Rng::seed_from_u64(annotator_seed(seed, a)));
            (a.clone(), q)
        })
        .collect();
    Ok((
        EvalSession {
            session_id: session_id.to_string(),
            seed,
            items,
            queues,
            images,
        },
        unblinding,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn generations(n: usize) -> Vec<Generation> {
        (0..n)
            .map(|i| Generation {
                study_id: format!("s{}", i / 2),
                model: if i % 2 == 0 { "CXR-LLaVA" } else { "MAIRA2" }.into(),
                flags: MethodFlags::ALL[i % 8],
                output_text: format!("Findings: report {i}."),
                references: vec![format!("reference {i}")],
                image_path: None,
            })
            .collect()
    }

    fn annotators() -> Vec<String> {
        ["r1", "r2", "r3"].map(String::from).to_vec()
    }

    #[test]
    fn queues_are_seeded_permutations() {
        let (s, _) = create_session("x", &generations(8), &annotators(), 1).unwrap();
        let (again, _) = create_session("x", &generations(8), &annotators(), 1).unwrap();
        assert_eq!(s, again);
        let ids: BTreeSet<&String> = s.items.keys().collect();
        for q in s.queues.values() {
            assert_eq!(q.len(), 8);
            assert_eq!(q.iter().collect::<BTreeSet<_>>(), ids);
        }
        let distinct: BTreeSet<&Vec<String>> = s.queues.values().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn seed_changes_some_order() {
        let (a, _) = create_session("x", &generations(8), &annotators(), 1).unwrap();
        let (b, _) = create_session("x", &generations(8), &annotators(), 2).unwrap();
        let order = |s: &EvalSession| -> Vec<Vec<String>> {
            s.queues
                .values()
                .map(|q| q.iter().map(|id| s.items[id].candidate.clone()).collect())
                .collect()
        };
        assert_ne!(order(&a), order(&b));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            create_session("x", &[], &annotators(), 1).unwrap_err(),
            EvalError::EmptyGenerations
        );
        assert_eq!(
            create_session("x", &generations(2), &[], 1).unwrap_err(),
            EvalError::NoAnnotators
        );
        let dup = vec![generations(1)[0].clone(), generations(1)[0].clone()];
        assert!(matches!(
            create_session("x", &dup, &annotators(), 1),
            Err(EvalError::DuplicateItem { .. })
        ));
    }

    #[test]
    fn counts_validation() {
        let ok = CountsInput {
            false_prediction: 1,
            wrong_location: 1,
            ..Default::default()
        };
        assert_eq!(ok.validate().unwrap().total(), 2);
        let neg = CountsInput {
            omission: -1,
            ..Default::default()
        };
        assert!(matches!(neg.validate(), Err(EvalError::Validation(m)) if m.contains("omission")));
    }
}
