//! Per-study records fused from box annotations, fixation logs and
//! dictated reports.

mod canonical;
mod ingest;
mod stats;

pub use canonical::{export_canonical, load_canonical, read_canonical, write_canonical};
pub use ingest::{
    resolve_image_path, AdapterConfig, AffineTransform, BoxColumns, CorpusSources, FixationColumns,
    ImageColumns, ReportColumns, SidecarColumns, SourcePaths,
};
pub use stats::{compute_corpus_stats, read_sidecar, CorpusStats, SectionText, Sidecar};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

/// Axis-aligned abnormality box in source image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub label: String,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, label: impl Into<String>) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            label: label.into(),
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Closed-interval membership on all four edges.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }
}

/// One gaze fixation. `ordinal` preserves temporal order within a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub duration_s: f64,
    pub ordinal: u32,
}

impl Fixation {
    pub fn new(x: f64, y: f64, duration_s: f64, ordinal: u32) -> Self {
        Self {
            x,
            y,
            duration_s,
            ordinal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictatedReport {
    pub text: String,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    /// As written in the image manifest, relative to the manifest directory
    /// unless absolute.
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
    pub fixations: Vec<Fixation>,
    pub references: Vec<DictatedReport>,
}

impl StudyRecord {
    pub fn total_fixation_time(&self) -> f64 {
        self.fixations.iter().map(|f| f.duration_s).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DegenerateBox,
    BoxOutOfBounds,
    EmptyLabel,
    NonFiniteCoordinate,
    NonPositiveDuration,
    OrdinalOrder,
    NoReferences,
    EmptyReport,
    EmptyStudyId,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::DegenerateBox => "degenerate box",
            Rule::BoxOutOfBounds => "box outside image",
            Rule::EmptyLabel => "empty label",
            Rule::NonFiniteCoordinate => "non-finite coordinate",
            Rule::NonPositiveDuration => "non-positive duration",
            Rule::OrdinalOrder => "ordinals not strictly increasing",
            Rule::NoReferences => "no references",
            Rule::EmptyReport => "empty report text",
            Rule::EmptyStudyId => "empty study id",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: Rule,
    pub value: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.rule, self.value)
    }
}

fn describe_box(b: &BoundingBox) -> String {
    format!("({}, {}, {}, {}, {:?})", b.x1, b.y1, b.x2, b.y2, b.label)
}

/// Checks every record invariant. Each violation maps to exactly one rule.
pub fn validate_record(r: &StudyRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push =
        |field: String, rule: Rule, value: String| out.push(Violation { field, rule, value });

    if r.study_id.trim().is_empty() {
        push(
            "study_id".into(),
            Rule::EmptyStudyId,
            format!("{:?}", r.study_id),
        );
    }

    let (w, h) = (r.width as f64, r.height as f64);
    for (i, b) in r.boxes.iter().enumerate() {
        let field = format!("boxes[{i}]");
        if ![b.x1, b.y1, b.x2, b.y2].iter().all(|c| c.is_finite()) {
            push(field.clone(), Rule::NonFiniteCoordinate, describe_box(b));
        } else if !(b.x1 < b.x2 && b.y1 < b.y2) {
            push(field.clone(), Rule::DegenerateBox, describe_box(b));
        } else if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
            push(
                field.clone(),
                Rule::BoxOutOfBounds,
                format!("{} in {}x{}", describe_box(b), r.width, r.height),
            );
        }
        if b.label.trim().is_empty() {
            push(
                format!("{field}.label"),
                Rule::EmptyLabel,
                format!("{:?}", b.label),
            );
        }
    }

    let mut prev: Option<u32> = None;
    for (j, g) in r.fixations.iter().enumerate() {
        let field = format!("fixations[{j}]");
        if !(g.x.is_finite() && g.y.is_finite()) {
            push(
                field.clone(),
                Rule::NonFiniteCoordinate,
                format!("({}, {})", g.x, g.y),
            );
        }
        if !(g.duration_s > 0.0 && g.duration_s.is_finite()) {
            push(
                format!("{field}.duration_s"),
                Rule::NonPositiveDuration,
                g.duration_s.to_string(),
            );
        }
        if let Some(p) = prev {
            if g.ordinal <= p {
                push(
                    format!("{field}.ordinal"),
                    Rule::OrdinalOrder,
                    format!("{} after {}", g.ordinal, p),
                );
            }
        }
        prev = Some(g.ordinal);
    }

    if r.references.is_empty() {
        push("references".into(), Rule::NoReferences, "[]".into());
    }
    for (k, rep) in r.references.iter().enumerate() {
        if rep.text.trim().is_empty() {
            push(
                format!("references[{k}].text"),
                Rule::EmptyReport,
                format!("{:?}", rep.text),
            );
        }
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed row, field `{field}`: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        field: String,
        message: String,
    },
    #[error("study {study_id}: image {path} not found")]
    MissingImage { study_id: String, path: PathBuf },
    #[error("study {study_id}: image {path} does not decode: {message}")]
    ImageDecode {
        study_id: String,
        path: PathBuf,
        message: String,
    },
    #[error("study {study_id}: no references")]
    NoReferences { study_id: String },
    #[error("study {study_id}: not in image manifest")]
    UnknownStudy { study_id: String },
    #[error("study {study_id}: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid {
        study_id: String,
        violations: Vec<Violation>,
    },
    #[error("duplicate study id {0}")]
    DuplicateStudy(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Corpus-level check: every record valid and study ids unique.
pub fn validate_corpus(corpus: &[StudyRecord]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for r in corpus {
        if !seen.insert(r.study_id.as_str()) {
            return Err(CorpusError::DuplicateStudy(r.study_id.clone()));
        }
        let violations = validate_record(r);
        if !violations.is_empty() {
            return Err(CorpusError::Invalid {
                study_id: r.study_id.clone(),
                violations,
            });
        }
    }
    Ok(())
}
