use super::ingest::read_rows;
use super::{CorpusError, SidecarColumns, StudyRecord};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Findings / impression sections of the original structured report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SectionText {
    pub findings: Option<String>,
    pub impression: Option<String>,
}

pub type Sidecar = HashMap<String, SectionText>;

pub fn read_sidecar(path: &Path, columns: &SidecarColumns) -> Result<Sidecar, CorpusError> {
    let mut out = Sidecar::new();
    for row in read_rows(path)? {
        let id = row.get(path, &columns.study_id)?.trim().to_string();
        let present = |col: &str| {
            row.fields
                .get(col)
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        out.insert(
            id,
            SectionText {
                findings: present(&columns.findings),
                impression: present(&columns.impression),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_images: usize,
    pub n_reports: usize,
    pub avg_reports_per_image: f64,
    /// Studies with no findings section (absent from the sidecar counts as
    /// missing).
    pub n_missing_findings: usize,
    pub n_missing_impression: usize,
    /// Mean Unicode scalar count of trimmed text, over present sections only.
    pub avg_len_findings: Option<f64>,
    pub avg_len_impression: Option<f64>,
    pub avg_len_dictated: f64,
}

fn char_len(s: &str) -> usize {
    s.trim().chars().count()
}

fn mean(values: &[usize]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<usize>() as f64 / values.len() as f64)
    }
}

pub fn compute_corpus_stats(
    corpus: &[StudyRecord],
    sidecar: Option<&Sidecar>,
) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n_images = corpus.len();
    let dictated: Vec<usize> = corpus
        .iter()
        .flat_map(|r| r.references.iter().map(|d| char_len(&d.text)))
        .collect();
    let n_reports = dictated.len();

    let mut findings = Vec::new();
    let mut impressions = Vec::new();
    for r in corpus {
        let sections = sidecar.and_then(|s| s.get(&r.study_id));
        if let Some(f) = sections
            .and_then(|s| s.findings.as_deref())
            .filter(|t| !t.trim().is_empty())
        {
            findings.push(char_len(f));
        }
        if let Some(i) = sections
            .and_then(|s| s.impression.as_deref())
            .filter(|t| !t.trim().is_empty())
        {
            impressions.push(char_len(i));
        }
    }

    Ok(CorpusStats {
        n_images,
        n_reports,
        avg_reports_per_image: n_reports as f64 / n_images as f64,
        n_missing_findings: n_images - findings.len(),
        n_missing_impression: n_images - impressions.len(),
        avg_len_findings: mean(&findings),
        avg_len_impression: mean(&impressions),
        avg_len_dictated: mean(&dictated).unwrap_or(0.0),
    })
}
