//! Canonical corpus file: one JSON record per line, keys sorted, UTF-8.

use super::{validate_corpus, CorpusError, StudyRecord};
use crate::digest::canonical_json;
use std::io::Write;
use std::path::Path;

/// Renders the corpus as canonical JSON lines. Deterministic for a given
/// corpus.
pub fn export_canonical(corpus: &[StudyRecord]) -> String {
    let mut out = String::new();
    for r in corpus {
        // StudyRecord contains only strings, numbers and lists.
        out.push_str(&canonical_json(r).expect("study record serializes"));
        out.push('\n');
    }
    out
}

/// Parses canonical JSON lines and validates the result.
pub fn read_canonical(text: &str, origin: &Path) -> Result<Vec<StudyRecord>, CorpusError> {
    let mut corpus = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: StudyRecord = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: origin.to_path_buf(),
            line: i as u64 + 1,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        corpus.push(r);
    }
    validate_corpus(&corpus)?;
    Ok(corpus)
}

/// Writes the canonical file atomically (temp file then rename).
pub fn write_canonical(corpus: &[StudyRecord], dest: &Path) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: dest.to_path_buf(),
        source,
    };
    let dir = dest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(export_canonical(corpus).as_bytes())
        .map_err(io)?;
    tmp.persist(dest).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load_canonical(path: &Path) -> Result<Vec<StudyRecord>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_canonical(&text, path)
}
