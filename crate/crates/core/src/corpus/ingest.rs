//! Source adapters: tabular box, fixation, report and image-manifest files
//! normalized into [`StudyRecord`]s.
//!
//! Each source is CSV with a header row, or JSON lines when the file name
//! ends in `.jsonl`. Column names are configurable per source.

use super::{validate_record, BoundingBox, CorpusError, DictatedReport, Fixation, StudyRecord};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxColumns {
    pub study_id: String,
    pub x1: String,
    pub y1: String,
    pub x2: String,
    pub y2: String,
    pub label: String,
}

impl Default for BoxColumns {
    fn default() -> Self {
        Self {
            study_id: "study_id".into(),
            x1: "x1".into(),
            y1: "y1".into(),
            x2: "x2".into(),
            y2: "y2".into(),
            label: "label".into(),
        }
    }
}

/// Maps recorded gaze coordinates into image pixels:
/// `x' = a*x + b*y + c`, `y' = d*x + e*y + f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            e: 1.0,
            f: 0.0,
        }
    }
}

impl AffineTransform {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.c,
            self.d * x + self.e * y + self.f,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixationColumns {
    pub study_id: String,
    pub x: String,
    pub y: String,
    pub duration: String,
    /// Multiplier turning the duration column into seconds.
    pub duration_scale: f64,
    pub transform: AffineTransform,
}

impl Default for FixationColumns {
    fn default() -> Self {
        Self {
            study_id: "study_id".into(),
            x: "x".into(),
            y: "y".into(),
            duration: "duration".into(),
            duration_scale: 1.0,
            transform: AffineTransform::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportColumns {
    pub study_id: String,
    pub source_id: String,
    pub text: String,
}

impl Default for ReportColumns {
    fn default() -> Self {
        Self {
            study_id: "study_id".into(),
            source_id: "source_id".into(),
            text: "text".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageColumns {
    pub study_id: String,
    pub path: String,
}

impl Default for ImageColumns {
    fn default() -> Self {
        Self {
            study_id: "study_id".into(),
            path: "image_path".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SidecarColumns {
    pub study_id: String,
    pub findings: String,
    pub impression: String,
}

impl Default for SidecarColumns {
    fn default() -> Self {
        Self {
            study_id: "study_id".into(),
            findings: "findings".into(),
            impression: "impression".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub boxes: BoxColumns,
    pub fixations: FixationColumns,
    pub reports: ReportColumns,
    pub images: ImageColumns,
    pub sidecar: SidecarColumns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcePaths {
    pub boxes: PathBuf,
    pub fixations: PathBuf,
    pub reports: PathBuf,
    pub images: PathBuf,
}

pub(crate) struct Row {
    pub line: u64,
    pub fields: HashMap<String, String>,
}

impl Row {
    pub fn get<'a>(&'a self, path: &Path, column: &str) -> Result<&'a str, CorpusError> {
        self.fields
            .get(column)
            .map(String::as_str)
            .ok_or_else(|| CorpusError::Malformed {
                path: path.to_path_buf(),
                line: self.line,
                field: column.to_string(),
                message: "missing column".into(),
            })
    }

    pub fn number(&self, path: &Path, column: &str) -> Result<f64, CorpusError> {
        let raw = self.get(path, column)?;
        raw.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| CorpusError::Malformed {
                path: path.to_path_buf(),
                line: self.line,
                field: column.to_string(),
                message: format!("expected a finite number, got {raw:?}"),
            })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a CSV (header row) or JSON-lines table into rows keyed by column.
pub(crate) fn read_rows(path: &Path) -> Result<Vec<Row>, CorpusError> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if is_jsonl {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| CorpusError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                field: "<row>".into(),
                message,
            };
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            let obj = value
                .as_object()
                .ok_or_else(|| malformed("expected a JSON object".into()))?;
            let fields = obj
                .iter()
                .map(|(k, v)| {
                    let s = match v {
                        serde_json::Value::String(s) => s.clone(),
                        serde_json::Value::Null => String::new(),
                        other => other.to_string(),
                    };
                    (k.clone(), s)
                })
                .collect();
            rows.push(Row {
                line: line_no,
                fields,
            });
        }
        Ok(rows)
    } else {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let fields = headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect();
            rows.push(Row { line, fields });
        }
        Ok(rows)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CorpusError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => CorpusError::Malformed {
            path: path.to_path_buf(),
            line,
            field: "<row>".into(),
            message: format!("{kind:?}"),
        },
    }
}

/// All four annotation sources loaded and grouped by study id, input order
/// preserved within each study.
#[derive(Debug, Clone)]
pub struct CorpusSources {
    boxes: HashMap<String, Vec<BoundingBox>>,
    fixations: HashMap<String, Vec<(f64, f64, f64)>>,
    reports: HashMap<String, Vec<DictatedReport>>,
    images: Vec<(String, PathBuf)>,
    image_root: PathBuf,
}

impl CorpusSources {
    pub fn open(paths: &SourcePaths, adapter: &AdapterConfig) -> Result<Self, CorpusError> {
        let mut boxes: HashMap<String, Vec<BoundingBox>> = HashMap::new();
        let c = &adapter.boxes;
        for row in read_rows(&paths.boxes)? {
            let p = paths.boxes.as_path();
            let id = row.get(p, &c.study_id)?.trim().to_string();
            let b = BoundingBox {
                x1: row.number(p, &c.x1)?,
                y1: row.number(p, &c.y1)?,
                x2: row.number(p, &c.x2)?,
                y2: row.number(p, &c.y2)?,
                label: row.get(p, &c.label)?.trim().to_string(),
            };
            boxes.entry(id).or_default().push(b);
        }

        let mut fixations: HashMap<String, Vec<(f64, f64, f64)>> = HashMap::new();
        let c = &adapter.fixations;
        for row in read_rows(&paths.fixations)? {
            let p = paths.fixations.as_path();
            let id = row.get(p, &c.study_id)?.trim().to_string();
            let (x, y) = c
                .transform
                .apply(row.number(p, &c.x)?, row.number(p, &c.y)?);
            let t = row.number(p, &c.duration)? * c.duration_scale;
            fixations.entry(id).or_default().push((x, y, t));
        }

        let mut reports: HashMap<String, Vec<DictatedReport>> = HashMap::new();
        let c = &adapter.reports;
        for row in read_rows(&paths.reports)? {
            let p = paths.reports.as_path();
            let id = row.get(p, &c.study_id)?.trim().to_string();
            let text = row.get(p, &c.text)?.to_string();
            if text.trim().is_empty() {
                return Err(CorpusError::Malformed {
                    path: p.to_path_buf(),
                    line: row.line,
                    field: c.text.clone(),
                    message: "empty report text".into(),
                });
            }
            reports.entry(id).or_default().push(DictatedReport {
                text,
                source_id: row.get(p, &c.source_id)?.trim().to_string(),
            });
        }

        let mut images = Vec::new();
        let mut seen = HashSet::new();
        let c = &adapter.images;
        for row in read_rows(&paths.images)? {
            let p = paths.images.as_path();
            let id = row.get(p, &c.study_id)?.trim().to_string();
            if !seen.insert(id.clone()) {
                return Err(CorpusError::DuplicateStudy(id));
            }
            images.push((id, PathBuf::from(row.get(p, &c.path)?.trim())));
        }

        let image_root = paths
            .images
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self {
            boxes,
            fixations,
            reports,
            images,
            image_root,
        })
    }

    /// Directory relative image paths resolve against.
    pub fn image_root(&self) -> &Path {
        &self.image_root
    }

    pub fn study_ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|(id, _)| id.as_str())
    }

    /// Resolved image path per study, in manifest order.
    pub fn image_paths(&self) -> Vec<(String, PathBuf)> {
        self.images
            .iter()
            .map(|(id, p)| (id.clone(), resolve_image_path(&self.image_root, p)))
            .collect()
    }

    /// Assembles and validates one study.
    pub fn load_study(&self, study_id: &str) -> Result<StudyRecord, CorpusError> {
        let image_path = self
            .images
            .iter()
            .find(|(id, _)| id == study_id)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| CorpusError::UnknownStudy {
                study_id: study_id.to_string(),
            })?;
        let resolved = resolve_image_path(&self.image_root, &image_path);
        if !resolved.is_file() {
            return Err(CorpusError::MissingImage {
                study_id: study_id.to_string(),
                path: resolved,
            });
        }
        let decode_err = |message: String| CorpusError::ImageDecode {
            study_id: study_id.to_string(),
            path: resolved.clone(),
            message,
        };
        let img = image::ImageReader::open(&resolved)
            .map_err(|e| decode_err(e.to_string()))?
            .with_guessed_format()
            .map_err(|e| decode_err(e.to_string()))?
            .decode()
            .map_err(|e| decode_err(e.to_string()))?;
        let (width, height) = (img.width(), img.height());

        let references = self.reports.get(study_id).cloned().unwrap_or_default();
        if references.is_empty() {
            return Err(CorpusError::NoReferences {
                study_id: study_id.to_string(),
            });
        }

        let boxes = self
            .boxes
            .get(study_id)
            .map(|bs| {
                bs.iter()
                    .map(|b| clamp_edge(study_id, b, width, height))
                    .collect()
            })
            .unwrap_or_default();
        let fixations = self
            .fixations
            .get(study_id)
            .map(|fs| {
                fs.iter()
                    .enumerate()
                    .map(|(i, &(x, y, t))| Fixation::new(x, y, t, i as u32))
                    .collect()
            })
            .unwrap_or_default();

        let record = StudyRecord {
            study_id: study_id.to_string(),
            image_path,
            width,
            height,
            boxes,
            fixations,
            references,
        };
        let violations = validate_record(&record);
        if violations.is_empty() {
            Ok(record)
        } else {
            Err(CorpusError::Invalid {
                study_id: study_id.to_string(),
                violations,
            })
        }
    }

    /// Loads every study in image-manifest order.
    pub fn load_corpus(&self) -> Result<Vec<StudyRecord>, CorpusError> {
        self.study_ids().map(|id| self.load_study(id)).collect()
    }
}

/// Relative image paths are taken relative to the image manifest's directory.
pub fn resolve_image_path(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Pulls edges that overshoot the image by at most one pixel back inside.
fn clamp_edge(study_id: &str, b: &BoundingBox, width: u32, height: u32) -> BoundingBox {
    let (w, h) = (width as f64, height as f64);
    let mut out = b.clone();
    let mut clamped = false;
    let mut fix = |v: &mut f64, lo: f64, hi: f64| {
        if *v < lo && *v >= lo - 1.0 {
            *v = lo;
            clamped = true;
        } else if *v > hi && *v <= hi + 1.0 {
            *v = hi;
            clamped = true;
        }
    };
    fix(&mut out.x1, 0.0, w);
    fix(&mut out.x2, 0.0, w);
    fix(&mut out.y1, 0.0, h);
    fix(&mut out.y2, 0.0, h);
    if clamped {
        log::warn!(
            "study {study_id}: box {:?} clamped to image bounds {width}x{height}",
            b.label
        );
    }
    out
}
