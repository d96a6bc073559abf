//! Per-row metric vectors, max-normalized averages and baseline deltas.

use crate::promptkit::MethodFlags;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub flags: MethodFlags,
    pub scores: BTreeMap<String, f64>,
    pub c_avg_pct: Option<f64>,
    pub a_avg_pct: Option<f64>,
}

impl MetricRow {
    pub fn new(
        model: impl Into<String>,
        flags: MethodFlags,
        scores: impl IntoIterator<Item = (String, f64)>,
    ) -> Self {
        Self {
            model: model.into(),
            flags,
            scores: scores.into_iter().collect(),
            c_avg_pct: None,
            a_avg_pct: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSets {
    pub clinical: Vec<String>,
    pub all: Vec<String>,
}

impl Default for MetricSets {
    fn default() -> Self {
        Self {
            clinical: vec!["radgraph_xl".into(), "ratescore".into()],
            all: vec![
                "rouge_l".into(),
                "bertscore".into(),
                "radgraph_xl".into(),
                "ratescore".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregateError {
    #[error("no metric rows")]
    NoRows,
    #[error("{model} ({method}): metric {metric} missing")]
    MissingMetric {
        model: String,
        method: String,
        metric: String,
    },
    #[error("{model}: no baseline ({method}) row")]
    MissingBaseline { model: String, method: String },
    #[error("{model} ({method}): duplicate row")]
    DuplicateRow { model: String, method: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Normalization {
    /// Per-metric maximum over the comparison set.
    pub maxima: BTreeMap<String, f64>,
    /// Metrics left out because their maximum was not positive.
    pub skipped: Vec<String>,
}

fn check_unique(rows: &[MetricRow]) -> Result<(), AggregateError> {
    let mut seen = BTreeSet::new();
    for r in rows {
        if !seen.insert((r.model.as_str(), r.flags)) {
            return Err(AggregateError::DuplicateRow {
                model: r.model.clone(),
                method: r.flags.label(),
            });
        }
    }
    Ok(())
}

/// Fills `c_avg_pct` and `a_avg_pct`: the mean over each set of
/// `100 * score / max`, with maxima taken over `rows`. An average over a
/// set whose metrics were all skipped is left `None`.
pub fn normalized_averages(
    rows: &mut [MetricRow],
    sets: &MetricSets,
) -> Result<Normalization, AggregateError> {
    if rows.is_empty() {
        return Err(AggregateError::NoRows);
    }
    check_unique(rows)?;
    let names: BTreeSet<&String> = sets.clinical.iter().chain(&sets.all).collect();
    let mut norm = Normalization::default();
    for name in names {
        let mut max = f64::NEG_INFINITY;
        for r in rows.iter() {
            let v = *r
                .scores
                .get(name)
                .ok_or_else(|| AggregateError::MissingMetric {
                    model: r.model.clone(),
                    method: r.flags.label(),
                    metric: name.clone(),
                })?;
            max = max.max(v);
        }
        if max > 0.0 {
            norm.maxima.insert(name.clone(), max);
        } else {
            log::warn!("metric {name}: maximum {max} is not positive, left out of averages");
            norm.skipped.push(name.clone());
        }
    }
    let avg = |r: &MetricRow, set: &[String]| -> Option<f64> {
        let parts: Vec<f64> = set
            .iter()
            .filter_map(|m| norm.maxima.get(m).map(|max| 100.0 * r.scores[m] / max))
            .collect();
        (!parts.is_empty()).then(|| parts.iter().sum::<f64>() / parts.len() as f64)
    };
    for r in rows.iter_mut() {
        r.c_avg_pct = avg(r, &sets.clinical);
        r.a_avg_pct = avg(r, &sets.all);
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub model: String,
    pub flags: MethodFlags,
    pub deltas: BTreeMap<String, f64>,
    pub c_avg_pct: Option<f64>,
    pub a_avg_pct: Option<f64>,
}

/// Row minus the same model's `baseline` row, for every metric both carry
/// and for each average both have. Baseline rows are included with zero
/// deltas. Output keeps the input row order.
pub fn delta_report(
    rows: &[MetricRow],
    baseline: MethodFlags,
) -> Result<Vec<DeltaRow>, AggregateError> {
    check_unique(rows)?;
    let bases: BTreeMap<&str, &MetricRow> = rows
        .iter()
        .filter(|r| r.flags == baseline)
        .map(|r| (r.model.as_str(), r))
        .collect();
    rows.iter()
        .map(|r| {
            let base =
                bases
                    .get(r.model.as_str())
                    .ok_or_else(|| AggregateError::MissingBaseline {
                        model: r.model.clone(),
                        method: baseline.label(),
                    })?;
            let deltas = r
                .scores
                .iter()
                .filter_map(|(k, v)| base.scores.get(k).map(|b| (k.clone(), v - b)))
                .collect();
            let diff = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
            Ok(DeltaRow {
                model: r.model.clone(),
                flags: r.flags,
                deltas,
                c_avg_pct: diff(r.c_avg_pct, base.c_avg_pct),
                a_avg_pct: diff(r.a_avg_pct, base.a_avg_pct),
            })
        })
        .collect()
}

/// Fixed-precision with an explicit sign; values that round to zero are
/// printed with `+`.
pub fn format_signed(v: f64, decimals: usize) -> String {
    let body = format!("{:.*}", decimals, v.abs());
    let nonzero = body.bytes().any(|b| (b'1'..=b'9').contains(&b));
    if v < 0.0 && nonzero {
        format!("-{body}")
    } else {
        format!("+{body}")
    }
}

/// Short column heading for a metric.
pub fn metric_heading(metric: &str) -> &str {
    match metric {
        "rouge_l" => "RG-L",
        "bertscore" => "BERT",
        "radgraph_xl" => "RadG",
        "ratescore" => "RaTE",
        other => other,
    }
}

/// Column order: the "all" set as configured, then any other metric found
/// in the rows, sorted.
pub fn metric_columns(rows: &[MetricRow], sets: &MetricSets) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for m in sets.all.iter().chain(&sets.clinical) {
        if !cols.contains(m) {
            cols.push(m.clone());
        }
    }
    let extra: BTreeSet<&String> = rows
        .iter()
        .flat_map(|r| r.scores.keys())
        .filter(|k| !cols.contains(k))
        .collect();
    cols.extend(extra.into_iter().cloned());
    cols
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{:.*}", decimals, x)).unwrap_or_default()
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// `model,method,<metrics...>,c_avg_pct,a_avg_pct`, scores to 4 decimals
/// and averages to 2.
pub fn metric_rows_csv(rows: &[MetricRow], columns: &[String]) -> String {
    let mut w = csv_writer();
    let mut header = vec!["model".to_string(), "method".to_string()];
    header.extend(columns.iter().cloned());
    header.extend(["c_avg_pct".to_string(), "a_avg_pct".to_string()]);
    w.write_record(&header).expect("csv");
    for r in rows {
        let mut rec = vec![r.model.clone(), r.flags.label()];
        rec.extend(columns.iter().map(|c| opt(r.scores.get(c).copied(), 4)));
        rec.push(opt(r.c_avg_pct, 2));
        rec.push(opt(r.a_avg_pct, 2));
        w.write_record(&rec).expect("csv");
    }
    finish(w)
}

/// Same layout as [`metric_rows_csv`] with signed deltas.
pub fn delta_csv(deltas: &[DeltaRow], columns: &[String]) -> String {
    let mut w = csv_writer();
    let mut header = vec!["model".to_string(), "method".to_string()];
    header.extend(columns.iter().cloned());
    header.extend(["c_avg_pct".to_string(), "a_avg_pct".to_string()]);
    w.write_record(&header).expect("csv");
    for d in deltas {
        let mut rec = vec![d.model.clone(), d.flags.label()];
        rec.extend(columns.iter().map(|c| {
            d.deltas
                .get(c)
                .map(|v| format_signed(*v, 4))
                .unwrap_or_default()
        }));
        rec.push(d.c_avg_pct.map(|v| format_signed(v, 2)).unwrap_or_default());
        rec.push(d.a_avg_pct.map(|v| format_signed(v, 2)).unwrap_or_default());
        w.write_record(&rec).expect("csv");
    }
    finish(w)
}

/// Plain-text results table: one line per row, and under every
/// non-baseline row a second line with the deltas in parentheses.
pub fn format_results_table(
    rows: &[MetricRow],
    deltas: &[DeltaRow],
    columns: &[String],
    baseline: MethodFlags,
) -> String {
    let mut header: Vec<String> = vec!["Model".into(), "Method".into()];
    header.extend(columns.iter().map(|c| metric_heading(c).to_string()));
    header.extend(["C.AVG (%)".to_string(), "A.AVG (%)".to_string()]);

    let mut lines: Vec<Vec<String>> = Vec::new();
    let mut last_model: Option<&str> = None;
    for r in rows {
        let model_cell = if last_model == Some(r.model.as_str()) {
            String::new()
        } else {
            r.model.clone()
        };
        last_model = Some(&r.model);
        let mut line = vec![model_cell, r.flags.label()];
        line.extend(columns.iter().map(|c| opt(r.scores.get(c).copied(), 4)));
        line.push(opt(r.c_avg_pct, 2));
        line.push(opt(r.a_avg_pct, 2));
        lines.push(line);
        if r.flags == baseline {
            continue;
        }
        if let Some(d) = deltas
            .iter()
            .find(|d| d.model == r.model && d.flags == r.flags)
        {
            let paren = |s: String| if s.is_empty() { s } else { format!("({s})") };
            let mut line = vec![String::new(), String::new()];
            line.extend(columns.iter().map(|c| {
                paren(
                    d.deltas
                        .get(c)
                        .map(|v| format_signed(*v, 4))
                        .unwrap_or_default(),
                )
            }));
            line.push(paren(
                d.c_avg_pct.map(|v| format_signed(v, 2)).unwrap_or_default(),
            ));
            line.push(paren(
                d.a_avg_pct.map(|v| format_signed(v, 2)).unwrap_or_default(),
            ));
            lines.push(line);
        }
    }

    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for l in &lines {
        for (w, cell) in widths.iter_mut().zip(l) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let render = |cells: &[String]| -> String {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < 2 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "{cell:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = render(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for l in &lines {
        out.push_str(&render(l));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, flags: MethodFlags, s: &[(&str, f64)]) -> MetricRow {
        MetricRow::new(model, flags, s.iter().map(|(k, v)| (k.to_string(), *v)))
    }

    fn clinical_only() -> MetricSets {
        MetricSets {
            clinical: vec!["radgraph_xl".into(), "ratescore".into()],
            all: vec!["radgraph_xl".into(), "ratescore".into()],
        }
    }

    #[test]
    fn max_row_is_100() {
        let mut rows = vec![
            row(
                "A",
                MethodFlags::BASELINE,
                &[("radgraph_xl", 0.2), ("ratescore", 0.5)],
            ),
            row(
                "B",
                MethodFlags::BASELINE,
                &[("radgraph_xl", 0.1), ("ratescore", 0.25)],
            ),
        ];
        normalized_averages(&mut rows, &clinical_only()).unwrap();
        assert_eq!(rows[0].c_avg_pct, Some(100.0));
        assert_eq!(rows[1].c_avg_pct, Some(50.0));
    }

    #[test]
    fn zero_max_metric_skipped() {
        let mut rows = vec![
            row(
                "A",
                MethodFlags::BASELINE,
                &[("radgraph_xl", 0.0), ("ratescore", 0.5)],
            ),
            row(
                "B",
                MethodFlags::BASELINE,
                &[("radgraph_xl", 0.0), ("ratescore", 0.25)],
            ),
        ];
        let n = normalized_averages(&mut rows, &clinical_only()).unwrap();
        assert_eq!(n.skipped, ["radgraph_xl"]);
        assert_eq!(rows[1].c_avg_pct, Some(50.0));
    }

    #[test]
    fn missing_metric_and_duplicates() {
        let mut rows = vec![row("A", MethodFlags::BASELINE, &[("radgraph_xl", 0.1)])];
        assert!(matches!(
            normalized_averages(&mut rows, &clinical_only()),
            Err(AggregateError::MissingMetric { .. })
        ));
        let mut dup = vec![rows[0].clone(), rows[0].clone()];
        assert!(matches!(
            normalized_averages(&mut dup, &clinical_only()),
            Err(AggregateError::DuplicateRow { .. })
        ));
        assert_eq!(
            normalized_averages(&mut [], &clinical_only()),
            Err(AggregateError::NoRows)
        );
    }

    #[test]
    fn deltas_against_baseline() {
        let lm = MethodFlags::new(true, true, false);
        let rows = vec![
            row("CXR-LLaVA", MethodFlags::BASELINE, &[("rouge_l", 0.1653)]),
            row("CXR-LLaVA", lm, &[("rouge_l", 0.1697)]),
        ];
        let d = delta_report(&rows, MethodFlags::BASELINE).unwrap();
        assert_eq!(d[0].deltas["rouge_l"], 0.0);
        assert_eq!(format_signed(d[1].deltas["rouge_l"], 4), "+0.0044");
        assert!(matches!(
            delta_report(&rows[1..], MethodFlags::BASELINE),
            Err(AggregateError::MissingBaseline { .. })
        ));
    }

    #[test]
    fn signed_formatting() {
        assert_eq!(format_signed(-0.00001, 4), "+0.0000");
        assert_eq!(format_signed(-1.19, 2), "-1.19");
        assert_eq!(format_signed(0.0, 2), "+0.00");
    }

    #[test]
    fn table_layout() {
        let lm = MethodFlags::new(true, true, false);
        let mut rows = vec![
            row(
                "M1",
                MethodFlags::BASELINE,
                &[("radgraph_xl", 0.1), ("ratescore", 0.4)],
            ),
            row("M1", lm, &[("radgraph_xl", 0.2), ("ratescore", 0.5)]),
        ];
        let sets = clinical_only();
        normalized_averages(&mut rows, &sets).unwrap();
        let d = delta_report(&rows, MethodFlags::BASELINE).unwrap();
        let cols = metric_columns(&rows, &sets);
        let t = format_results_table(&rows, &d, &cols, MethodFlags::BASELINE);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("Model  Method"));
        assert!(lines[4].contains("(+0.1000)"));
        assert!(lines[4].contains("(+35.00)"));
        let csv = metric_rows_csv(&rows, &cols);
        assert_eq!(
            csv.lines().next().unwrap(),
            "model,method,radgraph_xl,ratescore,c_avg_pct,a_avg_pct"
        );
        assert_eq!(
            csv.lines().nth(2).unwrap(),
            "M1,L&M,0.2000,0.5000,100.00,100.00"
        );
    }
}
