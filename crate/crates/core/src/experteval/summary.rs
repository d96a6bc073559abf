use super::{AnnotationRecord, EvalError, UnblindingMap};
use crate::promptkit::MethodFlags;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub flags: MethodFlags,
    pub annotations: usize,
    pub total_errors: u64,
    /// Mean total errors per annotated report.
    pub mean_errors: f64,
}

/// Mean of `counts.total()` over every record, grouped by the unblinded
/// (model, flags). Sorted by mean, then model, then method label.
pub fn error_summary(
    map: &UnblindingMap,
    records: &[AnnotationRecord],
) -> Result<Vec<SummaryRow>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoAnnotations);
    }
    let mut groups: BTreeMap<(String, MethodFlags), (usize, u64)> = BTreeMap::new();
    for r in records {
        let hidden = map
            .items
            .get(&r.item_id)
            .ok_or_else(|| EvalError::ItemNotFound {
                annotator_id: r.annotator_id.clone(),
                item_id: r.item_id.clone(),
            })?;
        let g = groups
            .entry((hidden.model.clone(), hidden.flags))
            .or_default();
        g.0 += 1;
        g.1 += r.counts.total();
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((model, flags), (n, total))| SummaryRow {
            model,
            flags,
            annotations: n,
            total_errors: total,
            mean_errors: total as f64 / n as f64,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.mean_errors
            .total_cmp(&b.mean_errors)
            .then_with(|| a.model.cmp(&b.model))
            .then_with(|| a.flags.label().cmp(&b.flags.label()))
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::super::{ErrorCounts, HiddenItem};
    use super::*;

    fn map(items: &[(&str, &str, MethodFlags)]) -> UnblindingMap {
        UnblindingMap {
            session_id: "s".into(),
            items: items
                .iter()
                .map(|(id, m, f)| {
                    (
                        id.to_string(),
                        HiddenItem {
                            model: m.to_string(),
                            flags: *f,
                            study_id: "x".into(),
                        },
                    )
                })
                .collect(),
        }
    }

    fn rec(annotator: &str, item: &str, counts: ErrorCounts) -> AnnotationRecord {
        AnnotationRecord {
            session_id: "s".into(),
            annotator_id: annotator.into(),
            item_id: item.into(),
            counts,
            submitted_at: String::new(),
        }
    }

    #[test]
    fn single_annotation() {
        let m = map(&[("i1", "A", MethodFlags::BASELINE)]);
        let rows = error_summary(&m, &[rec("r", "i1", ErrorCounts::new(1, 1, 1, 0, 0))]).unwrap();
        assert_eq!(rows[0].mean_errors, 3.0);
        assert_eq!(error_summary(&m, &[]), Err(EvalError::NoAnnotations));
    }

    #[test]
    fn two_models_two_annotators_two_reports() {
        // Model A: totals 1, 2, 0, 3 -> 1.5. Model B: 2, 2, 4, 0 -> 2.0.
        let b = MethodFlags::BASELINE;
        let m = map(&[
            ("a1", "A", b),
            ("a2", "A", b),
            ("b1", "B", b),
            ("b2", "B", b),
        ]);
        let c = |n: u32| ErrorCounts::new(n, 0, 0, 0, 0);
        let mut records = vec![
            rec("r1", "a1", c(1)),
            rec("r1", "a2", c(2)),
            rec("r2", "a1", c(0)),
            rec("r2", "a2", c(3)),
            rec("r1", "b1", c(2)),
            rec("r1", "b2", c(2)),
            rec("r2", "b1", c(4)),
            rec("r2", "b2", c(0)),
        ];
        let rows = error_summary(&m, &records).unwrap();
        assert_eq!((rows[0].model.as_str(), rows[0].mean_errors), ("A", 1.5));
        assert_eq!((rows[1].model.as_str(), rows[1].mean_errors), ("B", 2.0));
        records.reverse();
        assert_eq!(error_summary(&m, &records).unwrap(), rows);
    }

    #[test]
    fn ties_broken_by_name() {
        let m = map(&[
            ("1", "Z", MethodFlags::BASELINE),
            ("2", "A", MethodFlags::BASELINE),
        ]);
        let c = ErrorCounts::new(1, 0, 0, 0, 0);
        let rows = error_summary(&m, &[rec("r", "1", c), rec("r", "2", c)]).unwrap();
        assert_eq!(rows[0].model, "A");
    }
}
