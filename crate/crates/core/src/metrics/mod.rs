//! Report scoring, normalized averages, baseline deltas and charts.

mod aggregate;
mod charts;
mod rouge;
mod scorer;

pub use aggregate::{
    delta_csv, delta_report, format_results_table, format_signed, metric_columns, metric_heading,
    metric_rows_csv, normalized_averages, AggregateError, DeltaRow, MetricRow, MetricSets,
    Normalization,
};
pub use charts::{chart_data_csv, chart_points, render_chart_svg, ChartPoint, CHART_COMPARISONS};
pub use rouge::{
    lcs_len, rouge_l, rouge_l_text, score_candidate, tokenize, unigram_f1, MultiRefPolicy,
    NoReferences,
};
pub use scorer::{
    build_scorer, builtin_pair_metrics, collect_responses, encode_requests, invoke_external_scorer,
    known_metric_kind, serve_mock_scorer, BatchFailure, BuiltinScorer, ExternalScorer, MetricKind,
    PairMetric, PairMetricRegistry, ScoreItem, Scorer, ScorerError, ScorerSpec, Transport,
};
