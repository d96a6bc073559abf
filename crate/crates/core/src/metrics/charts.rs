//! Grouped bar charts of A.AVG differences between method pairs, as SVG
//! plus the CSV the bars are drawn from.

use super::aggregate::MetricRow;
use crate::promptkit::MethodFlags;
use std::fmt::Write as _;

/// (with, without) pairs, drawn left to right inside each model group.
pub const CHART_COMPARISONS: [(MethodFlags, MethodFlags); 4] = [
    (
        MethodFlags::new(true, true, false),
        MethodFlags::new(true, false, false),
    ),
    (
        MethodFlags::new(true, true, false),
        MethodFlags::new(false, true, false),
    ),
    (
        MethodFlags::new(true, true, true),
        MethodFlags::new(true, false, true),
    ),
    (
        MethodFlags::new(true, true, true),
        MethodFlags::new(false, true, true),
    ),
];

const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub model: String,
    pub with: MethodFlags,
    pub without: MethodFlags,
    pub a_avg_diff: f64,
}

impl ChartPoint {
    pub fn comparison(&self) -> String {
        format!("{} vs {}", self.with.label(), self.without.label())
    }
}

/// One point per model and comparison where both rows have an A.AVG.
/// Models keep their first-appearance order.
pub fn chart_points(rows: &[MetricRow]) -> Vec<ChartPoint> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let find = |m: &str, f: MethodFlags| {
        rows.iter()
            .find(|r| r.model == m && r.flags == f)
            .and_then(|r| r.a_avg_pct)
    };
    let mut out = Vec::new();
    for m in models {
        for (with, without) in CHART_COMPARISONS {
            if let (Some(a), Some(b)) = (find(m, with), find(m, without)) {
                out.push(ChartPoint {
                    model: m.to_string(),
                    with,
                    without,
                    a_avg_diff: a - b,
                });
            }
        }
    }
    out
}

/// `model,comparison,a_avg_diff_pct`; header only when there are no points.
pub fn chart_data_csv(points: &[ChartPoint]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["model", "comparison", "a_avg_diff_pct"])
        .expect("csv");
    for p in points {
        w.write_record([
            p.model.clone(),
            p.comparison(),
            format!("{:.2}", p.a_avg_diff),
        ])
        .expect("csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Deterministic SVG: models along x, one bar per comparison, y in A.AVG
/// percentage points with a zero line. With no points the axes are still
/// drawn.
pub fn render_chart_svg(points: &[ChartPoint], title: &str) -> String {
    let mut models: Vec<&str> = Vec::new();
    for p in points {
        if !models.contains(&p.model.as_str()) {
            models.push(&p.model);
        }
    }
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 60.0);
    let group_w = 120.0;
    let plot_w = (models.len().max(1) as f64) * group_w;
    let plot_h = 240.0;
    let width = left + plot_w + right;
    let height = top + plot_h + bottom + 20.0 * CHART_COMPARISONS.len() as f64;

    let extent = points
        .iter()
        .map(|p| p.a_avg_diff.abs())
        .fold(1.0_f64, f64::max)
        .ceil();
    let y = |v: f64| top + plot_h / 2.0 - v / extent * (plot_h / 2.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left:.1}" y1="{top:.1}" x2="{left:.1}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        y(0.0),
        left + plot_w,
        y(0.0)
    );
    for tick in [-extent, -extent / 2.0, 0.0, extent / 2.0, extent] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.1}</text>"#,
            left - 6.0,
            y(tick) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">A.AVG difference (pp)</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );

    let bar_w = (group_w - 20.0) / CHART_COMPARISONS.len() as f64;
    for (gi, m) in models.iter().enumerate() {
        let gx = left + gi as f64 * group_w + 10.0;
        for (ci, (with, without)) in CHART_COMPARISONS.iter().enumerate() {
            let Some(p) = points
                .iter()
                .find(|p| p.model == *m && p.with == *with && p.without == *without)
            else {
                continue;
            };
            let (y0, y1) = (y(0.0), y(p.a_avg_diff));
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{}: {:+.2}</title></rect>"#,
                gx + ci as f64 * bar_w,
                y0.min(y1),
                bar_w - 2.0,
                (y1 - y0).abs(),
                COLORS[ci],
                escape(&format!("{m} {}", p.comparison())),
                p.a_avg_diff
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + (group_w - 20.0) / 2.0,
            top + plot_h + 16.0,
            escape(m)
        );
    }

    for (ci, (with, without)) in CHART_COMPARISONS.iter().enumerate() {
        let ly = top + plot_h + bottom + 20.0 * ci as f64 - 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{left:.1}" y="{:.1}" width="12" height="12" fill="{}"/>"#,
            ly - 10.0,
            COLORS[ci]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#,
            left + 18.0,
            escape(&format!("{} vs {}", with.label(), without.label()))
        );
    }
    s.push_str("</svg>\n");
    s
}
