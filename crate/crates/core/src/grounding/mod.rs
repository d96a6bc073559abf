//! Fixation-to-box grounding and the two visual prompt artifacts.
//!
//! Each fixation is attributed to the smallest box that contains it; dwell
//! time per box is the sum of the durations attributed to it.

mod label;
mod render;

pub use render::{
    decode_image, encode_png, fixation_intensity_field, label_color, load_image,
    render_box_overlay, render_fixation_heatmap, HeatmapWeighting, RenderError, RenderSpec,
};

use crate::corpus::{BoundingBox, Fixation};
use serde::{Deserialize, Serialize};

/// Index of the minimum-area box containing the fixation. Equal areas go to
/// the lowest index.
pub fn map_fixation(g: &Fixation, boxes: &[BoundingBox]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.iter().enumerate() {
        if !b.contains(g.x, g.y) {
            continue;
        }
        let area = b.area();
        match best {
            Some((_, a)) if a <= area => {}
            _ => best = Some((i, area)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellEntry {
    pub box_index: usize,
    pub label: String,
    pub total_time_s: f64,
}

/// Per-box dwell times, ordered by the first fixation landing in each box.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundedFixationSummary {
    pub entries: Vec<DwellEntry>,
    /// Time spent on fixations outside every box. Kept for bookkeeping, never
    /// rendered into prompts.
    pub unmapped_time_s: f64,
}

impl GroundedFixationSummary {
    pub fn mapped_time_s(&self) -> f64 {
        self.entries.iter().map(|e| e.total_time_s).sum()
    }
}

pub fn aggregate_fixation_times(
    fixations: &[Fixation],
    boxes: &[BoundingBox],
) -> GroundedFixationSummary {
    let mut summary = GroundedFixationSummary::default();
    // box index -> position in `entries`
    let mut slot: Vec<Option<usize>> = vec![None; boxes.len()];
    for g in fixations {
        match map_fixation(g, boxes) {
            Some(i) => {
                let pos = *slot[i].get_or_insert_with(|| {
                    summary.entries.push(DwellEntry {
                        box_index: i,
                        label: boxes[i].label.clone(),
                        total_time_s: 0.0,
                    });
                    summary.entries.len() - 1
                });
                summary.entries[pos].total_time_s += g.duration_s;
            }
            None => summary.unmapped_time_s += g.duration_s,
        }
    }
    summary
}
