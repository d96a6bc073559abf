//! Box overlays and fixation heatmaps drawn onto a copy of the radiograph.

use super::label::{draw_label, label_layout};
use crate::corpus::{BoundingBox, Fixation};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("cannot decode image {origin}: {message}")]
    Decode { origin: String, message: String },
    #[error("cannot encode PNG: {0}")]
    Encode(String),
    #[error("invalid render spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapWeighting {
    /// Each fixation contributes proportionally to its duration.
    #[default]
    Duration,
    /// Each fixation contributes equally.
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    pub box_stroke_px: u32,
    pub label_font_px: u32,
    /// `None` means 5% of the image width.
    pub heatmap_sigma_px: Option<f64>,
    pub heatmap_alpha: f64,
    pub palette_seed: u64,
    pub heatmap_weighting: HeatmapWeighting,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            box_stroke_px: 3,
            label_font_px: 16,
            heatmap_sigma_px: None,
            heatmap_alpha: 0.4,
            palette_seed: 0,
            heatmap_weighting: HeatmapWeighting::Duration,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.box_stroke_px < 1 {
            return Err(RenderError::InvalidSpec(
                "box_stroke_px must be >= 1".into(),
            ));
        }
        if let Some(s) = self.heatmap_sigma_px {
            if !(s > 0.0 && s.is_finite()) {
                return Err(RenderError::InvalidSpec(format!(
                    "heatmap_sigma_px must be > 0, got {s}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.heatmap_alpha) {
            return Err(RenderError::InvalidSpec(format!(
                "heatmap_alpha must be in [0, 1], got {}",
                self.heatmap_alpha
            )));
        }
        Ok(())
    }

    pub fn sigma_for_width(&self, width: u32) -> f64 {
        self.heatmap_sigma_px
            .unwrap_or(0.05 * width as f64)
            .max(f64::MIN_POSITIVE)
    }
}

pub fn decode_image(bytes: &[u8], origin: &str) -> Result<RgbImage, RenderError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| RenderError::Decode {
            origin: origin.to_string(),
            message: e.to_string(),
        })
}

pub fn load_image(path: &Path) -> Result<RgbImage, RenderError> {
    let bytes = std::fs::read(path).map_err(|e| RenderError::Decode {
        origin: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode_image(&bytes, &path.display().to_string())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, RenderError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| RenderError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Stable color for a label: hue from a hash of (seed, label), high
/// saturation and value.
pub fn label_color(label: &str, palette_seed: u64) -> Rgb<u8> {
    let mut h = Sha256::new();
    h.update(palette_seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    let hue = u16::from_le_bytes([d[0], d[1]]) as f64 / 65536.0 * 360.0;
    hsv_to_rgb(hue, 0.85, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb<u8> {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    Rgb([to8(r), to8(g), to8(b)])
}

/// Inclusive pixel rectangle covered by a box, clipped to the image.
pub(crate) fn pixel_rect(b: &BoundingBox, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    if width == 0 || height == 0 {
        return None;
    }
    let left = b.x1.floor().max(0.0);
    let top = b.y1.floor().max(0.0);
    let right = (b.x2.ceil().min(width as f64)) - 1.0;
    let bottom = (b.y2.ceil().min(height as f64)) - 1.0;
    if right < left || bottom < top || left >= width as f64 || top >= height as f64 {
        return None;
    }
    Some((left as u32, top as u32, right as u32, bottom as u32))
}

/// Draws each box as a rectangle outline of `box_stroke_px` (inward from the
/// box edge) with its label on a filled tag above the box, or just inside
/// the top edge when there is no room above.
pub fn render_box_overlay(base: &RgbImage, boxes: &[BoundingBox], spec: &RenderSpec) -> RgbImage {
    let mut out = base.clone();
    let (w, h) = out.dimensions();
    let stroke = spec.box_stroke_px.max(1);
    for b in boxes {
        let color = label_color(&b.label, spec.palette_seed);
        let Some((l, t, r, btm)) = pixel_rect(b, w, h) else {
            continue;
        };
        for y in t..=btm {
            for x in l..=r {
                let on_edge =
                    x - l < stroke || r - x < stroke || y - t < stroke || btm - y < stroke;
                if on_edge {
                    out.put_pixel(x, y, color);
                }
            }
        }
        if let Some(layout) = label_layout(&b.label, (l, t), spec.label_font_px, w, h) {
            draw_label(&mut out, &layout, &b.label, color);
        }
    }
    out
}

/// Weighted sum of Gaussians centered on the fixations, before peak
/// normalization. Row-major, `width * height` values. Each kernel is
/// truncated at four sigma.
pub fn fixation_intensity_field(
    width: u32,
    height: u32,
    fixations: &[Fixation],
    spec: &RenderSpec,
) -> Vec<f64> {
    let (w, h) = (width as usize, height as usize);
    let mut field = vec![0.0; w * h];
    if w == 0 || h == 0 {
        return field;
    }
    let sigma = spec.sigma_for_width(width);
    let radius = (4.0 * sigma).ceil();
    let two_s2 = 2.0 * sigma * sigma;
    for g in fixations {
        let weight = match spec.heatmap_weighting {
            HeatmapWeighting::Duration => g.duration_s,
            HeatmapWeighting::Count => 1.0,
        };
        let x0 = (g.x - radius).floor().max(0.0) as usize;
        let x1 = ((g.x + radius).ceil().min(w as f64 - 1.0)).max(-1.0);
        let y0 = (g.y - radius).floor().max(0.0) as usize;
        let y1 = ((g.y + radius).ceil().min(h as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 || x0 >= w || y0 >= h {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let kx: Vec<f64> = (x0..=x1)
            .map(|px| (-(px as f64 - g.x).powi(2) / two_s2).exp())
            .collect();
        for py in y0..=y1 {
            let ky = weight * (-(py as f64 - g.y).powi(2) / two_s2).exp();
            let row = &mut field[py * w..(py + 1) * w];
            for (px, k) in (x0..=x1).zip(&kx) {
                row[px] += ky * k;
            }
        }
    }
    field
}

fn jet(v: f64) -> [f64; 3] {
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Peak-normalized fixation density, jet-colormapped and alpha-blended over
/// the image.
pub fn render_fixation_heatmap(
    base: &RgbImage,
    fixations: &[Fixation],
    spec: &RenderSpec,
) -> RgbImage {
    let (w, h) = base.dimensions();
    let field = fixation_intensity_field(w, h, fixations, spec);
    let peak = field.iter().cloned().fold(0.0_f64, f64::max);
    if fixations.is_empty() || peak <= 0.0 {
        return base.clone();
    }
    let alpha = spec.heatmap_alpha;
    let mut out = base.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let c = jet(field[i] / peak);
        for (ch, c) in px.0.iter_mut().zip(c) {
            let v = (1.0 - alpha) * *ch as f64 + alpha * 255.0 * c;
            *ch = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 7 + y * 3) % 200) as u8;
            Rgb([v, v, v])
        })
    }

    #[test]
    fn spec_validation() {
        assert!(RenderSpec::default().validate().is_ok());
        let bad = RenderSpec {
            heatmap_alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RenderSpec {
            heatmap_sigma_px: Some(0.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RenderSpec {
            box_stroke_px: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn no_boxes_is_identity() {
        let img = gray(40, 30);
        assert_eq!(render_box_overlay(&img, &[], &RenderSpec::default()), img);
    }

    #[test]
    fn no_fixations_is_identity() {
        let img = gray(40, 30);
        assert_eq!(
            render_fixation_heatmap(&img, &[], &RenderSpec::default()),
            img
        );
    }

    #[test]
    fn overlay_is_deterministic_and_keeps_dimensions() {
        let img = gray(64, 48);
        let boxes = vec![BoundingBox::new(5.0, 20.0, 40.0, 45.0, "Atelectasis")];
        let a = render_box_overlay(&img, &boxes, &RenderSpec::default());
        let b = render_box_overlay(&img, &boxes, &RenderSpec::default());
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), img.dimensions());
        assert_eq!(encode_png(&a).unwrap(), encode_png(&b).unwrap());
    }

    #[test]
    fn label_color_depends_on_seed() {
        assert_eq!(label_color("Effusion", 0), label_color("Effusion", 0));
        assert_ne!(label_color("Effusion", 0), label_color("Effusion", 1));
    }

    #[test]
    fn single_fixation_peak() {
        let spec = RenderSpec {
            heatmap_sigma_px: Some(4.0),
            ..Default::default()
        };
        let g = vec![Fixation::new(23.4, 11.8, 0.6, 0)];
        let field = fixation_intensity_field(50, 40, &g, &spec);
        let (idx, _) = field
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let (px, py) = ((idx % 50) as f64, (idx / 50) as f64);
        assert!((px - 23.4).abs() <= 1.0 && (py - 11.8).abs() <= 1.0);
    }

    #[test]
    fn count_weighting_ignores_duration() {
        let spec = RenderSpec {
            heatmap_sigma_px: Some(2.0),
            heatmap_weighting: HeatmapWeighting::Count,
            ..Default::default()
        };
        let g = vec![Fixation::new(10.0, 10.0, 5.0, 0)];
        let field = fixation_intensity_field(20, 20, &g, &spec);
        assert!((field[10 * 20 + 10] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_garbage_fails() {
        assert!(matches!(
            decode_image(b"not an image", "mem"),
            Err(RenderError::Decode { .. })
        ));
    }
}
