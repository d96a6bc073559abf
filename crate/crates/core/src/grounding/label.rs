//! Box caption tags rendered with an 8x8 bitmap font.

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LabelLayout {
    /// Unclipped top-left corner of the tag.
    pub origin: (i64, i64),
    pub scale: u32,
    /// Inclusive tag rectangle clipped to the image: (left, top, right, bottom).
    pub rect: (u32, u32, u32, u32),
}

const GLYPH: u32 = 8;

/// Tag geometry: glyphs are `8 * scale` pixels with `scale = max(1,
/// font_px / 8)` and one `scale` of padding on every side. The tag sits
/// directly above the box when it fits, otherwise just inside the top edge.
pub(crate) fn label_layout(
    text: &str,
    (left, top): (u32, u32),
    font_px: u32,
    width: u32,
    height: u32,
) -> Option<LabelLayout> {
    let n = text.chars().count() as u32;
    if n == 0 || width == 0 || height == 0 {
        return None;
    }
    let scale = (font_px / GLYPH).max(1);
    let tag_w = n * GLYPH * scale + 2 * scale;
    let tag_h = GLYPH * scale + 2 * scale;
    let y = if top >= tag_h { top - tag_h } else { top };
    let right = (left + tag_w - 1).min(width - 1);
    let bottom = (y + tag_h - 1).min(height - 1);
    Some(LabelLayout {
        origin: (left as i64, y as i64),
        scale,
        rect: (left, y, right, bottom),
    })
}

fn text_color(bg: Rgb<u8>) -> Rgb<u8> {
    let [r, g, b] = bg.0;
    let lum = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    if lum > 128.0 {
        Rgb([0, 0, 0])
    } else {
        Rgb([255, 255, 255])
    }
}

pub(crate) fn draw_label(img: &mut RgbImage, layout: &LabelLayout, text: &str, bg: Rgb<u8>) {
    let (l, t, r, b) = layout.rect;
    for y in t..=b {
        for x in l..=r {
            img.put_pixel(x, y, bg);
        }
    }
    let fg = text_color(bg);
    let s = layout.scale as i64;
    let (ox, oy) = (layout.origin.0 + s, layout.origin.1 + s);
    for (ci, ch) in text.chars().enumerate() {
        let glyph = BASIC_FONTS
            .get(ch)
            .or_else(|| BASIC_FONTS.get('?'))
            .unwrap_or([0; 8]);
        let gx = ox + ci as i64 * GLYPH as i64 * s;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) == 0 {
                    continue;
                }
                for dy in 0..s {
                    for dx in 0..s {
                        let x = gx + col as i64 * s + dx;
                        let y = oy + row as i64 * s + dy;
                        if x >= l as i64 && x <= r as i64 && y >= t as i64 && y <= b as i64 {
                            img.put_pixel(x as u32, y as u32, fg);
                        }
                    }
                }
            }
        }
    }
}
