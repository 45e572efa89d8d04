//! Procedural rendering for the simulated environment.
//!
//! Pages are drawn as solid shapes at exact hotspot geometry so click tests
//! are pixel-faithful without shipping binary fixtures. Labels are stylized
//! glyph marks derived from character codes, not legible text.

use crate::grammar::Extent;
use image::{Rgb, RgbImage};

pub const PAGE_BACKGROUND: [u8; 3] = [245, 245, 245];
const FIELD_FILL: [u8; 3] = [255, 255, 255];
const FIELD_BORDER: [u8; 3] = [120, 120, 120];
const INK: [u8; 3] = [30, 30, 30];

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;
const GLYPH_SCALE: u32 = 2;
const GLYPH_ADVANCE: u32 = GLYPH_W * GLYPH_SCALE + 2;

/// Deterministic fill color for a labeled hotspot: mid-brightness so both
/// the label marks and the border stay visible.
pub fn label_color(label: &str) -> [u8; 3] {
    let mut hash: u32 = 0x811c9dc5;
    for b in label.bytes() {
        hash ^= u32::from(b);
        hash = hash.wrapping_mul(0x01000193);
    }
    [
        96 + (hash & 0x7f) as u8,
        96 + ((hash >> 8) & 0x7f) as u8,
        96 + ((hash >> 16) & 0x7f) as u8,
    ]
}

fn darker(c: [u8; 3]) -> [u8; 3] {
    [c[0].saturating_sub(60), c[1].saturating_sub(60), c[2].saturating_sub(60)]
}

pub fn new_canvas(viewport: Extent, background: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(viewport.width, viewport.height, Rgb(background))
}

/// Fills a rectangle, clipping to the canvas. Coordinates are in canvas
/// space and may be negative after scroll translation.
pub fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, color: [u8; 3]) {
    let (cw, ch) = (img.width() as i64, img.height() as i64);
    let x0 = x.max(0);
    let y0 = y.max(0);
    let x1 = (x + w as i64).min(cw);
    let y1 = (y + h as i64).min(ch);
    for py in y0..y1 {
        for px in x0..x1 {
            img.put_pixel(px as u32, py as u32, Rgb(color));
        }
    }
}

pub fn border_rect(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, color: [u8; 3]) {
    fill_rect(img, x, y, w, 2, color);
    fill_rect(img, x, y + h as i64 - 2, w, 2, color);
    fill_rect(img, x, y, 2, h, color);
    fill_rect(img, x + w as i64 - 2, y, 2, h, color);
}

/// 15-bit glyph pattern for a character, derived from its code point so the
/// same character always draws the same mark.
fn glyph_bits(c: char) -> u16 {
    let mixed = (c as u32).wrapping_mul(0x9e37_79b9).rotate_left(7) ^ (c as u32);
    (mixed & 0x7fff) as u16 | 0x0001
}

fn draw_glyph(img: &mut RgbImage, x: i64, y: i64, c: char, color: [u8; 3]) {
    let bits = glyph_bits(c);
    for row in 0..GLYPH_H {
        for col in 0..GLYPH_W {
            if bits >> (row * GLYPH_W + col) & 1 == 1 {
                fill_rect(
                    img,
                    x + (col * GLYPH_SCALE) as i64,
                    y + (row * GLYPH_SCALE) as i64,
                    GLYPH_SCALE,
                    GLYPH_SCALE,
                    color,
                );
            }
        }
    }
}

/// Draws label marks starting at (x, y), clipped to `max_width` pixels.
pub fn draw_label(img: &mut RgbImage, x: i64, y: i64, text: &str, max_width: u32, color: [u8; 3]) {
    let mut cx = x;
    let limit = x + max_width as i64;
    for c in text.chars() {
        if cx + GLYPH_ADVANCE as i64 > limit {
            break;
        }
        if !c.is_whitespace() {
            draw_glyph(img, cx, y, c, color);
        }
        cx += GLYPH_ADVANCE as i64;
    }
}

/// Draws a hotspot: filled rect, darker border, label marks.
pub fn draw_hotspot(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, label: &str) {
    let fill = label_color(label);
    fill_rect(img, x, y, w, h, fill);
    border_rect(img, x, y, w, h, darker(fill));
    draw_label(img, x + 4, y + 4, label, w.saturating_sub(8), INK);
}

/// Draws a text field with its current contents.
pub fn draw_text_field(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, text: &str, focused: bool) {
    fill_rect(img, x, y, w, h, FIELD_FILL);
    let border = if focused { [40, 90, 200] } else { FIELD_BORDER };
    border_rect(img, x, y, w, h, border);
    draw_label(img, x + 4, y + 4, text, w.saturating_sub(8), INK);
}

/// Page identity marks drawn at the top-left corner of the canvas.
pub fn draw_page_marker(img: &mut RgbImage, page_id: &str) {
    draw_label(img, 6, 4, page_id, img.width().saturating_sub(12), [90, 90, 90]);
}

/// 8x8 average hash over luma block means.
pub fn average_hash(img: &RgbImage) -> u64 {
    let (w, h) = (img.width() as u64, img.height() as u64);
    if w == 0 || h == 0 {
        return 0;
    }
    let mut blocks = [0u64; 64];
    for by in 0..8u64 {
        for bx in 0..8u64 {
            let x0 = bx * w / 8;
            let x1 = ((bx + 1) * w / 8).max(x0 + 1).min(w);
            let y0 = by * h / 8;
            let y1 = ((by + 1) * h / 8).max(y0 + 1).min(h);
            let mut sum = 0u64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(x as u32, y as u32);
                    sum += (299 * u64::from(p[0]) + 587 * u64::from(p[1]) + 114 * u64::from(p[2]))
                        / 1000;
                }
            }
            blocks[(by * 8 + bx) as usize] = sum / ((x1 - x0) * (y1 - y0));
        }
    }
    let mean = blocks.iter().sum::<u64>() / 64;
    let mut hash = 0u64;
    for (i, value) in blocks.iter().enumerate() {
        if *value > mean {
            hash |= 1 << i;
        }
    }
    hash
}

/// PNG-encodes a canvas; the encoder is deterministic for identical input.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img.clone())
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let mut a = new_canvas(Extent::new(100, 80), PAGE_BACKGROUND);
        let mut b = new_canvas(Extent::new(100, 80), PAGE_BACKGROUND);
        draw_hotspot(&mut a, 10, 10, 60, 30, "Login");
        draw_hotspot(&mut b, 10, 10, 60, 30, "Login");
        assert_eq!(encode_png(&a), encode_png(&b));
    }

    #[test]
    fn different_labels_render_differently() {
        let mut a = new_canvas(Extent::new(100, 80), PAGE_BACKGROUND);
        let mut b = new_canvas(Extent::new(100, 80), PAGE_BACKGROUND);
        draw_hotspot(&mut a, 10, 10, 60, 30, "Login");
        draw_hotspot(&mut b, 10, 10, 60, 30, "Search");
        assert_ne!(encode_png(&a), encode_png(&b));
    }

    #[test]
    fn clipped_drawing_does_not_panic() {
        let mut img = new_canvas(Extent::new(50, 50), PAGE_BACKGROUND);
        draw_hotspot(&mut img, -10, -10, 100, 100, "big");
        draw_hotspot(&mut img, 45, 45, 20, 20, "edge");
    }

    #[test]
    fn average_hash_separates_distinct_layouts() {
        let mut a = new_canvas(Extent::new(64, 64), PAGE_BACKGROUND);
        let b = new_canvas(Extent::new(64, 64), PAGE_BACKGROUND);
        fill_rect(&mut a, 0, 0, 32, 64, [0, 0, 0]);
        assert_ne!(average_hash(&a), average_hash(&b));
    }
}
