//! Visual prompting: draw numbered boxes on the query image.
//!
//! Boxes are drawn as rectangle outlines through the corner coordinates
//! (inclusive on both ends, clipped at the image edge) so the line hugs
//! the half-open pixel box from outside on the max edges. Later entries
//! paint over earlier ones on contested pixels.

use image::RgbImage;

use crate::maskcore::BoundingBox;
use crate::pipeline::DetectionResult;

use super::VqaError;

/// Fixed 8-color palette; entry `(display_id - 1) % 8` colors a box.
pub const OVERLAY_PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],   // red
    [60, 180, 75],   // green
    [0, 130, 200],   // blue
    [255, 225, 25],  // yellow
    [70, 240, 240],  // cyan
    [240, 50, 230],  // magenta
    [245, 130, 48],  // orange
    [255, 255, 255], // white
];

/// 3x5 digit glyphs for the id stamp, row-major, bit 2 = left column.
const DIGIT_FONT: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111], // 0
    [0b010, 0b110, 0b010, 0b010, 0b111], // 1
    [0b111, 0b001, 0b111, 0b100, 0b111], // 2
    [0b111, 0b001, 0b111, 0b001, 0b111], // 3
    [0b101, 0b101, 0b111, 0b001, 0b001], // 4
    [0b111, 0b100, 0b111, 0b001, 0b111], // 5
    [0b111, 0b100, 0b111, 0b101, 0b111], // 6
    [0b111, 0b001, 0b001, 0b001, 0b001], // 7
    [0b111, 0b101, 0b111, 0b101, 0b111], // 8
    [0b111, 0b101, 0b111, 0b001, 0b111], // 9
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayEntry {
    pub display_id: u32,
    pub bbox: BoundingBox,
    pub color_index: u8,
    /// Stamped near the box's top-left corner; empty means no stamp.
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverlaySpec {
    pub entries: Vec<OverlayEntry>,
}

impl OverlaySpec {
    /// Colors cycle deterministically by display id; labels are the ids.
    pub fn from_detections(detections: &DetectionResult) -> Self {
        Self {
            entries: detections
                .boxes
                .iter()
                .map(|b| OverlayEntry {
                    display_id: b.display_id,
                    bbox: b.bbox,
                    color_index: ((b.display_id - 1) % 8) as u8,
                    label: b.display_id.to_string(),
                })
                .collect(),
        }
    }
}

/// Draw every entry's box perimeter and id stamp; untouched pixels are
/// carried over unchanged.
pub fn render_overlay(
    image: &RgbImage,
    spec: &OverlaySpec,
    line_width: u32,
) -> Result<RgbImage, VqaError> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(VqaError::Bounds("cannot annotate a zero-size image".into()));
    }
    for e in &spec.entries {
        if !e.bbox.fits_in(w, h) {
            return Err(VqaError::Bounds(format!(
                "box {:?} outside {w}x{h} image",
                e.bbox
            )));
        }
    }

    let mut out = image.clone();
    for e in &spec.entries {
        let color = image::Rgb(OVERLAY_PALETTE[(e.color_index % 8) as usize]);
        for t in 0..line_width {
            let (x0, y0) = (e.bbox.x_min + t, e.bbox.y_min + t);
            let (x1, y1) = (e.bbox.x_max.saturating_sub(t), e.bbox.y_max.saturating_sub(t));
            if x0 > x1 || y0 > y1 {
                break;
            }
            draw_outline(&mut out, x0, y0, x1, y1, color);
        }
        stamp_label(&mut out, e, line_width, color);
    }
    Ok(out)
}

/// Rectangle outline through inclusive corners, clipped at the image edge.
fn draw_outline(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: image::Rgb<u8>) {
    let (w, h) = (img.width(), img.height());
    for x in x0..=x1.min(w - 1) {
        put(img, x, y0, color);
        if y1 < h {
            put(img, x, y1, color);
        }
    }
    for y in y0..=y1.min(h - 1) {
        put(img, x0, y, color);
        if x1 < w {
            put(img, x1, y, color);
        }
    }
}

fn put(img: &mut RgbImage, x: u32, y: u32, color: image::Rgb<u8>) {
    if x < img.width() && y < img.height() {
        img.put_pixel(x, y, color);
    }
}

fn stamp_label(img: &mut RgbImage, entry: &OverlayEntry, line_width: u32, color: image::Rgb<u8>) {
    let mut cx = entry.bbox.x_min + line_width + 1;
    let cy = entry.bbox.y_min + line_width + 1;
    for ch in entry.label.chars() {
        let Some(digit) = ch.to_digit(10) else {
            continue;
        };
        let glyph = DIGIT_FONT[digit as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3u32 {
                if bits >> (2 - col) & 1 == 1 {
                    put(img, cx + col, cy + row as u32, color);
                }
            }
        }
        cx += 4;
    }
}
