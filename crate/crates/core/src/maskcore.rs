//! Binary-mask representation, run-length codec, and set algebra.
//!
//! Masks are dense row-major bitsets packed into `u64` words; run-length
//! encoding is serialization-only and follows the column-major
//! alternating-run convention used by the large segmentation datasets, so
//! externally produced annotations port directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
    #[error("box [{x_min},{y_min},{x_max},{y_max}) outside {width}x{height} image")]
    BoxOutOfBounds {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
        width: u32,
        height: u32,
    },
    #[error("degenerate box: min must be strictly below max ({0},{1},{2},{3})")]
    DegenerateBox(i64, i64, i64, i64),
    #[error("IoU of two empty masks is undefined")]
    BothEmpty,
    #[error("mask dimensions must be positive (got {0}x{1})")]
    ZeroDimension(u32, u32),
    #[error("run-length codec: {0}")]
    Codec(String),
    #[error("pixel ({0},{1}) outside {2}x{3} mask")]
    PixelOutOfBounds(u32, u32, u32, u32),
}

/// Axis-aligned box over half-open integer pixel intervals `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, MaskError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(MaskError::DegenerateBox(
                x_min as i64,
                y_min as i64,
                x_max as i64,
                y_max as i64,
            ));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Conservative-cover rounding for fractional wire coordinates:
    /// min coordinates floor, max coordinates ceil, so a detected object is
    /// never truncated. Coordinates must land inside `[0,width]x[0,height]`.
    pub fn from_f64_in_image(
        coords: [f64; 4],
        width: u32,
        height: u32,
    ) -> Result<Self, MaskError> {
        let [x0, y0, x1, y1] = coords;
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(MaskError::DegenerateBox(0, 0, 0, 0));
        }
        let x_min = x0.floor() as i64;
        let y_min = y0.floor() as i64;
        let x_max = x1.ceil() as i64;
        let y_max = y1.ceil() as i64;
        if x_min >= x_max || y_min >= y_max {
            return Err(MaskError::DegenerateBox(x_min, y_min, x_max, y_max));
        }
        if x_min < 0 || y_min < 0 || x_max > width as i64 || y_max > height as i64 {
            return Err(MaskError::BoxOutOfBounds {
                x_min: x_min.max(0) as u32,
                y_min: y_min.max(0) as u32,
                x_max: x_max.max(0) as u32,
                y_max: y_max.max(0) as u32,
                width,
                height,
            });
        }
        Ok(Self {
            x_min: x_min as u32,
            y_min: y_min as u32,
            x_max: x_max as u32,
            y_max: y_max as u32,
        })
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }
}

impl TryFrom<[i64; 4]> for BoundingBox {
    type Error = MaskError;

    fn try_from(v: [i64; 4]) -> Result<Self, MaskError> {
        if v.iter().any(|&c| c < 0 || c > u32::MAX as i64) {
            return Err(MaskError::DegenerateBox(v[0], v[1], v[2], v[3]));
        }
        BoundingBox::new(v[0] as u32, v[1] as u32, v[2] as u32, v[3] as u32)
    }
}

impl From<BoundingBox> for [i64; 4] {
    fn from(b: BoundingBox) -> [i64; 4] {
        [
            b.x_min as i64,
            b.y_min as i64,
            b.x_max as i64,
            b.y_max as i64,
        ]
    }
}

/// Dense row-major binary mask. Bit `y*width + x` is pixel `(x, y)`.
///
/// Immutable in spirit: every operation returns a new mask, so values are
/// freely shared across episode workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::ZeroDimension(width, height));
        }
        let bits = width as u64 * height as u64;
        if bits > u32::MAX as u64 {
            return Err(MaskError::Codec(format!(
                "mask of {width}x{height} exceeds supported pixel count"
            )));
        }
        let nwords = bits.div_ceil(64) as usize;
        Ok(Self {
            width,
            height,
            words: vec![0; nwords],
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    #[inline]
    fn bit_index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        let p = self.bit_index(x, y);
        self.words[p >> 6] >> (p & 63) & 1 == 1
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) -> Result<(), MaskError> {
        if x >= self.width || y >= self.height {
            return Err(MaskError::PixelOutOfBounds(x, y, self.width, self.height));
        }
        let p = self.bit_index(x, y);
        if value {
            self.words[p >> 6] |= 1u64 << (p & 63);
        } else {
            self.words[p >> 6] &= !(1u64 << (p & 63));
        }
        Ok(())
    }

    /// Set the half-open linear bit range `[start, end)` to 1, word at a time.
    fn set_bit_range(&mut self, start: usize, end: usize) {
        if start >= end {
            return;
        }
        let (ws, we) = (start >> 6, (end - 1) >> 6);
        let lo = start & 63;
        let hi = (end - 1) & 63;
        if ws == we {
            let m = (u64::MAX << lo) & (u64::MAX >> (63 - hi));
            self.words[ws] |= m;
        } else {
            self.words[ws] |= u64::MAX << lo;
            for w in &mut self.words[ws + 1..we] {
                *w = u64::MAX;
            }
            self.words[we] |= u64::MAX >> (63 - hi);
        }
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn check_shape(&self, other: &Self) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Bitwise OR of two masks of equal dimensions.
    pub fn union(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_shape(other)?;
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a | b)
            .collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            words,
        })
    }

    /// Bitwise AND of two masks of equal dimensions.
    pub fn intersection(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_shape(other)?;
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a & b)
            .collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            words,
        })
    }

    pub fn intersection_area(&self, other: &Self) -> Result<u64, MaskError> {
        self.check_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum())
    }

    pub fn union_area(&self, other: &Self) -> Result<u64, MaskError> {
        self.check_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as u64)
            .sum())
    }

    /// Pixels in `self` but not in `other`.
    pub fn difference_area(&self, other: &Self) -> Result<u64, MaskError> {
        self.check_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & !b).count_ones() as u64)
            .sum())
    }

    /// Intersection over union. Errors when both masks are empty: the caller
    /// decides that convention (the metric accumulators never reach it).
    pub fn iou(&self, other: &Self) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let uni = self.union_area(other)?;
        if uni == 0 {
            return Err(MaskError::BothEmpty);
        }
        Ok(inter as f64 / uni as f64)
    }

    /// Keep only the pixels inside `bbox`.
    pub fn clip_to_box(&self, bbox: BoundingBox) -> Result<Self, MaskError> {
        let fill = Self::from_box(bbox, self.width, self.height)?;
        self.intersection(&fill)
    }

    /// Fill mask covering exactly the pixels of `bbox`.
    pub fn from_box(bbox: BoundingBox, width: u32, height: u32) -> Result<Self, MaskError> {
        if !bbox.fits_in(width, height) {
            return Err(MaskError::BoxOutOfBounds {
                x_min: bbox.x_min,
                y_min: bbox.y_min,
                x_max: bbox.x_max,
                y_max: bbox.y_max,
                width,
                height,
            });
        }
        let mut mask = Self::empty(width, height)?;
        for y in bbox.y_min..bbox.y_max {
            let row = y as usize * width as usize;
            mask.set_bit_range(row + bbox.x_min as usize, row + bbox.x_max as usize);
        }
        Ok(mask)
    }

    /// Dilate (`grow = true`) or erode by a square structuring element of
    /// Chebyshev radius `radius`. Two separable any/all window passes.
    pub fn morph(&self, radius: u32, grow: bool) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as usize, self.height as usize);
        let r = radius as usize;
        // horizontal pass on bytes, then vertical pass
        let mut horiz = vec![0u8; w * h];
        for y in 0..h {
            let mut run: i64 = 0; // sliding count of set pixels in the window
            for x in 0..w.min(r) {
                run += self.get(x as u32, y as u32) as i64;
            }
            for x in 0..w {
                if x + r < w {
                    run += self.get((x + r) as u32, y as u32) as i64;
                }
                if x > r {
                    run -= self.get((x - r - 1) as u32, y as u32) as i64;
                }
                let span = ((x + r).min(w - 1) - x.saturating_sub(r) + 1) as i64;
                horiz[y * w + x] = if grow {
                    (run > 0) as u8
                } else {
                    (run >= span) as u8
                };
            }
        }
        let mut out = Self::empty(self.width, self.height).expect("same dims");
        for x in 0..w {
            let mut run: i64 = 0;
            for y in 0..h.min(r) {
                run += horiz[y * w + x] as i64;
            }
            for y in 0..h {
                if y + r < h {
                    run += horiz[(y + r) * w + x] as i64;
                }
                if y > r {
                    run -= horiz[(y - r - 1) * w + x] as i64;
                }
                let span = ((y + r).min(h - 1) - y.saturating_sub(r) + 1) as i64;
                let keep = if grow { run > 0 } else { run >= span };
                if keep {
                    let p = y * w + x;
                    out.words[p >> 6] |= 1u64 << (p & 63);
                }
            }
        }
        out
    }

    /// Canonical column-major run-length encoding.
    pub fn to_rle(&self) -> RleMask {
        let (w, h) = (self.width as usize, self.height as usize);
        let words = self.words.as_slice();
        let mut counts: Vec<u32> = Vec::new();
        let mut current = false; // runs start with background
        let mut run: u32 = 0;
        for x in 0..w {
            // walk one column: bit index starts at x and steps by the row
            // stride, avoiding a multiply per pixel
            let mut p = x;
            for _ in 0..h {
                let bit = words[p >> 6] >> (p & 63) & 1 == 1;
                if bit == current {
                    run += 1;
                } else {
                    counts.push(run);
                    current = bit;
                    run = 1;
                }
                p += w;
            }
        }
        counts.push(run);
        RleMask {
            height: self.height,
            width: self.width,
            counts,
        }
    }
}

/// Run-length serialized mask: alternating background/foreground run counts
/// over the column-major pixel traversal, first count covering background.
///
/// Wire text form (field order fixed):
/// `{"size": [height, width], "counts": [c0, c1, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RleWire", into = "RleWire")]
pub struct RleMask {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RleWire {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl TryFrom<RleWire> for RleMask {
    type Error = MaskError;

    fn try_from(w: RleWire) -> Result<Self, MaskError> {
        let rle = RleMask {
            height: w.size[0],
            width: w.size[1],
            counts: w.counts,
        };
        rle.validate()?;
        Ok(rle)
    }
}

impl From<RleMask> for RleWire {
    fn from(r: RleMask) -> RleWire {
        RleWire {
            size: [r.height, r.width],
            counts: r.counts,
        }
    }
}

impl RleMask {
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self, MaskError> {
        let rle = Self {
            height,
            width,
            counts,
        };
        rle.validate()?;
        Ok(rle)
    }

    /// Canonical-form check: counts sum to `width*height`, only the leading
    /// count may be zero. This makes the representation unique per mask.
    pub fn validate(&self) -> Result<(), MaskError> {
        if self.width == 0 || self.height == 0 {
            return Err(MaskError::ZeroDimension(self.width, self.height));
        }
        if self.counts.is_empty() {
            return Err(MaskError::Codec("counts must be non-empty".into()));
        }
        if self.counts[1..].iter().any(|&c| c == 0) {
            return Err(MaskError::Codec(
                "only the leading count may be zero".into(),
            ));
        }
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expect = self.width as u64 * self.height as u64;
        if total != expect {
            return Err(MaskError::Codec(format!(
                "counts sum {total} != width*height {expect}"
            )));
        }
        Ok(())
    }

    /// Foreground pixel count without decoding.
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| c as u64)
            .sum()
    }

    /// Inverse of [`BinaryMask::to_rle`], bit-exact.
    pub fn to_mask(&self) -> Result<BinaryMask, MaskError> {
        self.validate()?;
        let mut mask = BinaryMask::empty(self.width, self.height)?;
        let (w, h) = (self.width as usize, self.height as usize);
        // track (x, y) incrementally over the column-major traversal
        let mut x = 0usize;
        let mut y = 0usize;
        let mut fg = false;
        for &c in &self.counts {
            if fg {
                let mut p = y * w + x;
                for _ in 0..c {
                    mask.words[p >> 6] |= 1u64 << (p & 63);
                    y += 1;
                    if y == h {
                        y = 0;
                        x += 1;
                        p = x;
                    } else {
                        p += w;
                    }
                }
            } else {
                let t = x * h + y + c as usize;
                x = t / h;
                y = t % h;
            }
            fg = !fg;
        }
        Ok(mask)
    }
}

/// Equivalent to `BinaryMask::from_box` at module scope; the box-fill
/// segmentation variant calls this directly.
pub fn mask_from_box(bbox: BoundingBox, width: u32, height: u32) -> Result<BinaryMask, MaskError> {
    BinaryMask::from_box(bbox, width, height)
}
