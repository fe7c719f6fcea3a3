//! Binary masks, pixel geometry, IoU, union and run-length encoding.
//!
//! Masks are stored bit-packed in row-major order: pixel `(x, y)` lives at
//! bit `y * width + x`, origin top-left, `x` is the column. Padding bits past
//! `width * height` are always zero so word-level popcounts are exact.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WORD: usize = 64;

/// H×W foreground map.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("foreground", &self.count())
            .finish()
    }
}

impl BinaryMask {
    /// All-background mask.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMask(format!(
                "mask dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        let n = width * height;
        Ok(BinaryMask {
            width,
            height,
            words: vec![0; n.div_ceil(WORD)],
        })
    }

    pub fn from_bools(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        let mut m = Self::new(width, height)?;
        if bits.len() != width * height {
            return Err(Error::InvalidMask(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                bits.len()
            )));
        }
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.words[i / WORD] |= 1 << (i % WORD);
            }
        }
        Ok(m)
    }

    /// Builds a mask from foreground pixel coordinates; out-of-canvas pixels are an error.
    pub fn from_pixels<I>(width: usize, height: usize, pixels: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut m = Self::new(width, height)?;
        for (x, y) in pixels {
            if x >= width || y >= height {
                return Err(Error::InvalidMask(format!(
                    "pixel ({x},{y}) outside {width}x{height} canvas"
                )));
            }
            m.set(x, y, true);
        }
        Ok(m)
    }

    /// Mask whose foreground is the inclusive box.
    pub fn from_bbox(width: usize, height: usize, bbox: &BBox) -> Result<Self> {
        bbox.validate(width, height)?;
        let mut m = Self::new(width, height)?;
        for y in bbox.y1..=bbox.y2 {
            m.fill_range(y * width + bbox.x1, y * width + bbox.x2 + 1);
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of pixels, `width * height`.
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    /// True when there is no foreground pixel.
    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            })
        }
    }

    /// Panics if `(x, y)` is outside the canvas.
    pub fn get(&self, x: usize, y: usize) -> bool {
        assert!(
            x < self.width && y < self.height,
            "pixel ({x},{y}) out of bounds"
        );
        let i = y * self.width + x;
        self.words[i / WORD] >> (i % WORD) & 1 == 1
    }

    /// Like [`get`](Self::get) but returns `false` outside the canvas.
    pub fn get_checked(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        assert!(
            x < self.width && y < self.height,
            "pixel ({x},{y}) out of bounds"
        );
        let i = y * self.width + x;
        if value {
            self.words[i / WORD] |= 1 << (i % WORD);
        } else {
            self.words[i / WORD] &= !(1 << (i % WORD));
        }
    }

    fn fill_range(&mut self, start: usize, end: usize) {
        for i in start..end {
            self.words[i / WORD] |= 1 << (i % WORD);
        }
    }

    /// Foreground pixel count.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Popcount over the bit range `[start, end)`.
    fn count_range(&self, start: usize, end: usize) -> usize {
        if start >= end {
            return 0;
        }
        let (sw, ew) = (start / WORD, (end - 1) / WORD);
        let lo = !0u64 << (start % WORD);
        let hi = !0u64 >> (WORD - 1 - (end - 1) % WORD);
        if sw == ew {
            return (self.words[sw] & lo & hi).count_ones() as usize;
        }
        let mut n = (self.words[sw] & lo).count_ones() + (self.words[ew] & hi).count_ones();
        for w in &self.words[sw + 1..ew] {
            n += w.count_ones();
        }
        n as usize
    }

    /// Foreground pixels inside the inclusive box. Box parts outside the canvas are ignored.
    pub fn count_in_box(&self, bbox: &BBox) -> usize {
        if bbox.x1 >= self.width || bbox.y1 >= self.height {
            return 0;
        }
        let x2 = bbox.x2.min(self.width - 1);
        let y2 = bbox.y2.min(self.height - 1);
        (bbox.y1..=y2)
            .map(|y| self.count_range(y * self.width + bbox.x1, y * self.width + x2 + 1))
            .sum()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    /// True if the two masks share a foreground pixel.
    pub fn intersects(&self, other: &BinaryMask) -> Result<bool> {
        self.check_dims(other)?;
        Ok(self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0))
    }

    /// True if every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.check_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0))
    }

    pub fn or_assign(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_dims(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    /// Foreground pixels in row-major order.
    pub fn iter_ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = wi * WORD + tz;
                Some((i % w, i / w))
            })
        })
    }

    /// Row-major booleans.
    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| self.words[i / WORD] >> (i % WORD) & 1 == 1)
            .collect()
    }

    /// Tight bounding box of the foreground, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut it = self.iter_ones();
        let (x0, y0) = it.next()?;
        let (mut x1, mut y1, mut x2, mut y2) = (x0, y0, x0, y0);
        for (x, y) in it {
            x1 = x1.min(x);
            x2 = x2.max(x);
            y1 = y1.min(y);
            y2 = y2.max(y);
        }
        Some(BBox { x1, y1, x2, y2 })
    }

    /// Writes binary PGM (P5), 0 = background, 255 = foreground.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .to_bools()
            .into_iter()
            .map(|b| if b { 255 } else { 0 })
            .collect();
        out.write_all(&bytes)
    }

    /// Reads binary PGM (P5); values ≥ 128 are foreground.
    pub fn read_pgm<R: Read>(mut input: R) -> std::result::Result<Self, String> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf).map_err(|e| e.to_string())?;
        parse_pgm(&buf)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_pgm(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&buf).map_err(|msg| Error::malformed(path, None, msg))
    }
}

fn parse_pgm(buf: &[u8]) -> std::result::Result<BinaryMask, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (expected P5 magic)".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?
            .parse::<usize>()
            .map_err(|_| format!("bad PGM {what}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let n = width * height;
    if buf.len() < data_start + n {
        return Err(format!("PGM raster truncated: need {n} bytes"));
    }
    let bits: Vec<bool> = buf[data_start..data_start + n]
        .iter()
        .map(|&v| v >= 128)
        .collect();
    BinaryMask::from_bools(width, height, &bits).map_err(|e| e.to_string())
}

/// Intersection over union. Two empty masks score 1.0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let uni = a.union_count(b)?;
    Ok(if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    })
}

/// Pixelwise OR. An empty list needs `canvas` to know the output size.
pub fn union(masks: &[BinaryMask], canvas: Option<(usize, usize)>) -> Result<BinaryMask> {
    let mut out = match (masks.first(), canvas) {
        (Some(m), _) => BinaryMask::new(m.width, m.height)?,
        (None, Some((w, h))) => BinaryMask::new(w, h)?,
        (None, None) => {
            return Err(Error::InvalidMask(
                "union of an empty list requires a canvas size".into(),
            ))
        }
    };
    if let (Some((w, h)), Some(m)) = (canvas, masks.first()) {
        if (w, h) != (m.width, m.height) {
            return Err(Error::DimensionMismatch {
                left_w: w,
                left_h: h,
                right_w: m.width,
                right_h: m.height,
            });
        }
    }
    for m in masks {
        out.or_assign(m)?;
    }
    Ok(out)
}

/// Inclusive pixel box, `x` is the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x1 <= self.x2 && self.y1 <= self.y2 && self.x2 < width && self.y2 < height {
            Ok(())
        } else {
            Err(Error::InvalidMask(format!(
                "box [{},{},{},{}] invalid on {width}x{height} canvas",
                self.x1, self.y1, self.x2, self.y2
            )))
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x1..=self.x2).contains(&x) && (self.y1..=self.y2).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x2 + 1 - self.x1) * (self.y2 + 1 - self.y1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPx {
    pub x: usize,
    pub y: usize,
    pub polarity: Polarity,
}

impl PointPx {
    pub fn positive(x: usize, y: usize) -> Self {
        PointPx {
            x,
            y,
            polarity: Polarity::Positive,
        }
    }

    pub fn negative(x: usize, y: usize) -> Self {
        PointPx {
            x,
            y,
            polarity: Polarity::Negative,
        }
    }

    pub fn in_canvas(&self, width: usize, height: usize) -> bool {
        self.x < width && self.y < height
    }
}

/// Row-major run lengths, alternating background/foreground, background first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidRle(format!(
                "dimensions must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        let total: u64 = self.counts.iter().sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::InvalidRle(format!(
                "counts sum to {total}, expected {}",
                self.width * self.height
            )));
        }
        if let Some(i) = self.counts.windows(2).position(|w| w[0] == 0 && w[1] == 0) {
            return Err(Error::InvalidRle(format!(
                "consecutive zero runs at index {i}"
            )));
        }
        Ok(())
    }
}

pub fn rle_encode(m: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for b in m.to_bools() {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    RleMask {
        width: m.width,
        height: m.height,
        counts,
    }
}

pub fn rle_decode(r: &RleMask) -> Result<BinaryMask> {
    r.validate()?;
    let mut m = BinaryMask::new(r.width, r.height)?;
    let mut pos = 0usize;
    for (i, &c) in r.counts.iter().enumerate() {
        let end = pos + c as usize;
        if i % 2 == 1 {
            m.fill_range(pos, end);
        }
        pos = end;
    }
    Ok(m)
}
