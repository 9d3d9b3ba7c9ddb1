//! Run-length encoded binary masks.
//!
//! Runs are stored in row-major scan order, alternating 0-pixels and
//! 1-pixels and always starting with the count of leading 0-pixels (which
//! may be zero). No other run is zero, so two masks are equal exactly when
//! their encodings are equal. Area, intersection, IoU and bounding boxes are
//! all computed by walking the run lists without decompressing.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RleMask {
    height: u32,
    width: u32,
    counts: Arc<[u32]>,
}

/// Accumulates runs into canonical form.
struct RunBuilder {
    counts: Vec<u32>,
    current: bool,
}

impl RunBuilder {
    fn new() -> Self {
        Self {
            counts: vec![0],
            current: false,
        }
    }

    fn push(&mut self, value: bool, len: u32) {
        if len == 0 {
            return;
        }
        if value == self.current {
            *self.counts.last_mut().unwrap() += len;
        } else {
            self.counts.push(len);
            self.current = value;
        }
    }

    fn finish(self, height: u32, width: u32) -> RleMask {
        RleMask {
            height,
            width,
            counts: self.counts.into(),
        }
    }
}

/// Walks two run lists of equal total length in lock step, calling `f` with
/// the pair of pixel values and the length of each constant segment.
fn merge_runs(a: &[u32], b: &[u32], mut f: impl FnMut(bool, bool, u32)) {
    let (mut ia, mut ib) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0], b[0]);
    let (mut va, mut vb) = (false, false);
    loop {
        while ra == 0 {
            ia += 1;
            if ia == a.len() {
                return;
            }
            ra = a[ia];
            va = !va;
        }
        while rb == 0 {
            ib += 1;
            if ib == b.len() {
                return;
            }
            rb = b[ib];
            vb = !vb;
        }
        let step = ra.min(rb);
        f(va, vb, step);
        ra -= step;
        rb -= step;
    }
}

impl RleMask {
    /// Encodes a row-major dense grid.
    pub fn encode(height: u32, width: u32, dense: &[bool]) -> Result<Self> {
        let n = height as usize * width as usize;
        if n == 0 {
            return Err(Error::InvalidInput("cannot encode an empty grid".into()));
        }
        if dense.len() != n {
            return Err(Error::InvalidInput(format!(
                "grid has {} cells, expected {height}x{width}",
                dense.len()
            )));
        }
        let mut builder = RunBuilder::new();
        let mut start = 0usize;
        for i in 1..=n {
            if i == n || dense[i] != dense[start] {
                builder.push(dense[start], (i - start) as u32);
                start = i;
            }
        }
        Ok(builder.finish(height, width))
    }

    /// Encodes a grid given as rows.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidInput("ragged grid".into()));
        }
        let dense: Vec<bool> = rows.iter().flatten().copied().collect();
        Self::encode(height as u32, width as u32, &dense)
    }

    pub fn empty(height: u32, width: u32) -> Self {
        let mut b = RunBuilder::new();
        b.push(false, height * width);
        b.finish(height, width)
    }

    pub fn full(height: u32, width: u32) -> Self {
        let mut b = RunBuilder::new();
        b.push(true, height * width);
        b.finish(height, width)
    }

    /// Builds a mask from strictly increasing row-major pixel indices.
    pub fn from_sorted_indices(
        height: u32,
        width: u32,
        indices: impl IntoIterator<Item = usize>,
    ) -> Self {
        let n = height as usize * width as usize;
        let mut b = RunBuilder::new();
        let mut next = 0usize;
        for idx in indices {
            debug_assert!(idx >= next && idx < n, "indices must be increasing and in range");
            b.push(false, (idx - next) as u32);
            b.push(true, 1);
            next = idx + 1;
        }
        b.push(false, (n - next) as u32);
        b.finish(height, width)
    }

    /// Builds a mask from explicit run counts. Interior zero runs are merged
    /// away so the result is canonical.
    pub fn from_counts(height: u32, width: u32, counts: &[u32]) -> Result<Self> {
        let n = height as u64 * width as u64;
        if n == 0 {
            return Err(Error::InvalidInput("mask has zero size".into()));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != n {
            return Err(Error::InvalidInput(format!(
                "run lengths sum to {total}, expected {height}x{width}={n}"
            )));
        }
        let mut b = RunBuilder::new();
        for (i, &c) in counts.iter().enumerate() {
            b.push(i % 2 == 1, c);
        }
        Ok(b.finish(height, width))
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.height as usize * self.width as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        out
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.len() == 1
    }

    fn check_dims(&self, other: &RleMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::DimensionMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            });
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &RleMask) -> Result<u64> {
        self.check_dims(other)?;
        let mut area = 0u64;
        merge_runs(&self.counts, &other.counts, |a, b, len| {
            if a && b {
                area += len as u64;
            }
        });
        Ok(area)
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &RleMask) -> Result<f64> {
        let inter = self.intersection_area(other)?;
        let union = self.area() + other.area() - inter;
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// Intersection over the area of the smaller mask; 0 if either is empty.
    pub fn min_overlap(&self, other: &RleMask) -> Result<f64> {
        let smaller = self.area().min(other.area());
        if smaller == 0 {
            self.check_dims(other)?;
            return Ok(0.0);
        }
        let inter = self.intersection_area(other)?;
        Ok(inter as f64 / smaller as f64)
    }

    fn combine(&self, other: &RleMask, op: impl Fn(bool, bool) -> bool) -> Result<RleMask> {
        self.check_dims(other)?;
        let mut b = RunBuilder::new();
        merge_runs(&self.counts, &other.counts, |x, y, len| b.push(op(x, y), len));
        Ok(b.finish(self.height, self.width))
    }

    pub fn intersection(&self, other: &RleMask) -> Result<RleMask> {
        self.combine(other, |a, b| a && b)
    }

    pub fn union(&self, other: &RleMask) -> Result<RleMask> {
        self.combine(other, |a, b| a || b)
    }

    /// Foreground pixels grouped as `(row, col_start, col_end)` segments,
    /// `col_end` exclusive, in scan order.
    pub fn row_segments(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        let w = self.width as u64;
        let mut pos = 0u64;
        self.counts
            .iter()
            .enumerate()
            .flat_map(move |(i, &c)| {
                let start = pos;
                pos += c as u64;
                let run = if i % 2 == 1 && c > 0 {
                    Some((start, start + c as u64))
                } else {
                    None
                };
                run.into_iter().flat_map(move |(s, e)| {
                    let first_row = s / w;
                    let last_row = (e - 1) / w;
                    (first_row..=last_row).map(move |r| {
                        let row_start = r * w;
                        let cs = s.max(row_start) - row_start;
                        let ce = e.min(row_start + w) - row_start;
                        (r as u32, cs as u32, ce as u32)
                    })
                })
            })
    }

    /// Foreground pixel coordinates `(row, col)` in scan order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.row_segments()
            .flat_map(|(r, cs, ce)| (cs..ce).map(move |c| (r, c)))
    }

    /// Tight pixel bounding box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let w = self.width as u64;
        let mut pos = 0u64;
        let (mut x0, mut x1, mut y0, mut y1) = (u64::MAX, 0u64, u64::MAX, 0u64);
        for (i, &c) in self.counts.iter().enumerate() {
            let start = pos;
            pos += c as u64;
            if i % 2 == 0 || c == 0 {
                continue;
            }
            let end = pos - 1;
            let (rs, re) = (start / w, end / w);
            y0 = y0.min(rs);
            y1 = y1.max(re);
            if rs == re {
                x0 = x0.min(start % w);
                x1 = x1.max(end % w);
            } else {
                x0 = 0;
                x1 = w - 1;
            }
        }
        (y0 != u64::MAX).then(|| {
            BBox::new(
                x0 as f64,
                y0 as f64,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            )
        })
    }

    /// Shifts the mask by whole pixels, clipping at the image border.
    pub fn translate(&self, dx: i64, dy: i64) -> RleMask {
        let (h, w) = (self.height as i64, self.width as i64);
        let indices = self.row_segments().filter_map(move |(r, cs, ce)| {
            let nr = r as i64 + dy;
            if nr < 0 || nr >= h {
                return None;
            }
            let ncs = (cs as i64 + dx).max(0);
            let nce = (ce as i64 + dx).min(w);
            (ncs < nce).then_some((nr, ncs, nce))
        });
        let mut b = RunBuilder::new();
        let mut next = 0i64;
        for (r, cs, ce) in indices {
            let s = r * w + cs;
            b.push(false, (s - next) as u32);
            b.push(true, (ce - cs) as u32);
            next = r * w + ce;
        }
        b.push(false, (h * w - next) as u32);
        b.finish(self.height, self.width)
    }

    /// Keeps only foreground pixels whose column lies in `[col_start, col_end)`.
    pub fn restrict_columns(&self, col_start: u32, col_end: u32) -> RleMask {
        let w = self.width as u64;
        let mut b = RunBuilder::new();
        let mut next = 0u64;
        for (r, cs, ce) in self.row_segments() {
            let (cs, ce) = (cs.max(col_start), ce.min(col_end));
            if cs >= ce {
                continue;
            }
            let s = r as u64 * w + cs as u64;
            b.push(false, (s - next) as u32);
            b.push(true, ce - cs);
            next = r as u64 * w + ce as u64;
        }
        b.push(false, (self.height as u64 * w - next) as u32);
        b.finish(self.height, self.width)
    }
}

impl fmt::Debug for RleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RleMask")
            .field("size", &(self.height, self.width))
            .field("area", &self.area())
            .field("runs", &self.counts.len())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct RleWire {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl Serialize for RleMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RleWire {
            size: [self.height, self.width],
            counts: self.counts.to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RleMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = RleWire::deserialize(d)?;
        RleMask::from_counts(wire.size[0], wire.size[1], &wire.counts)
            .map_err(serde::de::Error::custom)
    }
}
