//! PNG overlays of reported tracks for visual inspection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;

use super::format::{frame_file_name, FrameSource, SequenceDir, TrackRecord};
use crate::error::{Error, Result};
use crate::geometry::DepthMap;

const ALPHA: f32 = 0.5;
/// Depth mapped to the darkest background shade.
const FAR: f64 = 60.0;

/// Stable, well-spread colour per track id.
pub fn track_color(id: u64) -> Rgb<u8> {
    let hue = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |v: f64| (55.0 + 200.0 * v) as u8;
    Rgb([c(r), c(g), c(b)])
}

fn background(height: u32, width: u32, depth: Option<&DepthMap>) -> RgbImage {
    RgbImage::from_fn(width, height, |col, row| {
        let shade = match depth.and_then(|d| d.get(row, col)) {
            Some(z) => (200.0 * (1.0 - (z / FAR).min(1.0)) + 30.0) as u8,
            None => 20,
        };
        Rgb([shade, shade, shade])
    })
}

/// Draws one frame's tracks over a depth-shaded background.
pub fn render_frame(height: u32, width: u32, depth: Option<&DepthMap>, tracks: &[&TrackRecord]) -> Result<RgbImage> {
    let mut img = background(height, width, depth);
    for r in tracks {
        if (r.mask.height(), r.mask.width()) != (height, width) {
            return Err(Error::DimensionMismatch {
                left_h: r.mask.height(),
                left_w: r.mask.width(),
                right_h: height,
                right_w: width,
            });
        }
        let color = track_color(r.id);
        for (row, col) in r.mask.pixels() {
            let p = img.get_pixel_mut(col, row);
            for k in 0..3 {
                p[k] = ((1.0 - ALPHA) * p[k] as f32 + ALPHA * color[k] as f32) as u8;
            }
        }
        let (x0, y0) = (r.bbox.x.floor().max(0.0) as u32, r.bbox.y.floor().max(0.0) as u32);
        let x1 = (r.bbox.right().ceil() as u32).clamp(1, width) - 1;
        let y1 = (r.bbox.bottom().ceil() as u32).clamp(1, height) - 1;
        for x in x0..=x1 {
            img.put_pixel(x, y0, color);
            img.put_pixel(x, y1, color);
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, color);
            img.put_pixel(x1, y, color);
        }
    }
    Ok(img)
}

/// Writes `NNNNNN.png` for every frame of the sequence; returns the paths.
pub fn render_sequence(seq: &SequenceDir, tracks: &[TrackRecord], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut by_frame: BTreeMap<u32, Vec<&TrackRecord>> = BTreeMap::new();
    for r in tracks {
        if r.frame >= seq.len() {
            return Err(Error::InvalidInput(format!("track row for frame {} beyond the sequence", r.frame)));
        }
        by_frame.entry(r.frame).or_default().push(r);
    }
    let calib = *seq.calibration();
    (0..seq.len())
        .into_par_iter()
        .map(|t| {
            let depth = seq.depth(t)?;
            let rows = by_frame.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            let img = render_frame(calib.height, calib.width, depth.as_ref(), rows)?;
            let path = out.join(format!("{}.png", frame_file_name(t)));
            img.save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use crate::rle::RleMask;

    fn record(id: u64) -> TrackRecord {
        let mut dense = vec![false; 20 * 30];
        for r in 5..10 {
            for c in 10..16 {
                dense[r * 30 + c] = true;
            }
        }
        let mask = RleMask::encode(20, 30, &dense).unwrap();
        TrackRecord {
            frame: 0,
            id,
            bbox: mask.bbox().unwrap(),
            mask,
            pos: [0.0; 3],
            vel: [0.0; 2],
            cam_pos: [0.0; 3],
            label: None,
            predicted: false,
            unary: -1.0,
        }
    }

    #[test]
    fn colors_differ_for_neighbouring_ids() {
        for id in 0..50 {
            assert_ne!(track_color(id), track_color(id + 1));
        }
    }

    #[test]
    fn overlay_touches_only_mask_and_outline() {
        let r = record(3);
        let img = render_frame(20, 30, None, &[&r]).unwrap();
        assert_eq!(*img.get_pixel(0, 0), Rgb([20, 20, 20]));
        assert_eq!(*img.get_pixel(10, 5), track_color(3));
        assert_ne!(*img.get_pixel(12, 7), Rgb([20, 20, 20]));
        assert_eq!(*img.get_pixel(17, 7), Rgb([20, 20, 20]));
        let BBox { w, h, .. } = r.bbox;
        assert_eq!((w, h), (6.0, 5.0));
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(render_frame(10, 30, None, &[&record(0)]).is_err());
    }
}
