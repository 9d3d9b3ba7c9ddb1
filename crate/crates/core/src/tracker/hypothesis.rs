use crate::bbox::BBox;
use crate::geometry::Vec3;
use crate::rle::RleMask;

use super::kalman::KalmanState;

/// One frame of a hypothesis.
#[derive(Debug, Clone)]
pub struct TrackFrame {
    pub frame: u32,
    /// The associated observation's mask, or the predicted mask on a miss.
    pub mask: RleMask,
    pub bbox: Option<BBox>,
    /// Index into that frame's observation list; `None` means the mask is predicted.
    pub observation: Option<usize>,
    /// Proposal score of the associated observation, 0 when predicted.
    pub score: f64,
    /// IoU between the predicted mask and the associated observation, 0 when
    /// predicted or when no prediction existed (first frame).
    pub similarity: f64,
    pub class: Option<(String, f64)>,
    /// Filtered world-frame bottom point and planar velocity.
    pub pos: Vec3,
    pub vel: [f64; 2],
}

impl TrackFrame {
    pub fn is_predicted(&self) -> bool {
        self.observation.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub id: u64,
    /// Frame at which the hypothesis entered the set.
    pub created: u32,
    /// Contiguous per-frame records, oldest first.
    pub frames: Vec<TrackFrame>,
    pub state: KalmanState,
    pub misses: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub first: u32,
    pub last: u32,
    pub hull: BBox,
}

impl Extent {
    pub fn meets(&self, other: &Extent) -> bool {
        self.first.max(other.first) <= self.last.min(other.last) && self.hull.intersects(&other.hull)
    }
}

impl Hypothesis {
    pub fn first_frame(&self) -> u32 {
        self.frames[0].frame
    }

    pub fn last_frame(&self) -> u32 {
        self.frames[self.frames.len() - 1].frame
    }

    pub fn last(&self) -> &TrackFrame {
        &self.frames[self.frames.len() - 1]
    }

    pub fn frame_at(&self, t: u32) -> Option<&TrackFrame> {
        let first = self.first_frame();
        if t < first {
            return None;
        }
        self.frames.get((t - first) as usize)
    }

    /// Frames present in both hypotheses, as pairs.
    pub fn common_frames<'a>(
        &'a self,
        other: &'a Hypothesis,
    ) -> impl Iterator<Item = (&'a TrackFrame, &'a TrackFrame)> + 'a {
        let start = self.first_frame().max(other.first_frame());
        let end = self.last_frame().min(other.last_frame());
        (start..=end)
            .take_while(move |_| start <= end)
            .filter_map(move |t| Some((self.frame_at(t)?, other.frame_at(t)?)))
    }

    /// Frame span and bounding-box hull of the frames up to `t_e`; `None`
    /// when no such frame has a non-empty mask. Pairs whose extents do not
    /// meet share no overlapping frame.
    pub fn extent(&self, t_e: u32) -> Option<Extent> {
        let mut boxes = self.frames.iter().take_while(|f| f.frame <= t_e).filter_map(|f| f.bbox);
        let first = boxes.next()?;
        let hull = boxes.fold(first, |acc, b| acc.hull(&b));
        Some(Extent {
            first: self.first_frame(),
            last: self.last_frame().min(t_e),
            hull,
        })
    }

    pub fn is_contiguous(&self) -> bool {
        self.frames.windows(2).all(|w| w[1].frame == w[0].frame + 1)
    }

    /// Number of trailing predicted frames.
    pub fn trailing_predicted(&self) -> u32 {
        self.frames.iter().rev().take_while(|f| f.is_predicted()).count() as u32
    }
}
