//! Deterministic synthetic street scenes with controllable proposal
//! corruption.
//!
//! Objects are fronto-parallel rectangles standing on a flat ground plane,
//! optionally between two façade walls. Every frame is rendered with a
//! z-buffer, so depth, flow, and the ground-truth boxes are exact; the
//! proposals are then derived from the visible masks and corrupted. Each
//! frame draws from its own random stream, so any frame can be generated
//! independently of the others.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::GtBox;
use crate::geometry::{CameraIntrinsics, DepthMap, FlowField, GroundPlane, RigidTransform, Vec3};
use crate::observations::{FrameContext, Proposal};
use crate::rle::RleMask;

/// Depth beyond which the renderer reports no measurement.
const MAX_DEPTH: f64 = 80.0;
const NEAR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Height of the optical centre above the ground.
    pub mount_height: f64,
    /// Forward motion per frame along the current heading.
    pub forward_speed: f64,
    /// Heading change per frame in radians.
    pub yaw_rate: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 192,
            fx: 360.0,
            fy: 360.0,
            cx: 320.0,
            cy: 96.0,
            mount_height: 1.6,
            forward_speed: 0.0,
            yaw_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub label: String,
    /// Width and height in meters.
    pub size: [f64; 2],
    /// World `(x, z)` of the bottom centre at frame 0.
    pub start: [f64; 2],
    /// World `(dx, dz)` per frame.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Half-open frame ranges during which the object yields no proposal.
    #[serde(default)]
    pub hidden: Vec<[u32; 2]>,
}

impl ObjectSpec {
    fn is_hidden(&self, t: u32) -> bool {
        self.hidden.iter().any(|[a, b]| (*a..*b).contains(&t))
    }

    fn world_center(&self, t: u32, mount_height: f64) -> Vec3 {
        Vec3::new(
            self.start[0] + self.velocity[0] * t as f64,
            -mount_height + self.size[1] / 2.0,
            self.start[1] + self.velocity[1] * t as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Corruption {
    /// Probability that an object is reported as two vertical halves.
    pub over_segmentation: f64,
    /// Probability that two objects with intersecting boxes are reported as one.
    pub under_segmentation: f64,
    pub dropout: f64,
    /// Random rectangles added per frame.
    pub clutter: u32,
    /// Maximum random shift of object masks in pixels.
    pub jitter: u32,
    /// Standard deviation of per-object position noise in meters.
    pub position_noise: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            over_segmentation: 0.0,
            under_segmentation: 0.0,
            dropout: 0.0,
            clutter: 0,
            jitter: 0,
            position_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Outputs {
    /// Attach precomputed positions and velocities to object proposals.
    pub precomputed_positions: bool,
    pub ground: bool,
    pub flow: bool,
    /// Probability that an object proposal carries its class score.
    pub class_score_rate: f64,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            precomputed_positions: false,
            ground: true,
            flow: true,
            class_score_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub frames: u32,
    #[serde(default)]
    pub camera: CameraSpec,
    /// Lateral world distance of two infinite façade walls, if any.
    #[serde(default)]
    pub walls: Option<f64>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub corruption: Corruption,
    #[serde(default)]
    pub outputs: Outputs,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.corruption;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![c.over_segmentation, c.under_segmentation, c.dropout, self.outputs.class_score_rate]
            .into_iter()
            .all(unit)
        {
            return Err(Error::InvalidInput("corruption probabilities must lie in [0,1]".into()));
        }
        if !(c.position_noise >= 0.0) {
            return Err(Error::InvalidInput("position noise must be non-negative".into()));
        }
        if self.frames == 0 || self.camera.width == 0 || self.camera.height == 0 {
            return Err(Error::InvalidInput("scenario needs frames and a non-empty image".into()));
        }
        if !(self.camera.mount_height > 0.0) {
            return Err(Error::InvalidInput("camera mount height must be positive".into()));
        }
        if let Some(d) = self.walls {
            if !(d > 0.0) {
                return Err(Error::InvalidInput("wall distance must be positive".into()));
            }
        }
        for o in &self.objects {
            if !(o.size[0] > 0.0 && o.size[1] > 0.0) {
                return Err(Error::InvalidInput(format!("object '{}' has non-positive size", o.label)));
            }
        }
        CameraIntrinsics::new(self.camera.fx, self.camera.fy, self.camera.cx, self.camera.cy)?;
        Ok(())
    }
}

/// Counts of corruption draws in one frame; rates are `events / eligible`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CorruptionStats {
    pub dropout_eligible: u64,
    pub dropped: u64,
    pub merge_eligible: u64,
    pub merged: u64,
    pub split_eligible: u64,
    pub split: u64,
    pub clutter: u64,
}

impl CorruptionStats {
    pub fn add(&mut self, o: &CorruptionStats) {
        self.dropout_eligible += o.dropout_eligible;
        self.dropped += o.dropped;
        self.merge_eligible += o.merge_eligible;
        self.merged += o.merged;
        self.split_eligible += o.split_eligible;
        self.split += o.split;
        self.clutter += o.clutter;
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub ctx: FrameContext,
    pub proposals: Vec<Proposal>,
    pub gt: Vec<GtBox>,
    pub stats: CorruptionStats,
}

pub struct Scenario {
    spec: ScenarioSpec,
    intrinsics: CameraIntrinsics,
    /// World-from-camera pose per frame.
    poses: Vec<RigidTransform>,
}

/// Object proposal before it is turned into a `Proposal`.
struct Candidate {
    mask: RleMask,
    score: f64,
    class: Option<(String, f64)>,
    /// Camera-frame centre and world velocity, for precomputed positions.
    center: Vec3,
    velocity: [f64; 2],
}

impl Scenario {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let cam = &spec.camera;
        let intrinsics = CameraIntrinsics::new(cam.fx, cam.fy, cam.cx, cam.cy)?;
        // Camera t expressed in camera t-1: advance along the heading, then turn.
        let step = RigidTransform::yaw(cam.yaw_rate, Vec3::new(0.0, 0.0, cam.forward_speed));
        let mut poses = Vec::with_capacity(spec.frames as usize);
        let mut pose = RigidTransform::identity();
        for t in 0..spec.frames {
            if t > 0 {
                pose = pose.compose(&step);
            }
            poses.push(pose.clone());
        }
        Ok(Self {
            spec,
            intrinsics,
            poses,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn len(&self) -> u32 {
        self.spec.frames
    }

    pub fn is_empty(&self) -> bool {
        self.spec.frames == 0
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.spec.camera.height, self.spec.camera.width)
    }

    pub fn world_from_camera(&self, t: u32) -> &RigidTransform {
        &self.poses[t as usize]
    }

    /// Maps camera `t-1` coordinates to camera `t`; identity at frame 0.
    pub fn ego(&self, t: u32) -> RigidTransform {
        if t == 0 {
            RigidTransform::identity()
        } else {
            self.poses[t as usize]
                .inverse()
                .compose(&self.poses[t as usize - 1])
        }
    }

    /// Ground plane in camera coordinates (constant: the camera only yaws).
    pub fn ground(&self) -> GroundPlane {
        GroundPlane::new(Vec3::new(0.0, 1.0, 0.0), self.spec.camera.mount_height).expect("unit normal")
    }

    fn rng(&self, t: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(t as u64 + 1);
        rng
    }

    /// Camera-frame planes of the static background.
    fn background_planes(&self, camera_from_world: &RigidTransform) -> Vec<GroundPlane> {
        let mut planes = vec![self.ground()];
        if let Some(d) = self.spec.walls {
            for sign in [1.0, -1.0] {
                let wall = GroundPlane::new(Vec3::new(sign, 0.0, 0.0), -d).expect("unit normal");
                planes.push(wall.transformed(camera_from_world));
            }
        }
        planes
    }

    pub fn frame(&self, t: u32) -> Result<SyntheticFrame> {
        if t >= self.spec.frames {
            return Err(Error::InvalidInput(format!("frame {t} beyond scenario length {}", self.spec.frames)));
        }
        let spec = &self.spec;
        let cam = &spec.camera;
        let (h, w) = (cam.height, cam.width);
        let intr = self.intrinsics;
        let world_from_camera = self.poses[t as usize].clone();
        let camera_from_world = world_from_camera.inverse();
        let mut rng = self.rng(t);
        let offsets: Vec<f64> = spec
            .objects
            .iter()
            .map(|_| gaussian(&mut rng, spec.corruption.position_noise))
            .collect();

        // Background depth.
        let planes = self.background_planes(&camera_from_world);
        let mut zbuf = vec![0.0f64; (h * w) as usize];
        for r in 0..h {
            for c in 0..w {
                let dir = Vec3::new((c as f64 - intr.cx) / intr.fx, -(r as f64 - intr.cy) / intr.fy, 1.0);
                let mut best = f64::INFINITY;
                for p in &planes {
                    let denom = p.normal.dot(&dir);
                    if denom.abs() > 1e-12 {
                        let s = -p.offset / denom;
                        if s > NEAR && s < best {
                            best = s;
                        }
                    }
                }
                if best <= MAX_DEPTH {
                    zbuf[(r * w + c) as usize] = best;
                }
            }
        }

        // Objects, nearest wins.
        let mut owner: Vec<Option<usize>> = vec![None; (h * w) as usize];
        let mut centers = Vec::with_capacity(spec.objects.len());
        let mut extents = Vec::with_capacity(spec.objects.len());
        for (k, o) in spec.objects.iter().enumerate() {
            let c = camera_from_world.apply(&o.world_center(t, cam.mount_height));
            centers.push(c);
            let z = c.z + offsets[k];
            let extent = (z > NEAR).then(|| pixel_extent(&intr, &c, o.size, z, h, w)).flatten();
            extents.push(extent);
            let Some((c0, c1, r0, r1)) = extent else {
                continue;
            };
            for r in r0..r1 {
                for col in c0..c1 {
                    let i = (r * w + col) as usize;
                    if zbuf[i] <= 0.0 || z < zbuf[i] {
                        zbuf[i] = z;
                        owner[i] = Some(k);
                    }
                }
            }
        }
        let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); spec.objects.len()];
        for (i, o) in owner.iter().enumerate() {
            if let Some(k) = o {
                pixels[*k].push(i);
            }
        }
        let visible: Vec<RleMask> = pixels
            .into_iter()
            .map(|idx| RleMask::from_sorted_indices(h, w, idx))
            .collect();

        let depth = DepthMap::new(h, w, zbuf.iter().map(|&z| z as f32).collect())?;
        let flow = if spec.outputs.flow {
            let data = owner
                .iter()
                .map(|o| match o {
                    Some(k) => {
                        let v = spec.objects[*k].velocity;
                        [v[0] as f32, v[1] as f32]
                    }
                    None => [0.0, 0.0],
                })
                .collect();
            Some(Arc::new(FlowField::new(h, w, data)?))
        } else {
            None
        };

        let gt = spec
            .objects
            .iter()
            .enumerate()
            .filter_map(|(k, o)| {
                let bbox = visible[k].bbox()?;
                let c = centers[k];
                Some(GtBox {
                    frame: t,
                    id: k as u64,
                    label: Some(o.label.clone()),
                    bbox,
                    pos: Some([c.x, c.y, c.z]),
                })
            })
            .collect();

        let (proposals, stats) = self.proposals(t, &visible, &extents, &centers, &world_from_camera, &mut rng);
        let ctx = FrameContext {
            frame: t,
            ego: self.ego(t),
            world_from_camera,
            intrinsics: intr,
            image_size: (h, w),
            ground: spec.outputs.ground.then(|| self.ground()),
            depth: Some(Arc::new(depth)),
            flow,
        };
        Ok(SyntheticFrame {
            ctx,
            proposals,
            gt,
            stats,
        })
    }

    fn proposals(
        &self,
        t: u32,
        visible: &[RleMask],
        extents: &[Option<Extent>],
        centers: &[Vec3],
        world_from_camera: &RigidTransform,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Proposal>, CorruptionStats) {
        let spec = &self.spec;
        let corr = &spec.corruption;
        let (h, w) = (spec.camera.height, spec.camera.width);
        let mut stats = CorruptionStats::default();

        let mut live: Vec<usize> = Vec::new();
        for (k, o) in spec.objects.iter().enumerate() {
            if visible[k].is_empty() || o.is_hidden(t) {
                continue;
            }
            stats.dropout_eligible += 1;
            if rng.random_bool(corr.dropout) {
                stats.dropped += 1;
            } else {
                live.push(k);
            }
        }

        let candidate = |k: usize, rng: &mut ChaCha8Rng| {
            let o = &spec.objects[k];
            let class = rng
                .random_bool(spec.outputs.class_score_rate)
                .then(|| (o.label.clone(), rng.random_range(0.6..0.95)));
            Candidate {
                mask: visible[k].clone(),
                score: rng.random_range(0.6..1.0),
                class,
                center: centers[k],
                velocity: o.velocity,
            }
        };

        let mut merged = vec![false; spec.objects.len()];
        let mut cands: Vec<(Candidate, bool)> = Vec::new();
        for (a, &i) in live.iter().enumerate() {
            for &j in &live[a + 1..] {
                if merged[i] || merged[j] {
                    continue;
                }
                // Overlap of the unoccluded rectangles: visible masks never overlap.
                let overlapping = match (extents[i], extents[j]) {
                    (Some(a), Some(b)) => a.0 < b.1 && b.0 < a.1 && a.2 < b.3 && b.2 < a.3,
                    _ => false,
                };
                if !overlapping {
                    continue;
                }
                stats.merge_eligible += 1;
                if rng.random_bool(corr.under_segmentation) {
                    stats.merged += 1;
                    merged[i] = true;
                    merged[j] = true;
                    let (ci, cj) = (candidate(i, rng), candidate(j, rng));
                    let (ai, aj) = (ci.mask.area() as f64, cj.mask.area() as f64);
                    let blend = |x: f64, y: f64| (x * ai + y * aj) / (ai + aj);
                    cands.push((
                        Candidate {
                            mask: ci.mask.union(&cj.mask).expect("same size"),
                            score: ci.score.max(cj.score),
                            class: None,
                            center: ci.center * (ai / (ai + aj)) + cj.center * (aj / (ai + aj)),
                            velocity: [
                                blend(ci.velocity[0], cj.velocity[0]),
                                blend(ci.velocity[1], cj.velocity[1]),
                            ],
                        },
                        false,
                    ));
                }
            }
        }
        for &k in &live {
            if !merged[k] {
                let c = candidate(k, rng);
                cands.push((c, true));
            }
        }

        let mut objects: Vec<Candidate> = Vec::new();
        for (c, splittable) in cands {
            let bbox = c.mask.bbox().expect("non-empty");
            if !splittable || bbox.w < 2.0 {
                objects.push(c);
                continue;
            }
            stats.split_eligible += 1;
            if !rng.random_bool(corr.over_segmentation) {
                objects.push(c);
                continue;
            }
            stats.split += 1;
            let mid = (bbox.x + (bbox.w / 2.0).floor()) as u32;
            let half_width = bbox.w / 2.0 * c.center.z / self.intrinsics.fx;
            for (lo, hi, side) in [(0, mid, -1.0), (mid, w, 1.0)] {
                let mask = c.mask.restrict_columns(lo, hi);
                if mask.is_empty() {
                    continue;
                }
                objects.push(Candidate {
                    mask,
                    score: c.score * 0.8,
                    class: c.class.as_ref().map(|(l, s)| (l.clone(), s * 0.8)),
                    center: c.center + Vec3::new(side * half_width / 2.0, 0.0, 0.0),
                    velocity: c.velocity,
                });
            }
        }

        let mut proposals: Vec<Proposal> = Vec::new();
        for c in objects {
            let mask = if corr.jitter > 0 {
                let j = corr.jitter as i64;
                c.mask.translate(rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                c.mask
            };
            if mask.is_empty() {
                continue;
            }
            let mut p = Proposal::new(mask, c.score);
            if let Some((label, s)) = c.class {
                p.class_scores = BTreeMap::from([(label, s)]);
            }
            if spec.outputs.precomputed_positions {
                let mut pos = world_from_camera.apply(&c.center);
                pos.x += gaussian(rng, corr.position_noise);
                pos.z += gaussian(rng, corr.position_noise);
                p.pos = Some(pos);
                p.vel = Some(c.velocity);
            }
            proposals.push(p);
        }

        for _ in 0..corr.clutter {
            let rh = rng.random_range(8..=60u32).min(h);
            let rw = rng.random_range(8..=60u32).min(w);
            let r0 = rng.random_range(0..=h - rh);
            let c0 = rng.random_range(0..=w - rw);
            let idx = (r0..r0 + rh).flat_map(|r| (c0..c0 + rw).map(move |c| (r * w + c) as usize));
            let mask = RleMask::from_sorted_indices(h, w, idx);
            proposals.push(Proposal::new(mask, rng.random_range(0.05..0.6)));
            stats.clutter += 1;
        }
        (proposals, stats)
    }

    /// Indices of objects that are never visible.
    pub fn never_visible(&self) -> Result<Vec<usize>> {
        let mut seen = vec![false; self.spec.objects.len()];
        for t in 0..self.spec.frames {
            for g in self.frame(t)?.gt {
                seen[g.id as usize] = true;
            }
        }
        Ok((0..seen.len()).filter(|&k| !seen[k]).collect())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

/// Half-open column and row ranges `(c0, c1, r0, r1)`.
type Extent = (u32, u32, u32, u32);

/// Half-open pixel ranges covered by a fronto-parallel rectangle centred at
/// `c` and drawn at depth `z`. Pixel centres inside the projected rectangle
/// are covered.
fn pixel_extent(
    intr: &CameraIntrinsics,
    c: &Vec3,
    size: [f64; 2],
    z: f64,
    h: u32,
    w: u32,
) -> Option<Extent> {
    let u0 = intr.cx + intr.fx * (c.x - size[0] / 2.0) / z;
    let u1 = intr.cx + intr.fx * (c.x + size[0] / 2.0) / z;
    let v0 = intr.cy - intr.fy * (c.y + size[1] / 2.0) / z;
    let v1 = intr.cy - intr.fy * (c.y - size[1] / 2.0) / z;
    let clamp = |v: f64, hi: u32| v.ceil().clamp(0.0, hi as f64) as u32;
    let (c0, c1) = (clamp(u0, w), clamp(u1, w));
    let (r0, r1) = (clamp(v0, h), clamp(v1, h));
    (c0 < c1 && r0 < r1).then_some((c0, c1, r0, r1))
}

pub const CATALOG: [&str; 4] = ["single-static", "two-crossing", "occlusion-gap", "clutter-storm"];

fn object(label: &str, size: [f64; 2], start: [f64; 2], velocity: [f64; 2]) -> ObjectSpec {
    ObjectSpec {
        label: label.to_string(),
        size,
        start,
        velocity,
        hidden: Vec::new(),
    }
}

/// Reference scenarios.
pub fn catalog(name: &str) -> Option<ScenarioSpec> {
    let car = [1.8, 1.5];
    let pedestrian = [0.6, 1.8];
    let spec = match name {
        "single-static" => ScenarioSpec {
            name: name.into(),
            seed: 1,
            frames: 60,
            camera: CameraSpec::default(),
            walls: None,
            objects: vec![object("car", car, [1.0, 15.0], [0.0, 0.0])],
            corruption: Corruption::default(),
            outputs: Outputs::default(),
        },
        "two-crossing" => ScenarioSpec {
            name: name.into(),
            seed: 2,
            frames: 100,
            camera: CameraSpec {
                forward_speed: 0.05,
                ..Default::default()
            },
            walls: Some(8.0),
            // The pedestrian passes in front of the car and never hides it completely.
            objects: vec![
                object("car", car, [-5.0, 22.0], [0.08, 0.0]),
                object("pedestrian", pedestrian, [2.5, 14.0], [-0.04, 0.0]),
            ],
            corruption: Corruption {
                over_segmentation: 0.2,
                dropout: 0.1,
                clutter: 5,
                ..Default::default()
            },
            outputs: Outputs {
                class_score_rate: 0.5,
                ..Default::default()
            },
        },
        "occlusion-gap" => ScenarioSpec {
            name: name.into(),
            seed: 3,
            frames: 40,
            camera: CameraSpec {
                forward_speed: 0.05,
                ..Default::default()
            },
            walls: None,
            objects: vec![ObjectSpec {
                hidden: vec![[18, 22]],
                ..object("car", car, [-2.0, 16.0], [0.05, 0.0])
            }],
            corruption: Corruption::default(),
            outputs: Outputs::default(),
        },
        "clutter-storm" => ScenarioSpec {
            name: name.into(),
            seed: 4,
            frames: 200,
            camera: CameraSpec {
                forward_speed: 0.1,
                ..Default::default()
            },
            walls: Some(5.0),
            objects: vec![
                object("car", car, [-2.5, 20.0], [0.0, 0.05]),
                object("pedestrian", pedestrian, [1.5, 14.0], [-0.02, 0.1]),
                object("pedestrian", pedestrian, [3.0, 30.0], [-0.03, 0.0]),
            ],
            corruption: Corruption {
                over_segmentation: 0.2,
                under_segmentation: 0.1,
                dropout: 0.1,
                clutter: 250,
                jitter: 1,
                position_noise: 0.05,
            },
            outputs: Outputs::default(),
        },
        _ => return None,
    };
    Some(spec)
}
