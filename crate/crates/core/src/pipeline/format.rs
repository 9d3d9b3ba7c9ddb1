//! Line-oriented JSON file formats. Every record carries `"schema": "camot/1"`.
//!
//! A sequence directory holds:
//!
//! ```text
//! calib.json            {fx, fy, cx, cy, width, height}
//! ego.jsonl             {frame, rotation: [9, row-major], translation: [3]}
//! ground.jsonl          {frame, normal: [3], offset}       optional, camera frame
//! frames/NNNNNN.jsonl   one proposal per line
//! depth/NNNNNN.depth    optional
//! flow/NNNNNN.flow      optional
//! gt.jsonl              optional ground truth
//! ```
//!
//! Ego-motion entry `t` maps camera `t-1` coordinates to camera `t`; the
//! world frame is camera frame 0.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::evaluation::{EvalTrack, GtBox};
use crate::geometry::{CameraIntrinsics, DepthMap, FlowField, GroundPlane, RigidTransform, Vec3};
use crate::observations::{FrameContext, Proposal};
use crate::rle::RleMask;
use crate::synthetic::Scenario;

pub const SCHEMA: &str = "camot/1";

#[derive(Serialize, Deserialize)]
struct Tagged<T> {
    schema: String,
    #[serde(flatten)]
    record: T,
}

fn check_schema(path: &Path, line: usize, schema: &str) -> Result<()> {
    if schema != SCHEMA {
        return Err(Error::parse(path, line, format!("unsupported schema '{schema}', expected '{SCHEMA}'")));
    }
    Ok(())
}

/// Serializes one record as a tagged JSON line (without the newline).
pub fn to_line<T: Serialize>(record: &T) -> String {
    let tagged = Tagged {
        schema: SCHEMA.to_string(),
        record,
    };
    serde_json::to_string(&tagged).expect("records serialize")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tagged: Tagged<T> = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))?;
    check_schema(path, 1, &tagged.schema)?;
    Ok(tagged.record)
}

pub fn write_json<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let tagged = Tagged {
        schema: SCHEMA.to_string(),
        record,
    };
    let text = serde_json::to_string_pretty(&tagged).expect("records serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads every non-blank line of a JSONL file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tagged: Tagged<T> = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e))?;
        check_schema(path, i + 1, &tagged.schema)?;
        out.push(tagged.record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// Streaming JSONL writer.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        writeln!(self.out, "{}", to_line(record)).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoRecord {
    pub frame: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundRecord {
    pub frame: u32,
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub frame: u32,
    pub mask: RleMask,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vel: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub class_scores: BTreeMap<String, f64>,
}

impl ProposalRecord {
    pub fn from_proposal(frame: u32, p: &Proposal) -> Self {
        Self {
            frame,
            mask: p.mask.clone(),
            score: p.score,
            pos: p.pos.map(|v| [v.x, v.y, v.z]),
            vel: p.vel,
            class_scores: p.class_scores.clone(),
        }
    }

    pub fn into_proposal(self) -> Proposal {
        Proposal {
            mask: self.mask,
            score: self.score,
            pos: self.pos.map(|p| Vec3::new(p[0], p[1], p[2])),
            vel: self.vel,
            class_scores: self.class_scores,
        }
    }
}

/// One reported track box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u32,
    pub id: u64,
    pub bbox: BBox,
    pub mask: RleMask,
    /// World-frame bottom point.
    pub pos: [f64; 3],
    pub vel: [f64; 2],
    /// The bottom point in the camera frame of `frame`.
    pub cam_pos: [f64; 3],
    pub label: Option<String>,
    pub predicted: bool,
    pub unary: f64,
}

impl TrackRecord {
    pub fn to_eval(&self) -> EvalTrack {
        let [x, y, z] = self.cam_pos;
        EvalTrack {
            frame: self.frame,
            id: self.id,
            bbox: self.bbox,
            label: self.label.clone(),
            distance: Some((x * x + y * y + z * z).sqrt()),
        }
    }
}

pub fn frame_file_name(t: u32) -> String {
    format!("{t:06}")
}

/// Everything known about one frame before preprocessing.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub ctx: FrameContext,
    pub proposals: Vec<Proposal>,
}

/// A sequence of frames that can be loaded in any order.
pub trait FrameSource: Sync {
    fn len(&self) -> u32;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn load(&self, t: u32) -> Result<FrameInput>;

    fn ground_truth(&self) -> Result<Option<Vec<GtBox>>>;
}

/// A sequence directory on disk.
pub struct SequenceDir {
    root: PathBuf,
    calib: Calibration,
    intrinsics: CameraIntrinsics,
    ego: Vec<RigidTransform>,
    poses: Vec<RigidTransform>,
    ground: HashMap<u32, GroundPlane>,
    frames: u32,
}

impl SequenceDir {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::InvalidInput(format!("{} is not a directory", root.display())));
        }
        let calib: Calibration = read_json(&root.join("calib.json"))?;
        let intrinsics = CameraIntrinsics::new(calib.fx, calib.fy, calib.cx, calib.cy)?;
        if calib.width == 0 || calib.height == 0 {
            return Err(Error::InvalidInput("calibration has an empty image size".into()));
        }
        let frames = count_frames(&root.join("frames"))?;

        let ego_path = root.join("ego.jsonl");
        let mut by_frame: HashMap<u32, (usize, EgoRecord)> = HashMap::new();
        for (i, r) in read_jsonl::<EgoRecord>(&ego_path)?.into_iter().enumerate() {
            if by_frame.insert(r.frame, (i + 1, r)).is_some() {
                return Err(Error::parse(&ego_path, i + 1, "duplicate frame"));
            }
        }
        let mut ego = Vec::with_capacity(frames as usize);
        let mut poses = Vec::with_capacity(frames as usize);
        let mut pose = RigidTransform::identity();
        for t in 0..frames {
            let e = match by_frame.get(&t) {
                Some((line, r)) => RigidTransform::from_row_major(&r.rotation, &r.translation)
                    .map_err(|e| Error::parse(&ego_path, *line, e))?,
                None if t == 0 => RigidTransform::identity(),
                None => return Err(Error::parse(&ego_path, 0, format!("no ego-motion for frame {t}"))),
            };
            if t > 0 {
                pose = pose.compose(&e.inverse());
            }
            ego.push(e);
            poses.push(pose.clone());
        }

        let ground_path = root.join("ground.jsonl");
        let mut ground = HashMap::new();
        if ground_path.exists() {
            for (i, r) in read_jsonl::<GroundRecord>(&ground_path)?.into_iter().enumerate() {
                let plane = GroundPlane::new(Vec3::from(r.normal), r.offset)
                    .map_err(|e| Error::parse(&ground_path, i + 1, e))?;
                ground.insert(r.frame, plane);
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            calib,
            intrinsics,
            ego,
            poses,
            ground,
            frames,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calib
    }

    pub fn depth(&self, t: u32) -> Result<Option<DepthMap>> {
        let path = self.root.join("depth").join(format!("{}.depth", frame_file_name(t)));
        if !path.exists() {
            return Ok(None);
        }
        let depth = DepthMap::read(&path)?;
        if (depth.height(), depth.width()) != (self.calib.height, self.calib.width) {
            return Err(Error::parse(&path, 1, "depth size differs from calibration"));
        }
        Ok(Some(depth))
    }
}

fn count_frames(dir: &Path) -> Result<u32> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_suffix(".jsonl") else { continue };
        let t: u32 = stem
            .parse()
            .map_err(|_| Error::InvalidInput(format!("unexpected frame file name '{name}'")))?;
        indices.push(t);
    }
    if indices.is_empty() {
        return Err(Error::InvalidInput(format!("no frame files in {}", dir.display())));
    }
    indices.sort_unstable();
    for (i, t) in indices.iter().enumerate() {
        if *t != i as u32 {
            return Err(Error::InvalidInput(format!(
                "frame files in {} are not contiguous from 0 (missing {i})",
                dir.display()
            )));
        }
    }
    Ok(indices.len() as u32)
}

impl FrameSource for SequenceDir {
    fn len(&self) -> u32 {
        self.frames
    }

    fn load(&self, t: u32) -> Result<FrameInput> {
        let name = frame_file_name(t);
        let path = self.root.join("frames").join(format!("{name}.jsonl"));
        let records: Vec<ProposalRecord> = read_jsonl(&path)?;
        let mut proposals = Vec::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            if r.frame != t {
                return Err(Error::parse(&path, i + 1, format!("record for frame {} in file of frame {t}", r.frame)));
            }
            proposals.push(r.into_proposal());
        }
        let flow_path = self.root.join("flow").join(format!("{name}.flow"));
        let flow = if flow_path.exists() {
            Some(Arc::new(FlowField::read(&flow_path)?))
        } else {
            None
        };
        let ctx = FrameContext {
            frame: t,
            ego: self.ego[t as usize].clone(),
            world_from_camera: self.poses[t as usize].clone(),
            intrinsics: self.intrinsics,
            image_size: (self.calib.height, self.calib.width),
            ground: self.ground.get(&t).copied(),
            depth: self.depth(t)?.map(Arc::new),
            flow,
        };
        Ok(FrameInput { ctx, proposals })
    }

    fn ground_truth(&self) -> Result<Option<Vec<GtBox>>> {
        let path = self.root.join("gt.jsonl");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(read_jsonl(&path)?))
    }
}

/// In-memory frames generated from a synthetic scenario.
pub struct SyntheticSource {
    scenario: Scenario,
}

impl SyntheticSource {
    pub fn new(scenario: Scenario) -> Self {
        Self { scenario }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
}

impl FrameSource for SyntheticSource {
    fn len(&self) -> u32 {
        self.scenario.len()
    }

    fn load(&self, t: u32) -> Result<FrameInput> {
        let f = self.scenario.frame(t)?;
        Ok(FrameInput {
            ctx: f.ctx,
            proposals: f.proposals,
        })
    }

    fn ground_truth(&self) -> Result<Option<Vec<GtBox>>> {
        let mut gt = Vec::new();
        for t in 0..self.scenario.len() {
            gt.extend(self.scenario.frame(t)?.gt);
        }
        Ok(Some(gt))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a scenario as a sequence directory.
pub fn write_sequence(scenario: &Scenario, root: &Path) -> Result<()> {
    use rayon::prelude::*;

    let spec = scenario.spec();
    create_dir(&root.join("frames"))?;
    create_dir(&root.join("depth"))?;
    if spec.outputs.flow {
        create_dir(&root.join("flow"))?;
    }
    let intr = scenario.intrinsics();
    let (h, w) = scenario.image_size();
    write_json(
        &root.join("calib.json"),
        &Calibration {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: w,
            height: h,
        },
    )?;
    write_json(&root.join("scenario.json"), spec)?;

    let per_frame: Vec<Result<(EgoRecord, Option<GroundRecord>, Vec<GtBox>)>> = (0..scenario.len())
        .into_par_iter()
        .map(|t| {
            let f = scenario.frame(t)?;
            let name = frame_file_name(t);
            let records: Vec<ProposalRecord> =
                f.proposals.iter().map(|p| ProposalRecord::from_proposal(t, p)).collect();
            write_jsonl(&root.join("frames").join(format!("{name}.jsonl")), &records)?;
            if let Some(d) = &f.ctx.depth {
                d.write(&root.join("depth").join(format!("{name}.depth")))?;
            }
            if let Some(flow) = &f.ctx.flow {
                flow.write(&root.join("flow").join(format!("{name}.flow")))?;
            }
            let ego = EgoRecord {
                frame: t,
                rotation: f.ctx.ego.rotation_row_major(),
                translation: f.ctx.ego.translation.into(),
            };
            let ground = f.ctx.ground.map(|g| GroundRecord {
                frame: t,
                normal: g.normal.into(),
                offset: g.offset,
            });
            Ok((ego, ground, f.gt))
        })
        .collect();
    let mut ego = Vec::new();
    let mut ground = Vec::new();
    let mut gt = Vec::new();
    for r in per_frame {
        let (e, g, boxes) = r?;
        ego.push(e);
        ground.extend(g);
        gt.extend(boxes);
    }
    write_jsonl(&root.join("ego.jsonl"), &ego)?;
    if !ground.is_empty() {
        write_jsonl(&root.join("ground.jsonl"), &ground)?;
    }
    write_jsonl(&root.join("gt.jsonl"), &gt)?;
    Ok(())
}
