//! Episodic demonstration data: in-memory model, validation, and the `EG2A`
//! binary episode format plus the JSON dataset manifest.
//!
//! Episode file layout (all integers little-endian):
//!
//! ```text
//! "EG2A"  u32 version  u32 frame_count  u16 obs_dim  u8 embodiment  u8 flags
//! frame_count × { f64 timestamp, u8 presence, obs_dim × f32, present payloads }
//! u32 subtask_count, subtask_count × { u32 start, u32 end, u32 label }
//! u32 scene_id  u32 task_id  u16 id_len  id_len × u8 (UTF-8 episode id)
//! ```
//!
//! Present payloads follow the presence bits in order: head pose (6 × f32),
//! hand keypoints (2 × 17 × 3 × f32), left EE (6), right EE (6), left grip (1),
//! right grip (1), base pose (6).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::Pose6;

pub const EPISODE_MAGIC: &[u8; 4] = b"EG2A";
pub const EPISODE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUBTASK_VOCAB_FILE: &str = "subtask_vocab.json";
pub const EPISODE_EXT: &str = "eg2a";

pub const KEYPOINTS_PER_HAND: usize = 17;
pub const ROBOT_ACTION_DIM: usize = 16;
pub const HUMAN_ACTION_DIM: usize = 18;

const BIT_HEAD: u8 = 1 << 0;
const BIT_HANDS: u8 = 1 << 1;
const BIT_LEFT_EE: u8 = 1 << 2;
const BIT_RIGHT_EE: u8 = 1 << 3;
const BIT_LEFT_GRIP: u8 = 1 << 4;
const BIT_RIGHT_GRIP: u8 = 1 << 5;
const BIT_BASE: u8 = 1 << 6;

const FLAG_HAS_GRIPPER: u8 = 1 << 0;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("episode failed validation: {0:?}")]
    ValidationFailure(Vec<Violation>),
    #[error("corrupt episode file: {0}")]
    CorruptFile(String),
    #[error("unsupported episode format version {0}")]
    UnsupportedVersion(u32),
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EpisodeError + '_ {
    move |source| EpisodeError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Which body produced an episode. Robots are lettered: `robot_a`, `robot_b`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmbodimentId {
    Human,
    Robot(u8),
}

impl EmbodimentId {
    pub const ROBOT_A: EmbodimentId = EmbodimentId::Robot(0);
    pub const ROBOT_B: EmbodimentId = EmbodimentId::Robot(1);

    pub fn code(self) -> u8 {
        match self {
            EmbodimentId::Human => 0,
            EmbodimentId::Robot(k) => k + 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EmbodimentId::Human),
            1..=26 => Some(EmbodimentId::Robot(code - 1)),
            _ => None,
        }
    }

    pub fn is_human(self) -> bool {
        matches!(self, EmbodimentId::Human)
    }
}

impl fmt::Display for EmbodimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbodimentId::Human => f.write_str("human"),
            EmbodimentId::Robot(k) => write!(f, "robot_{}", (b'a' + k) as char),
        }
    }
}

impl FromStr for EmbodimentId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "human" {
            return Ok(EmbodimentId::Human);
        }
        match s.strip_prefix("robot_").map(str::as_bytes) {
            Some([c]) if c.is_ascii_lowercase() => Ok(EmbodimentId::Robot(c - b'a')),
            _ => Err(format!("unknown embodiment '{s}'")),
        }
    }
}

impl Serialize for EmbodimentId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EmbodimentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embodiment {
    pub id: EmbodimentId,
    pub action_dim: usize,
    pub has_gripper: bool,
}

impl Embodiment {
    pub fn new(id: EmbodimentId) -> Self {
        match id {
            EmbodimentId::Human => Self {
                id,
                action_dim: HUMAN_ACTION_DIM,
                has_gripper: false,
            },
            EmbodimentId::Robot(_) => Self {
                id,
                action_dim: ROBOT_ACTION_DIM,
                has_gripper: true,
            },
        }
    }

    pub fn human() -> Self {
        Self::new(EmbodimentId::Human)
    }

    pub fn robot(k: u8) -> Self {
        Self::new(EmbodimentId::Robot(k))
    }

    pub fn is_consistent(&self) -> bool {
        match self.action_dim {
            HUMAN_ACTION_DIM => !self.has_gripper && self.id.is_human(),
            ROBOT_ACTION_DIM => self.has_gripper && !self.id.is_human(),
            _ => false,
        }
    }
}

/// A 6-DoF pose as stored on disk: `[tx, ty, tz, rx, ry, rz]` in f32.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord(pub [f32; 6]);

impl PoseRecord {
    pub fn from_pose(p: &Pose6) -> Self {
        Self(p.to_array().map(|v| v as f32))
    }

    pub fn to_pose(&self) -> Pose6 {
        Pose6::from_array(self.0.map(f64::from))
    }
}

/// Hand keypoints in the head-camera frame, `[hand][keypoint][xyz]`, meters.
/// Hand 0 is left, hand 1 is right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandKeypoints(pub [[[f32; 3]; KEYPOINTS_PER_HAND]; 2]);

impl HandKeypoints {
    pub fn zeros() -> Self {
        Self([[[0.0; 3]; KEYPOINTS_PER_HAND]; 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub obs_features: Vec<f32>,
    pub head_pose: Option<PoseRecord>,
    pub hand_keypoints: Option<HandKeypoints>,
    pub left_ee: Option<PoseRecord>,
    pub right_ee: Option<PoseRecord>,
    pub left_grip: Option<f32>,
    pub right_grip: Option<f32>,
    pub base_pose: Option<PoseRecord>,
}

impl Frame {
    pub fn new(timestamp: f64, obs_features: Vec<f32>) -> Self {
        Self {
            timestamp,
            obs_features,
            head_pose: None,
            hand_keypoints: None,
            left_ee: None,
            right_ee: None,
            left_grip: None,
            right_grip: None,
            base_pose: None,
        }
    }

    fn presence(&self) -> u8 {
        let mut bits = 0;
        let mut set = |present: bool, bit: u8| {
            if present {
                bits |= bit;
            }
        };
        set(self.head_pose.is_some(), BIT_HEAD);
        set(self.hand_keypoints.is_some(), BIT_HANDS);
        set(self.left_ee.is_some(), BIT_LEFT_EE);
        set(self.right_ee.is_some(), BIT_RIGHT_EE);
        set(self.left_grip.is_some(), BIT_LEFT_GRIP);
        set(self.right_grip.is_some(), BIT_RIGHT_GRIP);
        set(self.base_pose.is_some(), BIT_BASE);
        bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskSpan {
    pub start_frame: u32,
    /// Exclusive.
    pub end_frame: u32,
    pub label_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub embodiment: Embodiment,
    pub scene_id: u32,
    pub task_id: u32,
    pub frames: Vec<Frame>,
    pub subtasks: Vec<SubtaskSpan>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.obs_features.len())
    }

    /// Subtask label active at `frame`, if any span covers it.
    pub fn subtask_at(&self, frame: usize) -> Option<u32> {
        let f = frame as u32;
        self.subtasks
            .iter()
            .find(|s| s.start_frame <= f && f < s.end_frame)
            .map(|s| s.label_id)
    }
}

/// One broken invariant. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooFewFrames(usize),
    InvalidId(String),
    InconsistentEmbodiment,
    NonIncreasingTimestamp { frame: usize },
    NonFinite { frame: usize, field: &'static str },
    ObsDimMismatch { frame: usize, expected: usize, found: usize },
    MissingField { frame: usize, field: &'static str },
    ForbiddenField { frame: usize, field: &'static str },
    GripOutOfRange { frame: usize, field: &'static str },
    SpanOutOfBounds { span: usize },
    SpanOverlap { span: usize },
}

fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn validate_episode(e: &Episode) -> Vec<Violation> {
    let mut out = Vec::new();
    if e.frames.len() < 2 {
        out.push(Violation::TooFewFrames(e.frames.len()));
    }
    if e.id.is_empty()
        || e.id.len() > u16::MAX as usize
        || !e
            .id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        || e.id.starts_with('.')
    {
        out.push(Violation::InvalidId(e.id.clone()));
    }
    if !e.embodiment.is_consistent() {
        out.push(Violation::InconsistentEmbodiment);
    }
    let human = e.embodiment.id.is_human();
    let obs_dim = e.obs_dim();
    for (i, f) in e.frames.iter().enumerate() {
        if !f.timestamp.is_finite() {
            out.push(Violation::NonFinite { frame: i, field: "timestamp" });
        }
        if i > 0 && !(f.timestamp > e.frames[i - 1].timestamp) {
            out.push(Violation::NonIncreasingTimestamp { frame: i });
        }
        if f.obs_features.len() != obs_dim {
            out.push(Violation::ObsDimMismatch {
                frame: i,
                expected: obs_dim,
                found: f.obs_features.len(),
            });
        }
        if !all_finite(&f.obs_features) {
            out.push(Violation::NonFinite { frame: i, field: "obs_features" });
        }

        let poses = [
            ("head_pose", &f.head_pose),
            ("left_ee", &f.left_ee),
            ("right_ee", &f.right_ee),
            ("base_pose", &f.base_pose),
        ];
        for (name, p) in poses {
            if let Some(p) = p {
                if !all_finite(&p.0) {
                    out.push(Violation::NonFinite { frame: i, field: name });
                }
            }
        }
        if let Some(k) = &f.hand_keypoints {
            if !k.0.iter().flatten().all(|p| all_finite(p)) {
                out.push(Violation::NonFinite { frame: i, field: "hand_keypoints" });
            }
        }
        for (name, g) in [("left_grip", f.left_grip), ("right_grip", f.right_grip)] {
            if let Some(g) = g {
                if !(0.0..=1.0).contains(&g) {
                    out.push(Violation::GripOutOfRange { frame: i, field: name });
                }
            }
        }

        let (required, forbidden): (Vec<(&'static str, bool)>, Vec<(&'static str, bool)>) = if human
        {
            (
                vec![
                    ("head_pose", f.head_pose.is_some()),
                    ("hand_keypoints", f.hand_keypoints.is_some()),
                ],
                vec![
                    ("left_ee", f.left_ee.is_some()),
                    ("right_ee", f.right_ee.is_some()),
                    ("left_grip", f.left_grip.is_some()),
                    ("right_grip", f.right_grip.is_some()),
                    ("base_pose", f.base_pose.is_some()),
                ],
            )
        } else {
            (
                vec![
                    ("left_ee", f.left_ee.is_some()),
                    ("right_ee", f.right_ee.is_some()),
                    ("left_grip", f.left_grip.is_some()),
                    ("right_grip", f.right_grip.is_some()),
                ],
                vec![
                    ("head_pose", f.head_pose.is_some()),
                    ("hand_keypoints", f.hand_keypoints.is_some()),
                ],
            )
        };
        for (field, present) in required {
            if !present {
                out.push(Violation::MissingField { frame: i, field });
            }
        }
        for (field, present) in forbidden {
            if present {
                out.push(Violation::ForbiddenField { frame: i, field });
            }
        }
    }

    let n = e.frames.len() as u32;
    for (i, s) in e.subtasks.iter().enumerate() {
        if !(s.start_frame < s.end_frame && s.end_frame <= n) {
            out.push(Violation::SpanOutOfBounds { span: i });
        }
        if i > 0 && s.start_frame < e.subtasks[i - 1].end_frame {
            out.push(Violation::SpanOverlap { span: i });
        }
    }
    out
}

/// File name used for an episode inside a dataset root.
pub fn episode_file_name(id: &str) -> String {
    format!("{id}.{EPISODE_EXT}")
}

pub fn encode_episode(e: &Episode) -> Result<Vec<u8>, EpisodeError> {
    let violations = validate_episode(e);
    if !violations.is_empty() {
        return Err(EpisodeError::ValidationFailure(violations));
    }
    let obs_dim = e.obs_dim();
    if obs_dim > u16::MAX as usize {
        return Err(EpisodeError::ValidationFailure(vec![Violation::ObsDimMismatch {
            frame: 0,
            expected: u16::MAX as usize,
            found: obs_dim,
        }]));
    }
    let mut buf = Vec::with_capacity(16 + e.frames.len() * (9 + 4 * obs_dim + 64));
    buf.extend_from_slice(EPISODE_MAGIC);
    buf.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(e.frames.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(obs_dim as u16).to_le_bytes());
    buf.push(e.embodiment.id.code());
    buf.push(if e.embodiment.has_gripper { FLAG_HAS_GRIPPER } else { 0 });

    let put = |buf: &mut Vec<u8>, v: &[f32]| {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    for f in &e.frames {
        buf.extend_from_slice(&f.timestamp.to_le_bytes());
        buf.push(f.presence());
        put(&mut buf, &f.obs_features);
        if let Some(p) = &f.head_pose {
            put(&mut buf, &p.0);
        }
        if let Some(k) = &f.hand_keypoints {
            for p in k.0.iter().flatten() {
                put(&mut buf, p);
            }
        }
        for p in [&f.left_ee, &f.right_ee].into_iter().flatten() {
            put(&mut buf, &p.0);
        }
        for g in [f.left_grip, f.right_grip].into_iter().flatten() {
            put(&mut buf, &[g]);
        }
        if let Some(p) = &f.base_pose {
            put(&mut buf, &p.0);
        }
    }
    buf.extend_from_slice(&(e.subtasks.len() as u32).to_le_bytes());
    for s in &e.subtasks {
        for v in [s.start_frame, s.end_frame, s.label_id] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&e.scene_id.to_le_bytes());
    buf.extend_from_slice(&e.task_id.to_le_bytes());
    buf.extend_from_slice(&(e.id.len() as u16).to_le_bytes());
    buf.extend_from_slice(e.id.as_bytes());
    Ok(buf)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EpisodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(EpisodeError::CorruptFile(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8, EpisodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, EpisodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EpisodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, EpisodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, EpisodeError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s<const N: usize>(&mut self) -> Result<[f32; N], EpisodeError> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f32()?;
        }
        Ok(out)
    }
}

pub fn decode_episode(data: &[u8]) -> Result<Episode, EpisodeError> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != EPISODE_MAGIC {
        return Err(EpisodeError::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != EPISODE_VERSION {
        return Err(EpisodeError::UnsupportedVersion(version));
    }
    let frame_count = r.u32()? as usize;
    let obs_dim = r.u16()? as usize;
    let code = r.u8()?;
    let flags = r.u8()?;
    let id = EmbodimentId::from_code(code)
        .ok_or_else(|| EpisodeError::CorruptFile(format!("unknown embodiment code {code}")))?;
    let embodiment = Embodiment::new(id);
    if embodiment.has_gripper != (flags & FLAG_HAS_GRIPPER != 0) {
        return Err(EpisodeError::CorruptFile("gripper flag disagrees with embodiment".into()));
    }
    // Each frame is at least 9 + 4·obs_dim bytes; reject absurd counts early.
    if frame_count.saturating_mul(9 + 4 * obs_dim) > data.len() {
        return Err(EpisodeError::CorruptFile("frame count exceeds file length".into()));
    }

    let mut frames = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let timestamp = r.f64()?;
        let bits = r.u8()?;
        if bits & 0x80 != 0 {
            return Err(EpisodeError::CorruptFile("unknown presence bit".into()));
        }
        let mut obs = Vec::with_capacity(obs_dim);
        for _ in 0..obs_dim {
            obs.push(r.f32()?);
        }
        let mut f = Frame::new(timestamp, obs);
        if bits & BIT_HEAD != 0 {
            f.head_pose = Some(PoseRecord(r.f32s()?));
        }
        if bits & BIT_HANDS != 0 {
            let mut k = HandKeypoints::zeros();
            for p in k.0.iter_mut().flatten() {
                *p = r.f32s()?;
            }
            f.hand_keypoints = Some(k);
        }
        if bits & BIT_LEFT_EE != 0 {
            f.left_ee = Some(PoseRecord(r.f32s()?));
        }
        if bits & BIT_RIGHT_EE != 0 {
            f.right_ee = Some(PoseRecord(r.f32s()?));
        }
        if bits & BIT_LEFT_GRIP != 0 {
            f.left_grip = Some(r.f32()?);
        }
        if bits & BIT_RIGHT_GRIP != 0 {
            f.right_grip = Some(r.f32()?);
        }
        if bits & BIT_BASE != 0 {
            f.base_pose = Some(PoseRecord(r.f32s()?));
        }
        frames.push(f);
    }
    let n_spans = r.u32()? as usize;
    if n_spans.saturating_mul(12) > data.len() {
        return Err(EpisodeError::CorruptFile("subtask count exceeds file length".into()));
    }
    let mut subtasks = Vec::with_capacity(n_spans);
    for _ in 0..n_spans {
        subtasks.push(SubtaskSpan {
            start_frame: r.u32()?,
            end_frame: r.u32()?,
            label_id: r.u32()?,
        });
    }
    let scene_id = r.u32()?;
    let task_id = r.u32()?;
    let id_len = r.u16()? as usize;
    let id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| EpisodeError::CorruptFile("episode id is not UTF-8".into()))?
        .to_string();
    if r.pos != data.len() {
        return Err(EpisodeError::CorruptFile(format!(
            "{} trailing bytes",
            data.len() - r.pos
        )));
    }
    Ok(Episode {
        id,
        embodiment,
        scene_id,
        task_id,
        frames,
        subtasks,
    })
}

/// Writes `e` under `root` and returns the file path.
pub fn write_episode(e: &Episode, root: &Path) -> Result<PathBuf, EpisodeError> {
    let bytes = encode_episode(e)?;
    fs::create_dir_all(root).map_err(io_err(root))?;
    let path = root.join(episode_file_name(&e.id));
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_episode(path: &Path) -> Result<Episode, EpisodeError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_episode(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub embodiment: EmbodimentId,
    pub scene_id: u32,
    pub task_id: u32,
    pub frame_count: u32,
    /// Relative to the dataset root.
    pub path: String,
}

impl ManifestEntry {
    pub fn for_episode(e: &Episode) -> Self {
        Self {
            id: e.id.clone(),
            embodiment: e.embodiment.id,
            scene_id: e.scene_id,
            task_id: e.task_id,
            frame_count: e.frames.len() as u32,
            path: episode_file_name(&e.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub episodes: Vec<ManifestEntry>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            episodes: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

/// Keeps the episodes whose `(scene_id, task_id)` is in `combos`, in order.
pub fn select_combos(manifest: &DatasetManifest, combos: &BTreeSet<(u32, u32)>) -> DatasetManifest {
    DatasetManifest {
        format_version: manifest.format_version,
        episodes: manifest
            .episodes
            .iter()
            .filter(|e| combos.contains(&(e.scene_id, e.task_id)))
            .cloned()
            .collect(),
    }
}

/// Atomically replaces `path` with `contents` (write to a sibling temp file, then rename).
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), EpisodeError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(contents).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_manifest(root: &Path, m: &DatasetManifest) -> Result<(), EpisodeError> {
    let json = serde_json::to_vec_pretty(m).map_err(|e| EpisodeError::Manifest(e.to_string()))?;
    write_atomic(&root.join(MANIFEST_FILE), &json)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest, EpisodeError> {
    let path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| EpisodeError::Manifest(e.to_string()))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(EpisodeError::UnsupportedVersion(m.format_version));
    }
    Ok(m)
}

/// Writes every episode plus the manifest and subtask vocabulary.
pub fn write_dataset(
    root: &Path,
    episodes: &[Episode],
    subtask_vocab: &[String],
) -> Result<DatasetManifest, EpisodeError> {
    let mut manifest = DatasetManifest::default();
    for e in episodes {
        write_episode(e, root)?;
        manifest.episodes.push(ManifestEntry::for_episode(e));
    }
    let vocab = serde_json::to_vec_pretty(subtask_vocab)
        .map_err(|e| EpisodeError::Manifest(e.to_string()))?;
    write_atomic(&root.join(SUBTASK_VOCAB_FILE), &vocab)?;
    save_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Reads every episode listed in `manifest`, checking it against its entry.
pub fn read_dataset(root: &Path, manifest: &DatasetManifest) -> Result<Vec<Episode>, EpisodeError> {
    manifest
        .episodes
        .iter()
        .map(|entry| {
            let e = read_episode(&root.join(&entry.path))?;
            let found = ManifestEntry::for_episode(&e);
            let agrees = found.id == entry.id
                && found.embodiment == entry.embodiment
                && found.scene_id == entry.scene_id
                && found.task_id == entry.task_id
                && found.frame_count == entry.frame_count;
            if !agrees {
                return Err(EpisodeError::Manifest(format!(
                    "episode {} disagrees with its manifest entry",
                    entry.id
                )));
            }
            Ok(e)
        })
        .collect()
}

pub fn load_subtask_vocab(root: &Path) -> Result<Vec<String>, EpisodeError> {
    let path = root.join(SUBTASK_VOCAB_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| EpisodeError::Manifest(e.to_string()))
}
