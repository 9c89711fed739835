//! Relative end-effector action chunks for robot and human episodes, and the
//! packing of both into one unified action layout.
//!
//! Row `i` of a chunk extracted at frame `t` targets frame `t + (i+1)·stride`,
//! expressed relative to the pose at `t`. A stationary trajectory therefore
//! yields an all-zero pose block.
//!
//! Robot rows (16): `[left EE (6), left grip, right EE (6), right grip, base fwd, base yaw]`.
//! Human rows (18): `[left hand (6), right hand (6), head (6)]`.

use std::ops::Range;

use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Embodiment, Episode, Frame, HUMAN_ACTION_DIM, ROBOT_ACTION_DIM};
use crate::geometry::{fit_hand_frame, pose_relative, GeometryError, Pose6};

pub const UNIFIED_DIM: usize = 20;
pub const SLOT_LEFT_EE: Range<usize> = 0..6;
pub const SLOT_LEFT_GRIP: usize = 6;
pub const SLOT_RIGHT_EE: Range<usize> = 7..13;
pub const SLOT_RIGHT_GRIP: usize = 13;
/// Robot base (2 used) or human head (6 used).
pub const SLOT_BASE_HEAD: Range<usize> = 14..20;

/// Relative rotations at or beyond this angle are rejected.
const MAX_RELATIVE_ANGLE: f64 = std::f64::consts::PI - 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("chunk at frame {t} needs frame {needed} but the episode has {len} frames")]
    HorizonOverrun { t: usize, needed: usize, len: usize },
    #[error("relative rotation of {angle:.4} rad at row {row} is not below π")]
    RotationTooLarge { row: usize, angle: f64 },
    #[error("expected a {expected} episode")]
    WrongEmbodiment { expected: &'static str },
    #[error("frame {frame} is missing {field}")]
    MissingField { frame: usize, field: &'static str },
    #[error("frame {frame} has no hand keypoints")]
    MissingKeypoints { frame: usize },
    #[error("frame {frame}, hand {hand}: {source}")]
    DegenerateKeypoints {
        frame: usize,
        hand: usize,
        #[source]
        source: GeometryError,
    },
    #[error("unified layout needs {needed} dims, got {got}")]
    DimOverflow { needed: usize, got: usize },
    #[error("invalid chunk config: {0}")]
    InvalidConfig(String),
}

/// Indices of the keypoints that span the hand frame, within the 17-point hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonLayout {
    pub palm: usize,
    pub middle: usize,
    pub ring: usize,
}

impl Default for SkeletonLayout {
    fn default() -> Self {
        Self {
            palm: 0,
            middle: 9,
            ring: 13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkConfig {
    pub horizon: usize,
    pub stride: usize,
    #[serde(default = "default_unified_dim")]
    pub unified_dim: usize,
}

fn default_unified_dim() -> usize {
    UNIFIED_DIM
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            stride: 1,
            unified_dim: UNIFIED_DIM,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<(), ActionError> {
        if self.horizon == 0 || self.stride == 0 {
            return Err(ActionError::InvalidConfig("horizon and stride must be ≥ 1".into()));
        }
        if self.unified_dim < UNIFIED_DIM {
            return Err(ActionError::DimOverflow {
                needed: UNIFIED_DIM,
                got: self.unified_dim,
            });
        }
        Ok(())
    }

    /// Frames spanned by one chunk beyond its reference frame.
    pub fn span(&self) -> usize {
        self.horizon * self.stride
    }

    /// Number of reference frames in an episode of `len` frames that admit a chunk.
    pub fn valid_starts(&self, len: usize) -> usize {
        len.saturating_sub(self.span())
    }

    pub fn flat_dim(&self) -> usize {
        self.horizon * self.unified_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    /// H × D.
    pub values: Array2<f64>,
    pub mask: Vec<bool>,
    pub embodiment: Embodiment,
    pub reference_index: usize,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// The 6-vector at `row`, columns `offset..offset+6`, as a pose.
    pub fn pose_block(&self, row: usize, offset: usize) -> Pose6 {
        let mut a = [0.0; 6];
        for (k, v) in a.iter_mut().enumerate() {
            *v = self.values[[row, offset + k]];
        }
        Pose6::from_array(a)
    }
}

fn check_horizon(e: &Episode, t: usize, cfg: &ChunkConfig) -> Result<(), ActionError> {
    cfg.validate()?;
    let needed = t + cfg.span();
    if needed >= e.frames.len() {
        return Err(ActionError::HorizonOverrun {
            t,
            needed,
            len: e.frames.len(),
        });
    }
    Ok(())
}

fn write_relative(
    values: &mut Array2<f64>,
    row: usize,
    offset: usize,
    reference: &Pose6,
    target: &Pose6,
) -> Result<(), ActionError> {
    let rel = pose_relative(reference, target);
    let angle = rel.rotation.angle();
    if angle >= MAX_RELATIVE_ANGLE {
        return Err(ActionError::RotationTooLarge { row, angle });
    }
    for (k, v) in rel.to_array().into_iter().enumerate() {
        values[[row, offset + k]] = v;
    }
    Ok(())
}

fn robot_state(f: &Frame, idx: usize) -> Result<(Pose6, f64, Pose6, f64, Pose6), ActionError> {
    let missing = |field| ActionError::MissingField { frame: idx, field };
    Ok((
        f.left_ee.ok_or(missing("left_ee"))?.to_pose(),
        f64::from(f.left_grip.ok_or(missing("left_grip"))?),
        f.right_ee.ok_or(missing("right_ee"))?.to_pose(),
        f64::from(f.right_grip.ok_or(missing("right_grip"))?),
        f.base_pose.map(|b| b.to_pose()).unwrap_or_default(),
    ))
}

pub fn robot_action_chunk(e: &Episode, t: usize, cfg: &ChunkConfig) -> Result<ActionChunk, ActionError> {
    if !e.embodiment.has_gripper {
        return Err(ActionError::WrongEmbodiment { expected: "robot" });
    }
    check_horizon(e, t, cfg)?;
    let (left0, _, right0, _, base0) = robot_state(&e.frames[t], t)?;
    let mut values = Array2::zeros((cfg.horizon, ROBOT_ACTION_DIM));
    for i in 0..cfg.horizon {
        let k = t + (i + 1) * cfg.stride;
        let (left, lg, right, rg, base) = robot_state(&e.frames[k], k)?;
        write_relative(&mut values, i, 0, &left0, &left)?;
        values[[i, 6]] = lg;
        write_relative(&mut values, i, 7, &right0, &right)?;
        values[[i, 13]] = rg;
        let rel_base = pose_relative(&base0, &base);
        values[[i, 14]] = rel_base.translation.x;
        values[[i, 15]] = rel_base.rotation.0.z;
    }
    Ok(ActionChunk {
        values,
        mask: vec![true; ROBOT_ACTION_DIM],
        embodiment: e.embodiment,
        reference_index: t,
    })
}

/// World-frame (left, right) hand poses from head pose and head-frame keypoints.
pub fn human_ee_poses(
    f: &Frame,
    idx: usize,
    layout: &SkeletonLayout,
) -> Result<(Pose6, Pose6), ActionError> {
    let kp = f.hand_keypoints.ok_or(ActionError::MissingKeypoints { frame: idx })?;
    let head = f
        .head_pose
        .ok_or(ActionError::MissingField { frame: idx, field: "head_pose" })?
        .to_pose();
    let point = |hand: usize, k: usize| {
        let p = kp.0[hand][k];
        Vector3::new(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]))
    };
    let fit = |hand: usize| {
        fit_hand_frame(
            &point(hand, layout.palm),
            &point(hand, layout.middle),
            &point(hand, layout.ring),
        )
        .map(|local| head.compose(&local))
        .map_err(|source| ActionError::DegenerateKeypoints { frame: idx, hand, source })
    };
    Ok((fit(0)?, fit(1)?))
}

pub fn human_action_chunk(
    e: &Episode,
    t: usize,
    cfg: &ChunkConfig,
    layout: &SkeletonLayout,
) -> Result<ActionChunk, ActionError> {
    if !e.embodiment.id.is_human() {
        return Err(ActionError::WrongEmbodiment { expected: "human" });
    }
    check_horizon(e, t, cfg)?;
    let head_of = |k: usize| -> Result<Pose6, ActionError> {
        Ok(e.frames[k]
            .head_pose
            .ok_or(ActionError::MissingField { frame: k, field: "head_pose" })?
            .to_pose())
    };
    let (left0, right0) = human_ee_poses(&e.frames[t], t, layout)?;
    let head0 = head_of(t)?;
    let mut values = Array2::zeros((cfg.horizon, HUMAN_ACTION_DIM));
    for i in 0..cfg.horizon {
        let k = t + (i + 1) * cfg.stride;
        let (left, right) = human_ee_poses(&e.frames[k], k, layout)?;
        write_relative(&mut values, i, 0, &left0, &left)?;
        write_relative(&mut values, i, 6, &right0, &right)?;
        write_relative(&mut values, i, 12, &head0, &head_of(k)?)?;
    }
    Ok(ActionChunk {
        values,
        mask: vec![true; HUMAN_ACTION_DIM],
        embodiment: e.embodiment,
        reference_index: t,
    })
}

/// Dispatches on embodiment.
pub fn action_chunk(
    e: &Episode,
    t: usize,
    cfg: &ChunkConfig,
    layout: &SkeletonLayout,
) -> Result<ActionChunk, ActionError> {
    if e.embodiment.id.is_human() {
        human_action_chunk(e, t, cfg, layout)
    } else {
        robot_action_chunk(e, t, cfg)
    }
}

/// Unified slot of each native column, per embodiment.
pub fn slot_map(embodiment: &Embodiment) -> Vec<usize> {
    if embodiment.has_gripper {
        (0..ROBOT_ACTION_DIM).collect()
    } else {
        SLOT_LEFT_EE.chain(SLOT_RIGHT_EE).chain(SLOT_BASE_HEAD).collect()
    }
}

/// Scatters a chunk into the unified layout. Absent slots are zero and masked off.
pub fn unify(chunk: &ActionChunk, unified_dim: usize) -> Result<(Array2<f64>, Vec<bool>), ActionError> {
    let slots = slot_map(&chunk.embodiment);
    let needed = slots.iter().max().map_or(0, |m| m + 1).max(chunk.dim());
    if unified_dim < needed || slots.len() != chunk.dim() {
        return Err(ActionError::DimOverflow {
            needed,
            got: unified_dim,
        });
    }
    let mut out = Array2::zeros((chunk.horizon(), unified_dim));
    let mut mask = vec![false; unified_dim];
    for (col, &slot) in slots.iter().enumerate() {
        if !chunk.mask[col] {
            continue;
        }
        mask[slot] = true;
        for r in 0..chunk.horizon() {
            out[[r, slot]] = chunk.values[[r, col]];
        }
    }
    Ok((out, mask))
}

/// Inverse of [`unify`] on the valid dims.
pub fn gather(unified: &Array2<f64>, embodiment: &Embodiment) -> Array2<f64> {
    let slots = slot_map(embodiment);
    let mut out = Array2::zeros((unified.nrows(), slots.len()));
    for (col, &slot) in slots.iter().enumerate() {
        for r in 0..unified.nrows() {
            out[[r, col]] = unified[[r, slot]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{HandKeypoints, PoseRecord, SubtaskSpan};
    use crate::geometry::RotVec3;

    fn robot_episode(poses: &[(Pose6, Pose6, Pose6)], grips: &[f32]) -> Episode {
        let frames = poses
            .iter()
            .zip(grips)
            .enumerate()
            .map(|(i, ((l, r, b), g))| {
                let mut f = Frame::new(i as f64, vec![0.0]);
                f.left_ee = Some(PoseRecord::from_pose(l));
                f.right_ee = Some(PoseRecord::from_pose(r));
                f.base_pose = Some(PoseRecord::from_pose(b));
                f.left_grip = Some(0.0);
                f.right_grip = Some(*g);
                f
            })
            .collect();
        Episode {
            id: "r".into(),
            embodiment: Embodiment::robot(0),
            scene_id: 0,
            task_id: 0,
            frames,
            subtasks: vec![SubtaskSpan { start_frame: 0, end_frame: 1, label_id: 0 }],
        }
    }

    fn hand_points(palm: Vector3<f64>) -> [[f32; 3]; 17] {
        let mut k = [[0.0f32; 3]; 17];
        let put = |k: &mut [[f32; 3]; 17], i: usize, p: Vector3<f64>| {
            k[i] = [p.x as f32, p.y as f32, p.z as f32];
        };
        put(&mut k, 0, palm);
        put(&mut k, 9, palm + Vector3::new(0.08, 0.01, 0.0));
        put(&mut k, 13, palm + Vector3::new(0.08, -0.01, 0.0));
        k
    }

    fn human_frame(i: usize, head: Pose6, left: Vector3<f64>, right: Vector3<f64>) -> Frame {
        let mut f = Frame::new(i as f64, vec![0.0]);
        f.head_pose = Some(PoseRecord::from_pose(&head));
        f.hand_keypoints = Some(HandKeypoints([hand_points(left), hand_points(right)]));
        f
    }

    fn human_episode(frames: Vec<Frame>) -> Episode {
        Episode {
            id: "h".into(),
            embodiment: Embodiment::human(),
            scene_id: 0,
            task_id: 0,
            frames,
            subtasks: vec![],
        }
    }

    #[test]
    fn stationary_robot_gives_zero_pose_rows() {
        let p = (
            Pose6::from_translation(0.1, 0.2, 0.3),
            Pose6::new(Vector3::new(0.5, 0.0, 0.2), RotVec3::new(0.0, 0.3, 0.0)),
            Pose6::identity(),
        );
        let e = robot_episode(&[p; 6], &[0.7; 6]);
        let cfg = ChunkConfig { horizon: 4, stride: 1, ..Default::default() };
        let c = robot_action_chunk(&e, 1, &cfg).unwrap();
        assert_eq!(c.dim(), 16);
        assert_eq!(c.mask, vec![true; 16]);
        for r in 0..4 {
            for col in 0..16 {
                let expected = if col == 13 { 0.7f32 as f64 } else { 0.0 };
                assert!((c.values[[r, col]] - expected).abs() < 1e-12, "{r},{col}");
            }
        }
    }

    #[test]
    fn forward_base_motion() {
        // Base yawed by 0.3 rad, moving 0.1 m per step along its own heading.
        let yaw = 0.3f64;
        let poses: Vec<_> = (0..8)
            .map(|i| {
                let d = 0.1 * i as f64;
                let base = Pose6::new(
                    Vector3::new(d * yaw.cos(), d * yaw.sin(), 0.0),
                    RotVec3::new(0.0, 0.0, yaw),
                );
                (Pose6::identity(), Pose6::identity(), base)
            })
            .collect();
        let e = robot_episode(&poses, &[0.0; 8]);
        let c = robot_action_chunk(&e, 2, &ChunkConfig { horizon: 5, stride: 1, ..Default::default() }).unwrap();
        for i in 0..5 {
            // Poses are stored as f32, so compare at f32 resolution.
            assert!((c.values[[i, 14]] - 0.1 * (i + 1) as f64).abs() < 1e-6);
            assert!(c.values[[i, 15]].abs() < 1e-6);
        }
    }

    #[test]
    fn horizon_overrun() {
        let e = robot_episode(&[(Pose6::identity(), Pose6::identity(), Pose6::identity()); 5], &[0.0; 5]);
        let cfg = ChunkConfig { horizon: 2, stride: 2, ..Default::default() };
        assert!(robot_action_chunk(&e, 0, &cfg).is_ok());
        assert_eq!(
            robot_action_chunk(&e, 1, &cfg),
            Err(ActionError::HorizonOverrun { t: 1, needed: 5, len: 5 })
        );
    }

    #[test]
    fn large_rotation_rejected() {
        let a = Pose6::identity();
        let b = Pose6::new(Vector3::zeros(), RotVec3::new(0.0, 0.0, std::f64::consts::PI));
        let e = robot_episode(&[(a, a, a), (a, b, a)], &[0.0; 2]);
        let cfg = ChunkConfig { horizon: 1, stride: 1, ..Default::default() };
        assert!(matches!(robot_action_chunk(&e, 0, &cfg), Err(ActionError::RotationTooLarge { row: 0, .. })));
    }

    #[test]
    fn identity_head_gives_fitted_frame() {
        let palm = Vector3::new(0.3, -0.2, 0.5);
        let f = human_frame(0, Pose6::identity(), Vector3::new(-0.3, -0.2, 0.5), palm);
        let (_, right) = human_ee_poses(&f, 0, &SkeletonLayout::default()).unwrap();
        let k = f.hand_keypoints.unwrap().0[1];
        let v = |p: [f32; 3]| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
        let direct = fit_hand_frame(&v(k[0]), &v(k[9]), &v(k[13])).unwrap();
        assert!(right.distance(&direct) < 1e-12);
    }

    #[test]
    fn head_pose_shifts_hands_exactly() {
        let head = Pose6::new(Vector3::new(0.2, 1.0, 1.4), RotVec3::new(0.1, -0.4, 0.9));
        let head = PoseRecord::from_pose(&head).to_pose();
        let l = Vector3::new(-0.2, 0.1, 0.4);
        let r = Vector3::new(0.25, 0.0, 0.45);
        let layout = SkeletonLayout::default();
        let (l0, r0) = human_ee_poses(&human_frame(0, Pose6::identity(), l, r), 0, &layout).unwrap();
        let (l1, r1) = human_ee_poses(&human_frame(0, head, l, r), 0, &layout).unwrap();
        assert!(l1.distance(&head.compose(&l0)) < 1e-12);
        assert!(r1.distance(&head.compose(&r0)) < 1e-12);
    }

    #[test]
    fn zero_keypoints_are_degenerate() {
        let mut f = human_frame(0, Pose6::identity(), Vector3::zeros(), Vector3::zeros());
        f.hand_keypoints = Some(HandKeypoints::zeros());
        assert!(matches!(
            human_ee_poses(&f, 0, &SkeletonLayout::default()),
            Err(ActionError::DegenerateKeypoints { hand: 0, .. })
        ));
        f.hand_keypoints = None;
        assert!(matches!(
            human_ee_poses(&f, 3, &SkeletonLayout::default()),
            Err(ActionError::MissingKeypoints { frame: 3 })
        ));
    }

    #[test]
    fn stationary_human_gives_zero_chunk() {
        let head = Pose6::new(Vector3::new(0.0, 0.0, 1.5), RotVec3::new(0.0, 0.2, 0.0));
        let frames = (0..6)
            .map(|i| human_frame(i, head, Vector3::new(-0.2, 0.0, 0.4), Vector3::new(0.2, 0.0, 0.4)))
            .collect();
        let e = human_episode(frames);
        let c = human_action_chunk(&e, 0, &ChunkConfig::default(), &SkeletonLayout::default()).unwrap();
        assert_eq!(c.dim(), 18);
        assert_eq!(c.mask, vec![true; 18]);
        assert!(c.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn head_translation_with_attached_hands() {
        // Hands fixed in the head frame while the head moves 5 cm/step forward:
        // hand rows equal head rows, and all equal the analytic displacement.
        let frames = (0..7)
            .map(|i| {
                let head = Pose6::new(
                    Vector3::new(0.0, 0.05 * i as f64, 1.5),
                    RotVec3::new(0.0, 0.0, 0.5),
                );
                human_frame(i, head, Vector3::new(-0.2, 0.1, 0.4), Vector3::new(0.2, 0.1, 0.4))
            })
            .collect();
        let e = human_episode(frames);
        let cfg = ChunkConfig { horizon: 3, stride: 2, ..Default::default() };
        let c = human_action_chunk(&e, 0, &cfg, &SkeletonLayout::default()).unwrap();
        let h0 = Pose6::new(Vector3::new(0.0, 0.0, 1.5), RotVec3::new(0.0, 0.0, 0.5));
        for i in 0..3 {
            let d = 0.05 * (2 * (i + 1)) as f64;
            // World displacement (0, d, 0) seen in the head frame at t.
            let local = h0.rotation_matrix().transpose() * Vector3::new(0.0, d, 0.0);
            let head_rel = c.pose_block(i, 12);
            assert!((head_rel.translation - local).norm() < 1e-6);
            assert!(head_rel.rotation.angle() < 1e-6);
            // Hands are rigidly attached: their relative motion is the head motion
            // conjugated into the hand frame, a pure translation here.
            for off in [0, 6] {
                let rel = c.pose_block(i, off);
                assert!((rel.translation.norm() - d).abs() < 1e-6);
                assert!(rel.rotation.angle() < 1e-6);
            }
        }
    }

    #[test]
    fn unify_slots() {
        let robot = ActionChunk {
            values: Array2::from_shape_fn((2, 16), |(r, c)| (r * 16 + c + 1) as f64),
            mask: vec![true; 16],
            embodiment: Embodiment::robot(0),
            reference_index: 0,
        };
        let (u, m) = unify(&robot, 20).unwrap();
        assert_eq!(m, (0..20).map(|s| s < 16).collect::<Vec<_>>());
        assert_eq!(u[[1, 15]], 32.0);
        assert!(u.column(16).iter().all(|&v| v == 0.0));
        assert_eq!(gather(&u, &robot.embodiment), robot.values);

        let human = ActionChunk {
            values: Array2::from_shape_fn((2, 18), |(r, c)| (r * 18 + c + 1) as f64),
            mask: vec![true; 18],
            embodiment: Embodiment::human(),
            reference_index: 0,
        };
        let (u, m) = unify(&human, 20).unwrap();
        let valid: Vec<usize> = (0..20).filter(|&s| m[s]).collect();
        assert_eq!(valid, (0..6).chain(7..13).chain(14..20).collect::<Vec<_>>());
        assert!(u.column(6).iter().chain(u.column(13).iter()).all(|&v| v == 0.0));
        assert_eq!(u[[0, 7]], 7.0);
        assert_eq!(u[[1, 19]], 36.0);
        assert_eq!(gather(&u, &human.embodiment), human.values);

        assert_eq!(unify(&human, 16), Err(ActionError::DimOverflow { needed: 20, got: 16 }));
        assert!(unify(&robot, 16).is_ok());
    }
}
