//! Joint-tree skeleton, 6D rotation encoding and forward kinematics.
//!
//! Conventions: +Y is vertical, the ground plane is y=0, offsets are in
//! meters. Parents are listed root-first so every parent index is smaller
//! than its child's.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertical axis of the world frame. Ground plane is y=0.
pub const UP_AXIS: usize = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    /// Parent index per joint, -1 for the root.
    pub parents: Vec<i32>,
    /// Bone offset from the parent joint, meters.
    pub offsets: Vec<[f32; 3]>,
    /// Joints participating in foot contact (ankles and toes).
    pub foot_joints: Vec<usize>,
}

impl Skeleton {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<i32>,
        offsets: Vec<[f32; 3]>,
        foot_joints: Vec<usize>,
    ) -> Result<Self> {
        let s = Skeleton { joint_names, parents, offsets, foot_joints };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n < 2 {
            return Err(Error::Config("skeleton needs at least 2 joints".into()));
        }
        if self.joint_names.len() != n || self.offsets.len() != n {
            return Err(Error::Config("skeleton field lengths disagree".into()));
        }
        if self.parents[0] != -1 {
            return Err(Error::Config("first joint must be the root (parent -1)".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Config(format!(
                    "joint {j}: parent {p} must be a previously listed joint"
                )));
            }
        }
        for (j, o) in self.offsets.iter().enumerate() {
            if !o.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("offset of joint {j}")));
            }
        }
        for &f in &self.foot_joints {
            if f >= n {
                return Err(Error::Config(format!("foot joint {f} out of range")));
            }
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Children lists, index-ordered.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.joint_count()];
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            ch[p as usize].push(j);
        }
        ch
    }

    /// Joint positions with identity rotations and the root at the origin:
    /// the sum of offsets along the ancestor chain.
    pub fn rest_positions(&self) -> Vec<[f32; 3]> {
        let mut pos = vec![[0.0f32; 3]; self.joint_count()];
        for j in 1..self.joint_count() {
            let p = self.parents[j] as usize;
            for a in 0..3 {
                pos[j][a] = pos[p][a] + self.offsets[j][a];
            }
        }
        pos
    }

    /// Root height that puts the lowest foot joint exactly on the ground.
    pub fn rest_root_height(&self) -> f32 {
        let rest = self.rest_positions();
        let lowest = self
            .foot_joints
            .iter()
            .map(|&j| rest[j][UP_AXIS])
            .fold(f32::INFINITY, f32::min);
        -lowest
    }

    /// Ground clearance of each foot joint in the rest stance (lowest foot
    /// joint touching y=0). Used by contact detection and anchor clamping.
    pub fn foot_clearance(&self, joint: usize) -> f32 {
        let rest = self.rest_positions();
        let lowest = self
            .foot_joints
            .iter()
            .map(|&j| rest[j][UP_AXIS])
            .fold(f32::INFINITY, f32::min);
        rest[joint][UP_AXIS] - lowest
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let s: Skeleton = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    /// 12-joint desk-scale skeleton: pelvis, spine, chest, head and two
    /// hip-knee-ankle-toe legs. Foot joints are both ankles and toes.
    pub fn desk_default() -> Self {
        let names = [
            "pelvis", "spine", "chest", "head", "l_hip", "l_knee", "l_ankle", "l_toe", "r_hip",
            "r_knee", "r_ankle", "r_toe",
        ];
        let parents = vec![-1, 0, 1, 2, 0, 4, 5, 6, 0, 8, 9, 10];
        let offsets = vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.20, 0.0],
            [0.10, -0.05, 0.0],
            [0.0, -0.40, 0.0],
            [0.0, -0.40, 0.0],
            [0.0, -0.05, 0.15],
            [-0.10, -0.05, 0.0],
            [0.0, -0.40, 0.0],
            [0.0, -0.40, 0.0],
            [0.0, -0.05, 0.15],
        ];
        Skeleton::new(
            names.iter().map(|s| s.to_string()).collect(),
            parents,
            offsets,
            vec![6, 7, 10, 11],
        )
        .expect("desk skeleton is valid")
    }
}

/// World-frame joint positions, frames x joints x 3, meters.
#[derive(Debug, Clone)]
pub struct JointPositions {
    pub positions: Array3<f32>,
    pub fps: f32,
}

impl JointPositions {
    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.positions.shape()[1]
    }
}

/// Decode a 6D continuous rotation (first two matrix columns) into a
/// rotation matrix via Gram-Schmidt.
pub fn rot6d_to_matrix(r: &[f32; 6]) -> Matrix3<f32> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let b1 = a1.normalize();
    let b2 = (a2 - b1 * b1.dot(&a2)).normalize();
    let b3 = b1.cross(&b2);
    Matrix3::from_columns(&[b1, b2, b3])
}

/// First two columns of a rotation matrix.
pub fn matrix_to_rot6d(m: &Matrix3<f32>) -> [f32; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Expand per-joint 6D rotations (F x J x 6) into matrices (F x J x 3 x 3).
pub fn rot6d_to_matrices(r: &Array3<f32>) -> Result<Array4<f32>> {
    let (f, j, d) = r.dim();
    if d != 6 {
        return Err(Error::Shape(format!("expected last dim 6, got {d}")));
    }
    let mut out = Array4::zeros((f, j, 3, 3));
    for fi in 0..f {
        for ji in 0..j {
            let v: [f32; 6] = [
                r[[fi, ji, 0]],
                r[[fi, ji, 1]],
                r[[fi, ji, 2]],
                r[[fi, ji, 3]],
                r[[fi, ji, 4]],
                r[[fi, ji, 5]],
            ];
            let m = rot6d_to_matrix(&v);
            for a in 0..3 {
                for b in 0..3 {
                    out[[fi, ji, a, b]] = m[(a, b)];
                }
            }
        }
    }
    Ok(out)
}

/// Forward kinematics: world joint positions from per-frame root positions
/// and per-joint local rotation matrices (F x J x 3 x 3).
///
/// World transform of joint j is its parent's world rotation applied to the
/// offset, accumulated down the tree; the root sits at `root_positions` with
/// its own local rotation as world rotation.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    root_positions: &Array2<f32>,
    local_rotations: &Array4<f32>,
) -> Result<JointPositions> {
    forward_kinematics_fps(skeleton, root_positions, local_rotations, 20.0)
}

pub fn forward_kinematics_fps(
    skeleton: &Skeleton,
    root_positions: &Array2<f32>,
    local_rotations: &Array4<f32>,
    fps: f32,
) -> Result<JointPositions> {
    let nj = skeleton.joint_count();
    let frames = root_positions.shape()[0];
    if root_positions.shape()[1] != 3 {
        return Err(Error::Shape("root_positions must be F x 3".into()));
    }
    let rs = local_rotations.shape();
    if rs != [frames, nj, 3, 3] {
        return Err(Error::Shape(format!(
            "local_rotations {rs:?} vs expected [{frames}, {nj}, 3, 3]"
        )));
    }
    if root_positions.iter().any(|v| !v.is_finite())
        || local_rotations.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("forward_kinematics inputs".into()));
    }

    let mut positions = Array3::zeros((frames, nj, 3));
    let mut world_rot = vec![Matrix3::identity(); nj];
    for f in 0..frames {
        for j in 0..nj {
            let local = Matrix3::from_fn(|a, b| local_rotations[[f, j, a, b]]);
            if j == 0 {
                world_rot[0] = local;
                for a in 0..3 {
                    positions[[f, 0, a]] = root_positions[[f, a]];
                }
            } else {
                let p = skeleton.parents[j] as usize;
                world_rot[j] = world_rot[p] * local;
                let off = Vector3::new(
                    skeleton.offsets[j][0],
                    skeleton.offsets[j][1],
                    skeleton.offsets[j][2],
                );
                let world_off = world_rot[p] * off;
                for a in 0..3 {
                    positions[[f, j, a]] = positions[[f, p, a]] + world_off[a];
                }
            }
        }
    }
    Ok(JointPositions { positions, fps })
}

/// Identity rotations for F frames and J joints.
pub fn identity_rotations(frames: usize, joints: usize) -> Array4<f32> {
    let mut r = Array4::zeros((frames, joints, 3, 3));
    for f in 0..frames {
        for j in 0..joints {
            for a in 0..3 {
                r[[f, j, a, a]] = 1.0;
            }
        }
    }
    r
}

/// Minimal rotation taking direction `from` onto direction `to`.
/// Falls back to a half-turn about a perpendicular axis when antiparallel.
pub fn rotation_between(from: &Vector3<f32>, to: &Vector3<f32>) -> Rotation3<f32> {
    match Rotation3::rotation_between(from, to) {
        Some(r) => r,
        None => {
            let axis = from.cross(&Vector3::x()).try_normalize(1e-6).unwrap_or_else(|| {
                from.cross(&Vector3::y()).normalize()
            });
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), std::f32::consts::PI)
        }
    }
}
