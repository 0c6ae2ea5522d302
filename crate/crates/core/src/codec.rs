//! Conversion between feature representations and world joint positions.

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, RepKind, RepresentationSpec};
use crate::skeleton::{
    forward_kinematics_fps, matrix_to_rot6d, rot6d_to_matrices, rotation_between, JointPositions,
    Skeleton,
};

/// Tolerated relative bone-length deviation when re-encoding positions
/// through the rotation representation.
pub const BONE_LENGTH_TOLERANCE: f32 = 0.01;

/// Decode motion features into world joint positions (valid frames only).
pub fn decode_features(
    motion: &MotionSequence,
    spec: &RepresentationSpec,
    skeleton: &Skeleton,
) -> Result<JointPositions> {
    if motion.feature_dim() != spec.feature_dim() {
        return Err(Error::Shape(format!(
            "motion feature_dim {} != spec feature_dim {}",
            motion.feature_dim(),
            spec.feature_dim()
        )));
    }
    if spec.joint_count != skeleton.joint_count() {
        return Err(Error::Shape("spec joint_count != skeleton joint_count".into()));
    }
    let feats = motion.valid_features();
    decode_feature_frames(&feats, spec, skeleton, motion.fps)
}

/// Decode a raw (already unmasked) feature matrix.
pub fn decode_feature_frames(
    feats: &Array2<f32>,
    spec: &RepresentationSpec,
    skeleton: &Skeleton,
    fps: f32,
) -> Result<JointPositions> {
    let frames = feats.shape()[0];
    let j = spec.joint_count;
    match spec.kind {
        RepKind::Positions => {
            let mut positions = Array3::zeros((frames, j, 3));
            for f in 0..frames {
                for ji in 0..j {
                    for a in 0..3 {
                        positions[[f, ji, a]] = feats[[f, ji * 3 + a]];
                    }
                }
            }
            Ok(JointPositions { positions, fps })
        }
        RepKind::RootRotations => {
            let mut roots = Array2::zeros((frames, 3));
            let mut rot6d = Array3::zeros((frames, j, 6));
            for f in 0..frames {
                for a in 0..3 {
                    roots[[f, a]] = feats[[f, a]];
                }
                for ji in 0..j {
                    for k in 0..6 {
                        rot6d[[f, ji, k]] = feats[[f, 3 + ji * 6 + k]];
                    }
                }
            }
            let rots = rot6d_to_matrices(&rot6d)?;
            forward_kinematics_fps(skeleton, &roots, &rots, fps)
        }
    }
}

/// Encode world joint positions back into motion features.
///
/// For the rotation representation this runs a per-joint analytic inverse:
/// each joint's world rotation is chosen to map its children's rest offsets
/// onto the observed child directions (Kabsch for multi-child joints,
/// minimal rotation for single-child chains, parent rotation for leaves).
pub fn encode_positions(
    positions: &JointPositions,
    spec: &RepresentationSpec,
    skeleton: &Skeleton,
) -> Result<MotionSequence> {
    if positions.joints() != spec.joint_count || spec.joint_count != skeleton.joint_count() {
        return Err(Error::Shape("joint count mismatch".into()));
    }
    let frames = positions.frames();
    let nj = positions.joints();
    match spec.kind {
        RepKind::Positions => {
            let mut feats = Array2::zeros((frames, spec.feature_dim()));
            for f in 0..frames {
                for j in 0..nj {
                    for a in 0..3 {
                        feats[[f, j * 3 + a]] = positions.positions[[f, j, a]];
                    }
                }
            }
            MotionSequence::unmasked(positions.fps, feats)
        }
        RepKind::RootRotations => {
            check_bone_lengths(positions, skeleton)?;
            let children = skeleton.children();
            let mut feats = Array2::zeros((frames, spec.feature_dim()));
            for f in 0..frames {
                let mut world: Vec<Matrix3<f32>> = vec![Matrix3::identity(); nj];
                for j in 0..nj {
                    let kids = &children[j];
                    let world_j = if kids.is_empty() {
                        // Leaf rotation is unobservable from positions.
                        if j == 0 {
                            Matrix3::identity()
                        } else {
                            world[skeleton.parents[j] as usize]
                        }
                    } else if kids.len() == 1 {
                        let c = kids[0];
                        let off = Vector3::new(
                            skeleton.offsets[c][0],
                            skeleton.offsets[c][1],
                            skeleton.offsets[c][2],
                        );
                        let dir = child_dir(positions, f, j, c);
                        *rotation_between(&off, &dir).matrix()
                    } else {
                        kabsch(
                            kids.iter()
                                .map(|&c| {
                                    let off = Vector3::new(
                                        skeleton.offsets[c][0],
                                        skeleton.offsets[c][1],
                                        skeleton.offsets[c][2],
                                    );
                                    (off, child_dir(positions, f, j, c))
                                })
                                .collect(),
                        )
                    };
                    world[j] = world_j;
                    let local = if j == 0 {
                        world_j
                    } else {
                        let p = skeleton.parents[j] as usize;
                        world[p].transpose() * world_j
                    };
                    let six = matrix_to_rot6d(&local);
                    for k in 0..6 {
                        feats[[f, 3 + j * 6 + k]] = six[k];
                    }
                }
                for a in 0..3 {
                    feats[[f, a]] = positions.positions[[f, 0, a]];
                }
            }
            MotionSequence::unmasked(positions.fps, feats)
        }
    }
}

fn child_dir(positions: &JointPositions, f: usize, j: usize, c: usize) -> Vector3<f32> {
    Vector3::new(
        positions.positions[[f, c, 0]] - positions.positions[[f, j, 0]],
        positions.positions[[f, c, 1]] - positions.positions[[f, j, 1]],
        positions.positions[[f, c, 2]] - positions.positions[[f, j, 2]],
    )
}

fn check_bone_lengths(positions: &JointPositions, skeleton: &Skeleton) -> Result<()> {
    for f in 0..positions.frames() {
        for j in 1..skeleton.joint_count() {
            let p = skeleton.parents[j] as usize;
            let d = child_dir(positions, f, p, j).norm();
            let o = Vector3::new(
                skeleton.offsets[j][0],
                skeleton.offsets[j][1],
                skeleton.offsets[j][2],
            )
            .norm();
            if o > 1e-8 && (d - o).abs() > BONE_LENGTH_TOLERANCE * o {
                return Err(Error::Shape(format!(
                    "bone {j} length {d:.4} deviates from offset {o:.4} beyond {:.0}% at frame {f}",
                    BONE_LENGTH_TOLERANCE * 100.0
                )));
            }
        }
    }
    Ok(())
}

/// Best-fit rotation mapping each `from` vector onto the matching `to`
/// vector (SVD orthogonal Procrustes with reflection fix).
fn kabsch(pairs: Vec<(Vector3<f32>, Vector3<f32>)>) -> Matrix3<f32> {
    let mut h = Matrix3::<f32>::zeros();
    for (from, to) in &pairs {
        h += to * from.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let d = (u * vt).determinant();
    let mut s = Matrix3::identity();
    s[(2, 2)] = if d < 0.0 { -1.0 } else { 1.0 };
    let r = u * s * vt;
    // Guard against numerically non-orthonormal output.
    *Rotation3::from_matrix(&r).matrix()
}
