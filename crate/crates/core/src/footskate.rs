//! Foot-contact detection, skating-segment extraction and gradient-descent
//! footskate cleanup, standalone and as an in-loop sampler hook.
//!
//! "Height" of a foot joint is its clearance above the rest contact height
//! taken from the skeleton, so a planted ankle and a planted toe both sit at
//! height 0. Ground is y=0, +Y up.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, RepKind, RepresentationSpec};
use crate::skeleton::{JointPositions, Skeleton, UP_AXIS};
use crate::training::NormStats;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactConfig {
    /// Max height above rest contact for a contact frame, meters.
    pub height_thresh: f32,
    /// Max joint speed for a contact frame, m/s.
    pub speed_thresh: f32,
    /// Min mean horizontal drift speed marking a contact run as skating.
    pub skate_speed_thresh: f32,
    /// Contact runs shorter than this are dropped.
    pub min_segment_frames: usize,
    /// vGRF-proxy force threshold (body-weight fraction).
    pub force_thresh: f32,
}

impl Default for ContactConfig {
    fn default() -> Self {
        ContactConfig {
            height_thresh: 0.06,
            speed_thresh: 0.15,
            skate_speed_thresh: 0.05,
            min_segment_frames: 3,
            force_thresh: 0.02,
        }
    }
}

impl ContactConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height_thresh <= 0.0
            || self.speed_thresh <= 0.0
            || self.skate_speed_thresh <= 0.0
            || self.force_thresh <= 0.0
        {
            return Err(Error::Config("contact thresholds must be positive".into()));
        }
        if self.min_segment_frames < 1 {
            return Err(Error::Config("min_segment_frames must be >= 1".into()));
        }
        Ok(())
    }
}

/// One skating run: a foot joint, a frame range and the anchor point it is
/// pinned to during cleanup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactSegment {
    /// Skeleton joint index; always a member of `foot_joints`.
    pub joint: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub anchor: [f32; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanupConfig {
    pub w_pose: f64,
    pub w_foot: f64,
    pub w_traj: f64,
    pub w_vgrf: f64,
    pub step_size: f64,
    pub iterations: usize,
    /// Stop when the per-iteration loss decrease falls below this.
    pub tolerance: f64,
}

impl Default for CleanupConfig {
    fn default() -> Self {
        CleanupConfig {
            w_pose: 1.0,
            w_foot: 10.0,
            w_traj: 1.0,
            w_vgrf: 0.1,
            step_size: 0.01,
            iterations: 100,
            tolerance: 1e-6,
        }
    }
}

impl CleanupConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_pose, self.w_foot, self.w_traj, self.w_vgrf];
        if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("cleanup weights must be non-negative".into()));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("at least one cleanup weight must be positive".into()));
        }
        if self.step_size <= 0.0 || self.tolerance <= 0.0 {
            return Err(Error::Config("step_size and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanupReport {
    pub segments: Vec<ContactSegment>,
    pub loss_curve: Vec<f64>,
    pub skate_ratio_before: f64,
    pub skate_ratio_after: f64,
    pub max_pose_deviation_m: f64,
    pub diverged: bool,
}

fn check_positions(p: &JointPositions, skeleton: &Skeleton) -> Result<()> {
    if p.joints() != skeleton.joint_count() {
        return Err(Error::Shape(format!(
            "positions have {} joints, skeleton {}",
            p.joints(),
            skeleton.joint_count()
        )));
    }
    if skeleton.foot_joints.is_empty() {
        return Err(Error::Config("skeleton has no foot joints".into()));
    }
    Ok(())
}

/// Per-frame, per-joint speed by central differences (one-sided at the
/// ends). `horizontal` drops the vertical axis.
fn joint_speeds(p: &Array3<f32>, fps: f32, horizontal: bool) -> Array2<f32> {
    let (frames, joints, _) = p.dim();
    let mut out = Array2::zeros((frames, joints));
    if frames < 2 {
        return out;
    }
    for j in 0..joints {
        for f in 0..frames {
            let (a, b, dt) = if f == 0 {
                (0, 1, 1.0)
            } else if f == frames - 1 {
                (frames - 2, frames - 1, 1.0)
            } else {
                (f - 1, f + 1, 2.0)
            };
            let mut s2 = 0.0f32;
            for ax in 0..3 {
                if horizontal && ax == UP_AXIS {
                    continue;
                }
                let d = p[[b, j, ax]] - p[[a, j, ax]];
                s2 += d * d;
            }
            out[[f, j]] = s2.sqrt() * fps / dt;
        }
    }
    out
}

/// Heuristic vertical ground reaction force proxy, frames x foot_joints,
/// normalized so a both-feet flat stance sums to 1 across foot joints.
pub fn vgrf_proxy(
    p: &JointPositions,
    skeleton: &Skeleton,
    config: &ContactConfig,
) -> Result<Array2<f32>> {
    config.validate()?;
    check_positions(p, skeleton)?;
    let speeds = joint_speeds(&p.positions, p.fps, false);
    let nf = skeleton.foot_joints.len();
    let mut out = Array2::zeros((p.frames(), nf));
    for (k, &j) in skeleton.foot_joints.iter().enumerate() {
        let clear = skeleton.foot_clearance(j);
        for f in 0..p.frames() {
            let h = (p.positions[[f, j, UP_AXIS]] - clear).max(0.0);
            let hterm = (1.0 - h / config.height_thresh).max(0.0);
            let sterm = (1.0 - speeds[[f, j]] / config.speed_thresh).max(0.0);
            out[[f, k]] = hterm * sterm / nf as f32;
        }
    }
    Ok(out)
}

/// Contact runs (half-open ranges) in a boolean timeline.
fn runs(col: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (f, &c) in col.iter().enumerate() {
        match (c, start) {
            (true, None) => start = Some(f),
            (false, Some(s)) => {
                out.push((s, f));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, col.len()));
    }
    out
}

/// Close gaps shorter than 2 frames, then drop contact islands shorter
/// than `min_run`.
fn clean_timeline(col: &mut [bool], min_run: usize) {
    for f in 1..col.len().saturating_sub(1) {
        if !col[f] && col[f - 1] && col[f + 1] {
            col[f] = true;
        }
    }
    for (s, e) in runs(&col.to_vec()) {
        if e - s < min_run {
            for v in col[s..e].iter_mut() {
                *v = false;
            }
        }
    }
}

/// Per-foot-joint contact timeline, frames x foot_joints, morphologically
/// cleaned.
pub fn detect_contacts(
    p: &JointPositions,
    skeleton: &Skeleton,
    config: &ContactConfig,
) -> Result<Array2<bool>> {
    config.validate()?;
    check_positions(p, skeleton)?;
    let speeds = joint_speeds(&p.positions, p.fps, false);
    let frames = p.frames();
    let nf = skeleton.foot_joints.len();
    let mut out = Array2::from_elem((frames, nf), false);
    for (k, &j) in skeleton.foot_joints.iter().enumerate() {
        let clear = skeleton.foot_clearance(j);
        let mut col: Vec<bool> = (0..frames)
            .map(|f| {
                let h = p.positions[[f, j, UP_AXIS]] - clear;
                h < config.height_thresh && speeds[[f, j]] < config.speed_thresh
            })
            .collect();
        clean_timeline(&mut col, config.min_segment_frames);
        for f in 0..frames {
            out[[f, k]] = col[f];
        }
    }
    Ok(out)
}

/// Skating segments: contact runs whose mean horizontal drift speed exceeds
/// the skating threshold. The anchor is the joint's horizontal position at
/// the run's midpoint frame, vertically at its rest contact height.
pub fn extract_skating_segments(
    contacts: &Array2<bool>,
    p: &JointPositions,
    skeleton: &Skeleton,
    config: &ContactConfig,
) -> Result<Vec<ContactSegment>> {
    config.validate()?;
    check_positions(p, skeleton)?;
    let (frames, nf) = contacts.dim();
    if frames != p.frames() || nf != skeleton.foot_joints.len() {
        return Err(Error::Shape("contacts shape disagrees with positions".into()));
    }
    let mut out = Vec::new();
    for (k, &j) in skeleton.foot_joints.iter().enumerate() {
        let col: Vec<bool> = (0..frames).map(|f| contacts[[f, k]]).collect();
        for (s, e) in runs(&col) {
            if e - s < config.min_segment_frames.max(2) {
                continue;
            }
            let mut path = 0.0f32;
            for f in s..e - 1 {
                let mut d2 = 0.0f32;
                for ax in 0..3 {
                    if ax == UP_AXIS {
                        continue;
                    }
                    let d = p.positions[[f + 1, j, ax]] - p.positions[[f, j, ax]];
                    d2 += d * d;
                }
                path += d2.sqrt();
            }
            let mean_speed = path * p.fps / (e - s - 1) as f32;
            if mean_speed > config.skate_speed_thresh {
                let mid = s + (e - s) / 2;
                let mut anchor = [0.0f32; 3];
                for ax in 0..3 {
                    anchor[ax] = p.positions[[mid, j, ax]];
                }
                anchor[UP_AXIS] = skeleton.foot_clearance(j);
                out.push(ContactSegment { joint: j, start: s, end: e, anchor });
            }
        }
    }
    Ok(out)
}

/// Fraction of contact frames whose horizontal foot speed exceeds the
/// skating threshold, over all foot joints. 0 when nothing is in contact.
pub fn skate_ratio(
    p: &JointPositions,
    skeleton: &Skeleton,
    config: &ContactConfig,
) -> Result<f64> {
    let contacts = detect_contacts(p, skeleton, config)?;
    let hspeeds = joint_speeds(&p.positions, p.fps, true);
    let mut contact_n = 0usize;
    let mut skate_n = 0usize;
    for (k, &j) in skeleton.foot_joints.iter().enumerate() {
        for f in 0..p.frames() {
            if contacts[[f, k]] {
                contact_n += 1;
                if hspeeds[[f, j]] > config.skate_speed_thresh {
                    skate_n += 1;
                }
            }
        }
    }
    if contact_n == 0 {
        return Ok(0.0);
    }
    Ok(skate_n as f64 / contact_n as f64)
}

/// Eq. 4 in squared form: sum of squared distances from each segment joint
/// to its anchor over the segment frames.
pub fn foot_loss(p: &JointPositions, segments: &[ContactSegment]) -> f64 {
    let mut total = 0.0f64;
    for seg in segments {
        for f in seg.start..seg.end {
            for ax in 0..3 {
                let d = p.positions[[f, seg.joint, ax]] as f64 - seg.anchor[ax] as f64;
                total += d * d;
            }
        }
    }
    total
}

/// Frames covered by any skating segment.
fn skating_frame_mask(segments: &[ContactSegment], frames: usize) -> Vec<bool> {
    let mut m = vec![false; frames];
    for seg in segments {
        for v in m[seg.start..seg.end.min(frames)].iter_mut() {
            *v = true;
        }
    }
    m
}

/// (L_pose, L_trajectory, L_vGRFs) between a candidate and the original.
///
/// L_pose: mean squared difference of root-relative non-foot joint
/// positions. L_trajectory: mean squared difference of the root's two
/// horizontal coordinates. L_vGRFs: mean squared difference of proxy forces
/// on frames not covered by any skating segment.
pub fn auxiliary_losses(
    original: &JointPositions,
    candidate: &JointPositions,
    skeleton: &Skeleton,
    config: &ContactConfig,
    segments: &[ContactSegment],
) -> Result<(f64, f64, f64)> {
    check_positions(original, skeleton)?;
    if original.positions.dim() != candidate.positions.dim() {
        return Err(Error::Shape("original and candidate shapes disagree".into()));
    }
    let (frames, joints, _) = original.positions.dim();
    let non_foot: Vec<usize> =
        (0..joints).filter(|j| !skeleton.foot_joints.contains(j)).collect();

    let mut pose = 0.0f64;
    for f in 0..frames {
        for &j in &non_foot {
            for ax in 0..3 {
                let o = original.positions[[f, j, ax]] - original.positions[[f, 0, ax]];
                let c = candidate.positions[[f, j, ax]] - candidate.positions[[f, 0, ax]];
                pose += (c as f64 - o as f64).powi(2);
            }
        }
    }
    pose /= (frames * non_foot.len() * 3) as f64;

    let mut traj = 0.0f64;
    for f in 0..frames {
        for ax in 0..3 {
            if ax == UP_AXIS {
                continue;
            }
            let d = candidate.positions[[f, 0, ax]] as f64 - original.positions[[f, 0, ax]] as f64;
            traj += d * d;
        }
    }
    traj /= (frames * 2) as f64;

    let fo = vgrf_proxy(original, skeleton, config)?;
    let fc = vgrf_proxy(candidate, skeleton, config)?;
    let skating = skating_frame_mask(segments, frames);
    let nf = skeleton.foot_joints.len();
    let mut vgrf = 0.0f64;
    let mut count = 0usize;
    for f in 0..frames {
        if skating[f] {
            continue;
        }
        count += 1;
        for k in 0..nf {
            vgrf += (fc[[f, k]] as f64 - fo[[f, k]] as f64).powi(2);
        }
    }
    if count > 0 {
        vgrf /= (count * nf) as f64;
    }
    Ok((pose, traj, vgrf))
}

/// Differentiable loss context over feature-space parameters at f64.
struct OptContext {
    kind: RepKind,
    frames: usize,
    joints: usize,
    fps: f64,
    device: Device,
    parents: Vec<i32>,
    /// Per-joint offset as a (1, 3, 1) column, f64.
    offsets: Vec<Tensor>,
    foot_joints: Vec<usize>,
    clearances: Vec<f64>,
    non_foot_idx: Tensor,
    weights: [f64; 4],
    cfg: ContactConfig,
    segments: Vec<ContactSegment>,
    orig_rel: Tensor,
    orig_traj: Tensor,
    orig_force: Tensor,
    /// (frames, 1) 1.0 on non-skating frames.
    nonskate_mask: Tensor,
    nonskate_count: usize,
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

fn cross3(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ax, ay, az) = (a.narrow(1, 0, 1)?, a.narrow(1, 1, 1)?, a.narrow(1, 2, 1)?);
    let (bx, by, bz) = (b.narrow(1, 0, 1)?, b.narrow(1, 1, 1)?, b.narrow(1, 2, 1)?);
    let cx = ((&ay * &bz)? - (&az * &by)?)?;
    let cy = ((&az * &bx)? - (&ax * &bz)?)?;
    let cz = ((&ax * &by)? - (&ay * &bx)?)?;
    Ok(Tensor::cat(&[cx, cy, cz], 1)?)
}

impl OptContext {
    fn new(
        spec: &RepresentationSpec,
        skeleton: &Skeleton,
        positions0: &JointPositions,
        segments: &[ContactSegment],
        cleanup: &CleanupConfig,
        contact: &ContactConfig,
        device: &Device,
    ) -> Result<Self> {
        let frames = positions0.frames();
        let joints = skeleton.joint_count();
        let non_foot: Vec<u32> = (0..joints as u32)
            .filter(|j| !skeleton.foot_joints.contains(&(*j as usize)))
            .collect();
        let non_foot_count = non_foot.len();
        let non_foot_idx = Tensor::from_vec(non_foot, (non_foot_count,), device)?;
        let offsets = skeleton
            .offsets
            .iter()
            .map(|o| {
                Tensor::from_vec(
                    o.iter().map(|&v| v as f64).collect::<Vec<f64>>(),
                    (1, 3, 1),
                    device,
                )
                .map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        let clearances = skeleton
            .foot_joints
            .iter()
            .map(|&j| skeleton.foot_clearance(j) as f64)
            .collect();

        let mut ctx = OptContext {
            kind: spec.kind,
            frames,
            joints,
            fps: positions0.fps as f64,
            device: device.clone(),
            parents: skeleton.parents.clone(),
            offsets,
            foot_joints: skeleton.foot_joints.clone(),
            clearances,
            non_foot_idx,
            weights: [cleanup.w_pose, cleanup.w_foot, cleanup.w_traj, cleanup.w_vgrf],
            cfg: contact.clone(),
            segments: segments.to_vec(),
            orig_rel: Tensor::zeros(1, DType::F64, device)?,
            orig_traj: Tensor::zeros(1, DType::F64, device)?,
            orig_force: Tensor::zeros(1, DType::F64, device)?,
            nonskate_mask: Tensor::zeros(1, DType::F64, device)?,
            nonskate_count: 0,
        };

        let host: Vec<f64> = positions0.positions.iter().map(|&v| v as f64).collect();
        let pos0 = Tensor::from_vec(host, (frames, joints, 3), device)?;
        let root0 = pos0.narrow(1, 0, 1)?;
        ctx.orig_rel = pos0
            .broadcast_sub(&root0)?
            .contiguous()?
            .index_select(&ctx.non_foot_idx, 1)?;
        ctx.orig_traj = ctx.horizontal_root(&pos0)?;
        ctx.orig_force = ctx.forces(&pos0)?;

        let skating = skating_frame_mask(segments, frames);
        ctx.nonskate_count = skating.iter().filter(|&&s| !s).count();
        let mask: Vec<f64> = skating.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect();
        ctx.nonskate_mask = Tensor::from_vec(mask, (frames, 1), device)?;
        Ok(ctx)
    }

    /// Feature-space parameters -> world positions (frames, joints, 3).
    fn positions(&self, params: &Tensor) -> Result<Tensor> {
        match self.kind {
            RepKind::Positions => Ok(params.reshape((self.frames, self.joints, 3))?),
            RepKind::RootRotations => {
                let root = params.narrow(1, 0, 3)?;
                let rot6d = params
                    .narrow(1, 3, self.joints * 6)?
                    .reshape((self.frames, self.joints, 6))?;
                let mats = self.rot6d_mats(&rot6d)?;
                self.fk(&root, &mats)
            }
        }
    }

    fn rot6d_mats(&self, r: &Tensor) -> Result<Tensor> {
        let (f, j, _) = r.dims3()?;
        let r = r.reshape((f * j, 6))?;
        let a1 = r.narrow(1, 0, 3)?;
        let a2 = r.narrow(1, 3, 3)?;
        let b1 = l2_normalize(&a1)?;
        let dot = (&b1 * &a2)?.sum_keepdim(1)?;
        let b2 = l2_normalize(&(a2 - b1.broadcast_mul(&dot)?)?)?;
        let b3 = cross3(&b1, &b2)?;
        // stacked along dim 2: columns of the rotation matrix
        Ok(Tensor::stack(&[b1, b2, b3], 2)?.reshape((f, j, 3, 3))?)
    }

    fn fk(&self, root: &Tensor, rots: &Tensor) -> Result<Tensor> {
        let mut world_rot: Vec<Tensor> = Vec::with_capacity(self.joints);
        let mut pos: Vec<Tensor> = Vec::with_capacity(self.joints);
        for j in 0..self.joints {
            let local = rots.narrow(1, j, 1)?.squeeze(1)?;
            if j == 0 {
                world_rot.push(local);
                pos.push(root.clone());
            } else {
                let p = self.parents[j] as usize;
                let woff = world_rot[p].broadcast_matmul(&self.offsets[j])?.squeeze(2)?;
                pos.push((&pos[p] + woff)?);
                world_rot.push(world_rot[p].matmul(&local)?);
            }
        }
        Ok(Tensor::stack(&pos, 1)?)
    }

    fn horizontal_root(&self, pos3: &Tensor) -> Result<Tensor> {
        let root = pos3.narrow(1, 0, 1)?.squeeze(1)?.contiguous()?;
        let axes: Vec<u32> = (0..3u32).filter(|&a| a as usize != UP_AXIS).collect();
        let idx = Tensor::from_vec(axes, (2,), &self.device)?;
        Ok(root.index_select(&idx, 1)?)
    }

    /// Differentiable vGRF proxy, (frames, n_foot).
    fn forces(&self, pos3: &Tensor) -> Result<Tensor> {
        let mut cols = Vec::with_capacity(self.foot_joints.len());
        let nf = self.foot_joints.len() as f64;
        for (k, &j) in self.foot_joints.iter().enumerate() {
            let pj = pos3.narrow(1, j, 1)?.squeeze(1)?; // (F, 3)
            let y = pj.narrow(1, UP_AXIS, 1)?;
            let h = (y - self.clearances[k])?.relu()?;
            let hterm = h.affine(-1.0 / self.cfg.height_thresh as f64, 1.0)?.relu()?;
            let speed = self.speeds(&pj)?;
            let sterm = speed.affine(-1.0 / self.cfg.speed_thresh as f64, 1.0)?.relu()?;
            cols.push((hterm * sterm)?.affine(1.0 / nf, 0.0)?);
        }
        Ok(Tensor::cat(&cols, 1)?)
    }

    /// Central-difference speed magnitude per frame, (frames, 1).
    fn speeds(&self, pj: &Tensor) -> Result<Tensor> {
        let f = self.frames;
        if f < 2 {
            return Ok(Tensor::zeros((f, 1), DType::F64, &self.device)?);
        }
        let first = ((pj.narrow(0, 1, 1)? - pj.narrow(0, 0, 1)?)?).affine(self.fps, 0.0)?;
        let last =
            ((pj.narrow(0, f - 1, 1)? - pj.narrow(0, f - 2, 1)?)?).affine(self.fps, 0.0)?;
        let v = if f == 2 {
            Tensor::cat(&[first, last], 0)?
        } else {
            let mid = ((pj.narrow(0, 2, f - 2)? - pj.narrow(0, 0, f - 2)?)?)
                .affine(self.fps / 2.0, 0.0)?;
            Tensor::cat(&[first, mid, last], 0)?
        };
        Ok((v.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?)
    }

    fn combined_loss(&self, params: &Tensor) -> Result<Tensor> {
        let pos3 = self.positions(params)?;
        let mut loss = Tensor::zeros((), DType::F64, &self.device)?;

        if self.weights[1] > 0.0 {
            for seg in &self.segments {
                let len = seg.end - seg.start;
                let p = pos3.narrow(0, seg.start, len)?.narrow(1, seg.joint, 1)?;
                let anchor = Tensor::from_vec(
                    seg.anchor.iter().map(|&v| v as f64).collect::<Vec<f64>>(),
                    (1, 1, 3),
                    &self.device,
                )?;
                let term = p.broadcast_sub(&anchor)?.sqr()?.sum_all()?;
                loss = (loss + term.affine(self.weights[1], 0.0)?)?;
            }
        }
        if self.weights[0] > 0.0 {
            let root = pos3.narrow(1, 0, 1)?;
            let rel = pos3
                .broadcast_sub(&root)?
                .contiguous()?
                .index_select(&self.non_foot_idx, 1)?;
            let term = (rel - &self.orig_rel)?.sqr()?.mean_all()?;
            loss = (loss + term.affine(self.weights[0], 0.0)?)?;
        }
        if self.weights[2] > 0.0 {
            let traj = self.horizontal_root(&pos3)?;
            let term = (traj - &self.orig_traj)?.sqr()?.mean_all()?;
            loss = (loss + term.affine(self.weights[2], 0.0)?)?;
        }
        if self.weights[3] > 0.0 && self.nonskate_count > 0 {
            let f = self.forces(&pos3)?;
            let diff = (f - &self.orig_force)?.broadcast_mul(&self.nonskate_mask)?;
            let denom = (self.nonskate_count * self.foot_joints.len()) as f64;
            let term = diff.sqr()?.sum_all()?.affine(1.0 / denom, 0.0)?;
            loss = (loss + term.affine(self.weights[3], 0.0)?)?;
        }
        Ok(loss)
    }
}

/// Combined cleanup objective for a flat f64 feature matrix (frames x M).
/// Exposed so the analytic gradients can be checked numerically.
pub fn combined_loss_value(
    flat: &[f64],
    frames: usize,
    spec: &RepresentationSpec,
    skeleton: &Skeleton,
    cleanup: &CleanupConfig,
    contact: &ContactConfig,
    segments: &[ContactSegment],
    positions0: &JointPositions,
) -> Result<f64> {
    let device = Device::Cpu;
    let ctx = OptContext::new(spec, skeleton, positions0, segments, cleanup, contact, &device)?;
    let params = Tensor::from_vec(flat.to_vec(), (frames, spec.feature_dim()), &device)?;
    Ok(ctx.combined_loss(&params)?.to_scalar::<f64>()?)
}

/// Gradient of [`combined_loss_value`] with respect to the flat features.
pub fn combined_loss_gradient(
    flat: &[f64],
    frames: usize,
    spec: &RepresentationSpec,
    skeleton: &Skeleton,
    cleanup: &CleanupConfig,
    contact: &ContactConfig,
    segments: &[ContactSegment],
    positions0: &JointPositions,
) -> Result<Vec<f64>> {
    let device = Device::Cpu;
    let ctx = OptContext::new(spec, skeleton, positions0, segments, cleanup, contact, &device)?;
    let params = Tensor::from_vec(flat.to_vec(), (frames, spec.feature_dim()), &device)?;
    let var = Var::from_tensor(&params)?;
    let loss = ctx.combined_loss(var.as_tensor())?;
    let grads = loss.backward()?;
    let g = grads
        .get(&var)
        .ok_or_else(|| Error::Config("loss does not depend on parameters".into()))?;
    Ok(g.flatten_all()?.to_vec1::<f64>()?)
}

/// Plain gradient descent with best-iterate tracking and divergence guard.
fn optimize(
    ctx: &OptContext,
    init: &Tensor,
    config: &CleanupConfig,
) -> Result<(Tensor, Vec<f64>, bool)> {
    let var = Var::from_tensor(init)?;
    let mut curve = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best = init.copy()?;
    let mut prev = f64::INFINITY;
    let mut increases = 0usize;
    let mut diverged = false;
    for _ in 0..config.iterations {
        let loss = ctx.combined_loss(var.as_tensor())?;
        let lv = loss.to_scalar::<f64>()?;
        if !lv.is_finite() {
            diverged = true;
            break;
        }
        curve.push(lv);
        if lv < best_loss {
            best_loss = lv;
            best = var.as_tensor().copy()?;
        }
        if lv > prev {
            increases += 1;
            if increases >= 10 {
                diverged = true;
                break;
            }
        } else {
            increases = 0;
            if prev.is_finite() && prev - lv < config.tolerance {
                break;
            }
        }
        prev = lv;
        let grads = loss.backward()?;
        let g = grads
            .get(&var)
            .ok_or_else(|| Error::Config("loss does not depend on parameters".into()))?;
        var.set(&(var.as_tensor() - g.affine(config.step_size, 0.0)?)?)?;
    }
    Ok((best, curve, diverged))
}

/// Cleanup on a raw feature matrix (valid frames only). Returns corrected
/// features plus the report.
pub fn cleanup_features(
    feats: &Array2<f32>,
    spec: &RepresentationSpec,
    skeleton: &Skeleton,
    fps: f32,
    config: &CleanupConfig,
    contact: &ContactConfig,
) -> Result<(Array2<f32>, CleanupReport)> {
    config.validate()?;
    contact.validate()?;
    let positions0 = crate::codec::decode_feature_frames(feats, spec, skeleton, fps)?;
    let contacts = detect_contacts(&positions0, skeleton, contact)?;
    let segments = extract_skating_segments(&contacts, &positions0, skeleton, contact)?;
    let before = skate_ratio(&positions0, skeleton, contact)?;
    if segments.is_empty() || config.iterations == 0 {
        return Ok((
            feats.clone(),
            CleanupReport {
                segments,
                loss_curve: Vec::new(),
                skate_ratio_before: before,
                skate_ratio_after: before,
                max_pose_deviation_m: 0.0,
                diverged: false,
            },
        ));
    }

    let device = Device::Cpu;
    let ctx = OptContext::new(spec, skeleton, &positions0, &segments, config, contact, &device)?;
    let (frames, m) = feats.dim();
    let init = Tensor::from_vec(
        feats.iter().map(|&v| v as f64).collect::<Vec<f64>>(),
        (frames, m),
        &device,
    )?;
    let (best, loss_curve, diverged) = optimize(&ctx, &init, config)?;

    let host = best.to_vec2::<f64>()?;
    let mut out = Array2::zeros((frames, m));
    for f in 0..frames {
        for k in 0..m {
            out[[f, k]] = host[f][k] as f32;
        }
    }
    let positions1 = crate::codec::decode_feature_frames(&out, spec, skeleton, fps)?;
    let after = skate_ratio(&positions1, skeleton, contact)?;
    let mut max_dev = 0.0f64;
    for f in 0..frames {
        for j in 0..skeleton.joint_count() {
            let mut d2 = 0.0f64;
            for ax in 0..3 {
                let d = positions1.positions[[f, j, ax]] as f64
                    - positions0.positions[[f, j, ax]] as f64;
                d2 += d * d;
            }
            max_dev = max_dev.max(d2.sqrt());
        }
    }
    Ok((
        out,
        CleanupReport {
            segments,
            loss_curve,
            skate_ratio_before: before,
            skate_ratio_after: after,
            max_pose_deviation_m: max_dev,
            diverged,
        },
    ))
}

/// Standalone cleanup of a motion sequence. Only the valid prefix is
/// touched; padding, mask and label are preserved.
pub fn cleanup(
    motion: &MotionSequence,
    spec: &RepresentationSpec,
    skeleton: &Skeleton,
    config: &CleanupConfig,
    contact: &ContactConfig,
) -> Result<(MotionSequence, CleanupReport)> {
    motion.validate()?;
    let feats = motion.valid_features();
    let (fixed, report) = cleanup_features(&feats, spec, skeleton, motion.fps, config, contact)?;
    let mut out = motion.clone();
    for f in 0..fixed.shape()[0] {
        for k in 0..fixed.shape()[1] {
            out.features[[f, k]] = fixed[[f, k]];
        }
    }
    Ok((out, report))
}

/// Everything the in-loop hook needs to decode, clean and re-encode an x0
/// prediction living in the model's normalized feature space.
#[derive(Clone)]
pub struct InLoopParams {
    pub spec: RepresentationSpec,
    pub skeleton: Skeleton,
    pub norm: NormStats,
    pub fps: f32,
    /// Number of trailing sampler steps to clean; 0 disables the hook.
    pub tail_steps: usize,
    pub every_k: usize,
    pub cleanup: CleanupConfig,
    pub contact: ContactConfig,
}

impl InLoopParams {
    /// Defaults per the module configuration: last 30% of steps, every
    /// step, 20 cleanup iterations.
    pub fn with_defaults(
        spec: RepresentationSpec,
        skeleton: Skeleton,
        norm: NormStats,
        fps: f32,
        total_steps: usize,
    ) -> Self {
        InLoopParams {
            spec,
            skeleton,
            norm,
            fps,
            tail_steps: (total_steps as f64 * 0.3).ceil() as usize,
            every_k: 1,
            cleanup: CleanupConfig { iterations: 20, ..Default::default() },
            contact: ContactConfig::default(),
        }
    }
}

fn clean_x0(x: &Tensor, p: &InLoopParams) -> Result<Tensor> {
    let (b, t, m) = x.dims3()?;
    let host = x.to_dtype(DType::F32)?.to_vec3::<f32>()?;
    let mut flat = Vec::with_capacity(b * t * m);
    for batch in host.iter().take(b) {
        let mut feats = Array2::zeros((t, m));
        for (f, row) in batch.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                feats[[f, k]] = v;
            }
        }
        p.norm.denormalize_frames(&mut feats);
        let (mut fixed, _report) =
            cleanup_features(&feats, &p.spec, &p.skeleton, p.fps, &p.cleanup, &p.contact)?;
        p.norm.normalize_frames(&mut fixed);
        flat.extend(fixed.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (b, t, m), x.device())?.to_dtype(x.dtype())?)
}

/// Sampler hook cleaning x0 predictions on the trailing steps. A failing
/// decode/encode falls back to the uncorrected prediction with a warning on
/// stderr. With `tail_steps` 0 or a zero iteration budget the hook returns
/// its input untouched, bit for bit.
pub fn in_loop_cleanup(
    params: InLoopParams,
) -> Box<dyn FnMut(Tensor, usize, usize) -> Result<Tensor>> {
    Box::new(move |x, step_idx, total_steps| {
        if params.tail_steps == 0 || params.cleanup.iterations == 0 {
            return Ok(x);
        }
        let window_start = total_steps.saturating_sub(params.tail_steps);
        if step_idx < window_start {
            return Ok(x);
        }
        let from_end = total_steps - 1 - step_idx;
        if params.every_k > 1 && from_end % params.every_k != 0 {
            return Ok(x);
        }
        match clean_x0(&x, &params) {
            Ok(t) => Ok(t),
            Err(e) => {
                eprintln!("warning: in-loop cleanup failed ({e}); keeping raw prediction");
                Ok(x)
            }
        }
    })
}
