//! Motion sequences, pose-representation specs and the `.mot` file format.
//!
//! A `.mot` file is a single UTF-8 JSON header line terminated by `\n`,
//! followed by a raw little-endian IEEE-754 float32 blob of
//! frames x feature_dim values (frame-major), followed by `frames` bytes of
//! 0/1 mask.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepKind {
    /// Flattened world joint positions, M = 3*J.
    Positions,
    /// Root position plus per-joint 6D rotations, M = 3 + 6*J.
    RootRotations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentationSpec {
    pub kind: RepKind,
    pub joint_count: usize,
}

impl RepresentationSpec {
    pub fn positions(joint_count: usize) -> Self {
        RepresentationSpec { kind: RepKind::Positions, joint_count }
    }

    pub fn root_rotations(joint_count: usize) -> Self {
        RepresentationSpec { kind: RepKind::RootRotations, joint_count }
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            RepKind::Positions => 3 * self.joint_count,
            RepKind::RootRotations => 3 + 6 * self.joint_count,
        }
    }
}

/// A fixed-fps feature matrix (frames x features) with a validity mask and
/// an optional condition label (token sequence).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: f32,
    /// frames x feature_dim.
    pub features: Array2<f32>,
    /// Per-frame validity; must be a contiguous prefix of `true`.
    pub mask: Vec<bool>,
    pub label: Option<Vec<String>>,
}

impl MotionSequence {
    pub fn new(
        fps: f32,
        features: Array2<f32>,
        mask: Vec<bool>,
        label: Option<Vec<String>>,
    ) -> Result<Self> {
        let m = MotionSequence { fps, features, mask, label };
        m.validate()?;
        Ok(m)
    }

    /// All frames valid, no label.
    pub fn unmasked(fps: f32, features: Array2<f32>) -> Result<Self> {
        let f = features.shape()[0];
        Self::new(fps, features, vec![true; f], None)
    }

    pub fn validate(&self) -> Result<()> {
        let frames = self.features.shape()[0];
        if frames == 0 {
            return Err(Error::Shape("motion needs at least 1 frame".into()));
        }
        if self.mask.len() != frames {
            return Err(Error::Shape("mask length != frame count".into()));
        }
        let valid = self.valid_len();
        if valid == 0 {
            return Err(Error::Shape("mask has no valid frames".into()));
        }
        if self.mask[..valid].iter().any(|&m| !m) || self.mask[valid..].iter().any(|&m| m) {
            return Err(Error::Shape("mask must be a contiguous prefix of true".into()));
        }
        for f in 0..valid {
            for v in self.features.row(f) {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("feature in frame {f}")));
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Number of leading valid frames.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    /// Copy restricted to valid frames.
    pub fn valid_features(&self) -> Array2<f32> {
        let v = self.valid_len();
        self.features.slice(ndarray::s![..v, ..]).to_owned()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MotHeader {
    version: u32,
    fps: f32,
    frames: usize,
    feature_dim: usize,
    spec_kind: Option<RepKind>,
    joint_count: Option<usize>,
    label_tokens: Option<Vec<String>>,
}

pub fn save_motion(motion: &MotionSequence, path: &Path) -> Result<()> {
    save_motion_with_spec(motion, None, path)
}

/// Save with the representation recorded in the header so files are
/// decodable without out-of-band context.
pub fn save_motion_with_spec(
    motion: &MotionSequence,
    spec: Option<&RepresentationSpec>,
    path: &Path,
) -> Result<()> {
    motion.validate()?;
    let header = MotHeader {
        version: 1,
        fps: motion.fps,
        frames: motion.frames(),
        feature_dim: motion.feature_dim(),
        spec_kind: spec.map(|s| s.kind),
        joint_count: spec.map(|s| s.joint_count),
        label_tokens: motion.label.clone(),
    };
    let mut file = std::fs::File::create(path)?;
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    for v in motion.features.iter() {
        file.write_f32::<LittleEndian>(*v)?;
    }
    for &m in &motion.mask {
        file.write_all(&[m as u8])?;
    }
    Ok(())
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    Ok(load_motion_with_spec(path)?.0)
}

pub fn load_motion_with_spec(
    path: &Path,
) -> Result<(MotionSequence, Option<RepresentationSpec>)> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: MotHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.version != 1 {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    let blob = &bytes[nl + 1..];
    let expected = header.frames * header.feature_dim * 4 + header.frames;
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "blob length {} != expected {} bytes ({} frames x {} features x 4 + {} mask)",
            blob.len(),
            expected,
            header.frames,
            header.feature_dim,
            header.frames
        )));
    }
    let mut cursor = std::io::Cursor::new(&blob[..header.frames * header.feature_dim * 4]);
    let mut features = Array2::zeros((header.frames, header.feature_dim));
    for f in 0..header.frames {
        for m in 0..header.feature_dim {
            features[[f, m]] = cursor.read_f32::<LittleEndian>()?;
        }
    }
    let mask_bytes = &blob[header.frames * header.feature_dim * 4..];
    let mask: Vec<bool> = mask_bytes.iter().map(|&b| b != 0).collect();
    let motion = MotionSequence::new(header.fps, features, mask, header.label_tokens)?;
    let spec = match (header.spec_kind, header.joint_count) {
        (Some(kind), Some(joint_count)) => {
            let s = RepresentationSpec { kind, joint_count };
            if s.feature_dim() != header.feature_dim {
                return Err(Error::Format(format!(
                    "feature_dim {} inconsistent with spec kind (expected {})",
                    header.feature_dim,
                    s.feature_dim()
                )));
            }
            Some(s)
        }
        _ => None,
    };
    Ok((motion, spec))
}

/// Zero-pad a batch of motions to `target_len` frames.
///
/// Returns (B x target_len x M) features and B x target_len masks.
pub fn pad_and_mask(
    batch: &[MotionSequence],
    target_len: usize,
) -> Result<(Array3<f32>, Array2<bool>)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let m = batch[0].feature_dim();
    let mut features = Array3::zeros((batch.len(), target_len, m));
    let mut masks = Array2::from_elem((batch.len(), target_len), false);
    for (b, motion) in batch.iter().enumerate() {
        if motion.feature_dim() != m {
            return Err(Error::Shape("inconsistent feature dims in batch".into()));
        }
        let valid = motion.valid_len();
        if valid > target_len {
            return Err(Error::Shape(format!(
                "motion {b} has {valid} valid frames > target_len {target_len}"
            )));
        }
        for f in 0..valid {
            for k in 0..m {
                features[[b, f, k]] = motion.features[[f, k]];
            }
            masks[[b, f]] = true;
        }
    }
    Ok((features, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_motion(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> MotionSequence {
        let features = Array::from_shape_fn((frames, dim), |_| rng.gen::<f32>() - 0.5);
        MotionSequence::new(
            20.0,
            features,
            vec![true; frames],
            Some(vec!["a".into(), "person".into(), "walks".into()]),
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mot");
        let mut motion = random_motion(&mut rng, 17, 9);
        motion.mask[12..].iter_mut().for_each(|m| *m = false);
        save_motion(&motion, &path).unwrap();
        let loaded = load_motion(&path).unwrap();
        assert_eq!(motion, loaded);
    }

    #[test]
    fn truncated_blob_reports_byte_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mot");
        let motion = random_motion(&mut rng, 8, 4);
        save_motion(&motion, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_motion(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("expected"), "{msg}");
        assert!(msg.contains("136"), "should state expected byte count: {msg}");
    }

    #[test]
    fn header_fields_echo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mot");
        let motion = MotionSequence::unmasked(
            20.0,
            Array::from_shape_fn((40, 66), |_| rng.gen::<f32>()),
        )
        .unwrap();
        save_motion(&motion, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["version"], 1);
        assert_eq!(header["fps"], 20.0);
        assert_eq!(header["frames"], 40);
        assert_eq!(header["feature_dim"], 66);
        assert_eq!(bytes.len(), nl + 1 + 40 * 66 * 4 + 40);
    }

    #[test]
    fn mask_must_be_prefix() {
        let features = Array2::zeros((4, 2));
        assert!(MotionSequence::new(20.0, features, vec![true, false, true, false], None)
            .is_err());
    }

    #[test]
    fn pad_and_mask_basic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let short = random_motion(&mut rng, 10, 3);
        let long = random_motion(&mut rng, 40, 3);
        let (features, masks) = pad_and_mask(&[short.clone(), long], 40).unwrap();
        assert_eq!(features.shape(), [2, 40, 3]);
        assert_eq!(masks.row(0).iter().filter(|&&m| m).count(), 10);
        assert!(masks.row(1).iter().all(|&m| m));
        // padding zeros after valid frames
        assert_eq!(features[[0, 10, 0]], 0.0);
        // single motion of exactly target_len: all true
        let exact = random_motion(&mut rng, 16, 3);
        let (_, masks) = pad_and_mask(&[exact], 16).unwrap();
        assert!(masks.row(0).iter().all(|&m| m));
    }

    #[test]
    fn pad_rejects_long_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let long = random_motion(&mut rng, 50, 3);
        assert!(pad_and_mask(&[long], 40).is_err());
    }

    /// Masked batch statistics are independent of the padding amount.
    #[test]
    fn masked_stats_invariant_to_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<_> = (0..4).map(|_| random_motion(&mut rng, 20, 5)).collect();
        let masked_mean = |feats: &Array3<f32>, masks: &Array2<bool>| -> f64 {
            let mut sum = 0.0f64;
            let mut n = 0.0f64;
            for b in 0..feats.shape()[0] {
                for f in 0..feats.shape()[1] {
                    if masks[[b, f]] {
                        for k in 0..feats.shape()[2] {
                            sum += feats[[b, f, k]] as f64;
                            n += 1.0;
                        }
                    }
                }
            }
            sum / n
        };
        let (f1, m1) = pad_and_mask(&batch, 20).unwrap();
        let (f2, m2) = pad_and_mask(&batch, 64).unwrap();
        assert!((masked_mean(&f1, &m1) - masked_mean(&f2, &m2)).abs() < 1e-12);
    }

    #[test]
    fn rep_spec_dims() {
        assert_eq!(RepresentationSpec::positions(12).feature_dim(), 36);
        assert_eq!(RepresentationSpec::root_rotations(12).feature_dim(), 75);
    }
}
