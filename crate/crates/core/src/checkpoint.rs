//! Checkpoint directory format.
//!
//! A checkpoint is a directory holding config.json (model, representation,
//! skeleton, schedule, normalization, vocabulary), manifest.json (tensor
//! name, shape, byte offset), little-endian float32 blobs for raw and EMA
//! parameters plus optimizer moments, and train_state.json with the
//! iteration counters and the serialized rng stream so a resumed run
//! replays the unbroken run bit for bit.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::condition::Vocab;
use crate::denoiser::{CondUNet1D, DenoiserConfig};
use crate::error::{Error, Result};
use crate::motion::RepresentationSpec;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::skeleton::Skeleton;
use crate::tensor::ParamStore;
use crate::training::{AdamW, EmaState, NormStats, TrainConfig, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild the model and decode its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub denoiser: DenoiserConfig,
    pub representation: RepresentationSpec,
    pub skeleton: Skeleton,
    pub schedule: ScheduleParams,
    pub norm: NormStats,
    pub vocab_words: Vec<String>,
    pub fps: f32,
    pub target_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    iteration: usize,
    optimizer_step_count: usize,
    ema_update_count: usize,
    train_config: TrainConfig,
    rng: ChaCha8Rng,
}

fn write_blob(path: &Path, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<Vec<ManifestEntry>> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, shape, values) in entries {
        manifest.push(ManifestEntry { name: name.clone(), shape: shape.clone(), offset });
        for v in values {
            w.write_f32::<LittleEndian>(*v)?;
        }
        offset += (values.len() * 4) as u64;
    }
    w.flush()?;
    Ok(manifest)
}

fn read_blob(path: &Path, manifest: &[ManifestEntry]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let count: usize = entry.shape.iter().product();
        r.seek(SeekFrom::Start(entry.offset))?;
        let mut values = vec![0f32; count];
        r.read_f32_into::<LittleEndian>(&mut values)?;
        out.push((entry.name.clone(), entry.shape.clone(), values));
    }
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let mut s = String::new();
    File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_string(&mut s)?;
    Ok(serde_json::from_str(&s)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.flush()?;
    Ok(())
}

/// Save the full training state.
pub fn save(dir: &Path, meta: &CheckpointMeta, trainer: &Trainer) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), meta)?;
    let params = trainer.ps.snapshot()?;
    let manifest = write_blob(&dir.join("params.bin"), &params)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    let ema = trainer.ema.snapshot()?;
    if !ema.is_empty() {
        write_blob(&dir.join("ema.bin"), &ema)?;
    }
    let opt = trainer.optimizer.snapshot()?;
    if !opt.is_empty() {
        let m: Vec<_> = opt.iter().map(|(n, s, m, _)| (n.clone(), s.clone(), m.clone())).collect();
        let v: Vec<_> = opt.iter().map(|(n, s, _, v)| (n.clone(), s.clone(), v.clone())).collect();
        write_blob(&dir.join("opt_m.bin"), &m)?;
        write_blob(&dir.join("opt_v.bin"), &v)?;
    }
    let state = TrainState {
        iteration: trainer.iteration,
        optimizer_step_count: trainer.optimizer.step_count,
        ema_update_count: trainer.ema.update_count,
        train_config: trainer.config.clone(),
        rng: trainer.rng.clone(),
    };
    write_json(&dir.join("train_state.json"), &state)?;
    Ok(())
}

fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = read_json(&dir.join("config.json"))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    Ok(meta)
}

fn build_model(meta: &CheckpointMeta, device: &Device) -> Result<(CondUNet1D, ParamStore, Vocab)> {
    let vocab = Vocab::from_words(meta.vocab_words.clone());
    let mut ps = ParamStore::new(device.clone());
    // throwaway stream: every value is overwritten from the blob
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = CondUNet1D::new(&mut ps, &mut rng, &meta.denoiser, meta.representation.feature_dim())?;
    Ok((model, ps, vocab))
}

fn apply_params(ps: &ParamStore, entries: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<()> {
    let mut seen = 0usize;
    for (name, shape, values) in entries {
        let t = Tensor::from_vec(values, shape, &ps.device)?;
        ps.set(&name, &t)?;
        seen += 1;
    }
    if seen != ps.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} tensors, model needs {}",
            ps.len()
        )));
    }
    Ok(())
}

/// Which parameter set to load for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Raw,
    Ema,
}

pub struct LoadedModel {
    pub meta: CheckpointMeta,
    pub model: CondUNet1D,
    pub ps: ParamStore,
    pub vocab: Vocab,
    pub schedule: NoiseSchedule,
}

/// Load a model for inference, selecting raw or bias-corrected EMA weights.
pub fn load_model(dir: &Path, weights: WeightKind, device: &Device) -> Result<LoadedModel> {
    let meta = load_meta(dir)?;
    let manifest: Vec<ManifestEntry> = read_json(&dir.join("manifest.json"))?;
    let (model, ps, vocab) = build_model(&meta, device)?;
    match weights {
        WeightKind::Raw => {
            apply_params(&ps, read_blob(&dir.join("params.bin"), &manifest)?)?;
        }
        WeightKind::Ema => {
            let ema_path = dir.join("ema.bin");
            if !ema_path.exists() {
                return Err(Error::Checkpoint("checkpoint has no EMA weights".into()));
            }
            let state: TrainState = read_json(&dir.join("train_state.json"))?;
            let raw = read_blob(&ema_path, &manifest)?;
            let bc = 1.0 - state.train_config.ema_beta.powi(state.ema_update_count as i32);
            if bc <= 0.0 {
                return Err(Error::Checkpoint("EMA has no updates".into()));
            }
            let corrected = raw
                .into_iter()
                .map(|(n, s, v)| (n, s, v.into_iter().map(|x| x / bc as f32).collect()))
                .collect();
            apply_params(&ps, corrected)?;
        }
    }
    let schedule = NoiseSchedule::from_params(&meta.schedule)?;
    Ok(LoadedModel { meta, model, ps, vocab, schedule })
}

/// Restore a trainer to continue an interrupted run.
pub fn load_trainer(dir: &Path, device: &Device) -> Result<(CheckpointMeta, Trainer)> {
    let meta = load_meta(dir)?;
    let manifest: Vec<ManifestEntry> = read_json(&dir.join("manifest.json"))?;
    let state: TrainState = read_json(&dir.join("train_state.json"))?;
    let (model, ps, vocab) = build_model(&meta, device)?;
    apply_params(&ps, read_blob(&dir.join("params.bin"), &manifest)?)?;

    let mut optimizer = AdamW::new();
    let m_path = dir.join("opt_m.bin");
    if m_path.exists() {
        let m = read_blob(&m_path, &manifest)?;
        let v = read_blob(&dir.join("opt_v.bin"), &manifest)?;
        let entries = m
            .into_iter()
            .zip(v)
            .map(|((n, s, m), (_, _, v))| (n, s, m, v))
            .collect();
        optimizer.restore(entries, state.optimizer_step_count, device)?;
    }
    let mut ema = EmaState::new(state.train_config.ema_beta);
    let ema_path = dir.join("ema.bin");
    if ema_path.exists() {
        ema.restore(read_blob(&ema_path, &manifest)?, state.ema_update_count, device)?;
    }
    let schedule = NoiseSchedule::from_params(&meta.schedule)?;
    let trainer = Trainer {
        model,
        ps,
        optimizer,
        ema,
        vocab,
        schedule,
        config: state.train_config,
        iteration: state.iteration,
        rng: state.rng,
    };
    Ok((meta, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::RepKind;
    use crate::synth::SynthConfig;
    use crate::training::Dataset;
    use candle_core::Device;

    fn setup() -> (Trainer, Dataset, CheckpointMeta) {
        let skeleton = Skeleton::desk_default();
        let rep = RepresentationSpec { kind: RepKind::Positions, joint_count: 12 };
        let synth_cfg = SynthConfig {
            classes: vec!["walk-forward".into(), "squat".into()],
            samples_per_class: 3,
            length_range: (20, 24),
            ..Default::default()
        };
        let seqs = crate::synth::synth_dataset(&synth_cfg, &skeleton, &rep).unwrap();
        let dataset = Dataset::new(&seqs, 24).unwrap();
        let vocab = Vocab::build(dataset.prompts.iter().map(|s| s.as_str()));
        let dn = DenoiserConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            kernel_size: 3,
            groups: 2,
            attention_heads: 2,
            dropout: 0.1,
            text_latent_dim: 8,
            time_latent_dim: 8,
            vocab_size: vocab.len(),
        };
        let mut ps = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = CondUNet1D::new(&mut ps, &mut rng, &dn, rep.feature_dim()).unwrap();
        let sched_params = ScheduleParams { steps: 50, ..Default::default() };
        let schedule = NoiseSchedule::from_params(&sched_params).unwrap();
        let tc = TrainConfig { iterations: 40, batch_size: 3, ema_beta: 0.99, ..Default::default() };
        let trainer = Trainer::new(model, ps, vocab, schedule, tc, 77).unwrap();
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            denoiser: dn,
            representation: rep,
            skeleton,
            schedule: sched_params,
            norm: dataset.norm.clone(),
            vocab_words: trainer.vocab.words.clone(),
            fps: 20.0,
            target_len: 24,
        };
        (trainer, dataset, meta)
    }

    #[test]
    fn save_load_roundtrip_params() {
        let (mut trainer, dataset, meta) = setup();
        for _ in 0..3 {
            trainer.step(&dataset).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &meta, &trainer).unwrap();
        let loaded = load_model(dir.path(), WeightKind::Raw, &Device::Cpu).unwrap();
        let a = trainer.ps.snapshot().unwrap();
        let b = loaded.ps.snapshot().unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, sa, va), (nb, sb, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            assert_eq!(va, vb, "parameter {na} changed through the roundtrip");
        }
        assert_eq!(loaded.vocab.words, trainer.vocab.words);
        assert_eq!(loaded.meta.target_len, 24);
    }

    #[test]
    fn ema_view_differs_after_training() {
        let (mut trainer, dataset, meta) = setup();
        for _ in 0..5 {
            trainer.step(&dataset).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &meta, &trainer).unwrap();
        let raw = load_model(dir.path(), WeightKind::Raw, &Device::Cpu).unwrap();
        let ema = load_model(dir.path(), WeightKind::Ema, &Device::Cpu).unwrap();
        let a = raw.ps.snapshot().unwrap();
        let b = ema.ps.snapshot().unwrap();
        let mut any_diff = false;
        for ((_, _, va), (_, _, vb)) in a.iter().zip(&b) {
            if va != vb {
                any_diff = true;
            }
        }
        assert!(any_diff, "EMA view should differ from raw weights once trained");
    }

    #[test]
    fn resume_replays_bit_for_bit() {
        let (mut unbroken, dataset, meta) = setup();
        let (mut resumed_src, _, _) = setup();
        // advance both to iteration 5 identically
        let mut pre = Vec::new();
        for _ in 0..5 {
            let a = unbroken.step(&dataset).unwrap();
            let b = resumed_src.step(&dataset).unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            pre.push(a.loss);
        }
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &meta, &resumed_src).unwrap();
        drop(resumed_src);
        let (_, mut resumed) = load_trainer(dir.path(), &Device::Cpu).unwrap();
        assert_eq!(resumed.iteration, 5);
        for step in 0..10 {
            let a = unbroken.step(&dataset).unwrap();
            let b = resumed.step(&dataset).unwrap();
            assert_eq!(
                a.loss.to_bits(),
                b.loss.to_bits(),
                "diverged at post-resume step {step}: {} vs {}",
                a.loss,
                b.loss
            );
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let (trainer, _, mut meta) = setup();
        meta.version = 99;
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &meta, &trainer).unwrap();
        let err = match load_model(dir.path(), WeightKind::Raw, &Device::Cpu) {
            Err(e) => e,
            Ok(_) => panic!("expected version error"),
        };
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn missing_tensors_rejected() {
        let (trainer, _, meta) = setup();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &meta, &trainer).unwrap();
        // truncate the manifest to simulate a missing tensor
        let mpath = dir.path().join("manifest.json");
        let mut manifest: Vec<ManifestEntry> = read_json(&mpath).unwrap();
        manifest.pop();
        write_json(&mpath, &manifest).unwrap();
        let err = match load_model(dir.path(), WeightKind::Raw, &Device::Cpu) {
            Err(e) => e,
            Ok(_) => panic!("expected missing-tensor error"),
        };
        assert!(err.to_string().contains("tensors"), "{err}");
    }

    #[test]
    fn ema_absent_is_an_error() {
        let (trainer, _, meta) = setup();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &meta, &trainer).unwrap();
        // no training steps happened, so no ema.bin was written
        let err = match load_model(dir.path(), WeightKind::Ema, &Device::Cpu) {
            Err(e) => e,
            Ok(_) => panic!("expected missing-EMA error"),
        };
        assert!(err.to_string().contains("EMA"), "{err}");
    }
}
