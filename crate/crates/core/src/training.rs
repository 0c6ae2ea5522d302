//! Training loop: per-sample timestep draws, classifier-free condition
//! dropout, masked x0 regression loss, global-norm gradient clipping, a
//! decoupled weight-decay Adam optimizer, parameter EMA, and stepped
//! learning-rate decay.

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

use crate::condition::Vocab;
use crate::denoiser::CondUNet1D;
use crate::error::{Error, Result};
use crate::motion::{pad_and_mask, MotionSequence};
use crate::schedule::NoiseSchedule;
use crate::tensor::{randn, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub grad_clip_norm: f64,
    pub cfg_drop_prob: f64,
    pub ema_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 0.01,
            iterations: 5000,
            batch_size: 16,
            lr_decay_factor: 0.9,
            lr_decay_every: 5000,
            grad_clip_norm: 1.0,
            cfg_drop_prob: 0.1,
            ema_beta: 0.9999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::Config("cfg_drop_prob must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config("ema_beta must be in [0, 1)".into()));
        }
        if self.lr_decay_every == 0 || !(0.0..=1.0).contains(&self.lr_decay_factor) {
            return Err(Error::Config("invalid lr decay parameters".into()));
        }
        Ok(())
    }
}

/// Stepped decay: lr * factor^floor(iteration / every).
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    config.lr * config.lr_decay_factor.powi((iteration / config.lr_decay_every) as i32)
}

/// Scale gradients so the global L2 norm does not exceed max_norm.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = crate::tensor::global_norm(grads)?;
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.affine(scale, 0.0)?;
        }
    }
    Ok(norm)
}

/// Per-feature normalization statistics over valid frames.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn compute(padded: &Array3<f32>, mask: &Array2<bool>) -> Result<Self> {
        let (b, t, m) = padded.dim();
        let mut sum = vec![0.0f64; m];
        let mut count = 0usize;
        for bi in 0..b {
            for ti in 0..t {
                if mask[(bi, ti)] {
                    count += 1;
                    for fi in 0..m {
                        sum[fi] += padded[(bi, ti, fi)] as f64;
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::Config("no valid frames to normalize over".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0f64; m];
        for bi in 0..b {
            for ti in 0..t {
                if mask[(bi, ti)] {
                    for fi in 0..m {
                        let d = padded[(bi, ti, fi)] as f64 - mean[fi];
                        var[fi] += d * d;
                    }
                }
            }
        }
        Ok(NormStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            std: var
                .iter()
                .map(|v| ((v / count as f64).sqrt().max(1e-4)) as f32)
                .collect(),
        })
    }

    pub fn normalize(&self, features: &mut Array3<f32>) {
        let (b, t, m) = features.dim();
        assert_eq!(m, self.mean.len());
        for bi in 0..b {
            for ti in 0..t {
                for fi in 0..m {
                    features[(bi, ti, fi)] =
                        (features[(bi, ti, fi)] - self.mean[fi]) / self.std[fi];
                }
            }
        }
    }

    pub fn normalize_frames(&self, features: &mut Array2<f32>) {
        let (t, m) = features.dim();
        assert_eq!(m, self.mean.len());
        for ti in 0..t {
            for fi in 0..m {
                features[(ti, fi)] = (features[(ti, fi)] - self.mean[fi]) / self.std[fi];
            }
        }
    }

    pub fn denormalize_frames(&self, features: &mut Array2<f32>) {
        let (t, m) = features.dim();
        assert_eq!(m, self.mean.len());
        for ti in 0..t {
            for fi in 0..m {
                features[(ti, fi)] = features[(ti, fi)] * self.std[fi] + self.mean[fi];
            }
        }
    }
}

/// Padded, normalized training corpus.
pub struct Dataset {
    pub features: Array3<f32>,
    pub mask: Array2<bool>,
    pub prompts: Vec<String>,
    pub norm: NormStats,
    pub target_len: usize,
}

impl Dataset {
    pub fn new(sequences: &[MotionSequence], target_len: usize) -> Result<Self> {
        let (mut features, mask) = pad_and_mask(sequences, target_len)?;
        let prompts: Vec<String> = sequences
            .iter()
            .map(|s| {
                s.label
                    .as_ref()
                    .map(|toks| toks.join(" "))
                    .ok_or_else(|| Error::Config("sequence missing a label".into()))
            })
            .collect::<Result<_>>()?;
        let norm = NormStats::compute(&features, &mask)?;
        norm.normalize(&mut features);
        Ok(Dataset { features, mask, prompts, norm, target_len })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Sample a batch of indices uniformly with replacement.
    pub fn batch_indices(&self, rng: &mut ChaCha8Rng, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| rng.gen_range(0..self.len())).collect()
    }
}

/// Decoupled weight-decay Adam with (0.9, 0.999) moments.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(
        &mut self,
        ps: &ParamStore,
        grads: &[(String, Tensor)],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let var = ps
                .var(name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter {name}")))?;
            // detach so the optimizer state does not keep the forward graph alive
            let g = &g.detach();
            let m = match self.m.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = m_hat.div(&(v_hat.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor();
            let new = (theta.affine(1.0 - lr * weight_decay, 0.0)? - update.affine(lr, 0.0)?)?;
            var.set(&new)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>, Vec<f32>)>> {
        let mut out = Vec::with_capacity(self.m.len());
        for (name, m) in &self.m {
            let v = &self.v[name];
            out.push((
                name.clone(),
                m.dims().to_vec(),
                m.flatten_all()?.to_vec1::<f32>()?,
                v.flatten_all()?.to_vec1::<f32>()?,
            ));
        }
        Ok(out)
    }

    pub fn restore(
        &mut self,
        entries: Vec<(String, Vec<usize>, Vec<f32>, Vec<f32>)>,
        step_count: usize,
        device: &candle_core::Device,
    ) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step_count = step_count;
        for (name, dims, m, v) in entries {
            self.m.insert(name.clone(), Tensor::from_vec(m, dims.clone(), device)?);
            self.v.insert(name, Tensor::from_vec(v, dims, device)?);
        }
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

/// Exponential moving average of parameters, v_0 = 0 with bias correction.
pub struct EmaState {
    pub beta: f64,
    pub update_count: usize,
    shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub fn new(beta: f64) -> Self {
        EmaState { beta, update_count: 0, shadow: BTreeMap::new() }
    }

    /// v_t = beta * v_{t-1} + (1 - beta) * theta_t
    pub fn update(&mut self, ps: &ParamStore) -> Result<()> {
        self.update_count += 1;
        for (name, var) in ps.iter() {
            let theta = var.as_tensor();
            let v = match self.shadow.get(name) {
                Some(prev) => {
                    if prev.dims() != theta.dims() {
                        return Err(Error::Shape(format!("EMA shape drift on {name}")));
                    }
                    (prev.affine(self.beta, 0.0)? + theta.affine(1.0 - self.beta, 0.0)?)?
                }
                None => theta.affine(1.0 - self.beta, 0.0)?,
            };
            self.shadow.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Bias-corrected view v_t / (1 - beta^t).
    pub fn corrected(&self, name: &str) -> Result<Tensor> {
        let v = self
            .shadow
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no EMA shadow for {name}")))?;
        let bc = 1.0 - self.beta.powi(self.update_count as i32);
        if bc <= 0.0 {
            return Err(Error::Numerical("EMA has no updates yet".into()));
        }
        Ok(v.affine(1.0 / bc, 0.0)?)
    }

    /// Write the bias-corrected average into a parameter store.
    pub fn apply_to(&self, ps: &mut ParamStore) -> Result<()> {
        let names = ps.names();
        for name in names {
            let t = self.corrected(&name)?;
            ps.set(&name, &t)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::with_capacity(self.shadow.len());
        for (name, v) in &self.shadow {
            out.push((name.clone(), v.dims().to_vec(), v.flatten_all()?.to_vec1::<f32>()?));
        }
        Ok(out)
    }

    pub fn restore(
        &mut self,
        entries: Vec<(String, Vec<usize>, Vec<f32>)>,
        update_count: usize,
        device: &candle_core::Device,
    ) -> Result<()> {
        self.shadow.clear();
        self.update_count = update_count;
        for (name, dims, v) in entries {
            self.shadow.insert(name, Tensor::from_vec(v, dims, device)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// One optimizer step over a batch of normalized sequences.
///
/// All randomness (timesteps, noise, condition dropout, model dropout) is
/// drawn from `rng` in a fixed order, so a fixed seed gives a bit-identical
/// loss sequence.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &CondUNet1D,
    ps: &ParamStore,
    optimizer: &mut AdamW,
    ema: &mut EmaState,
    vocab: &Vocab,
    x0: &Tensor,
    mask: &[Vec<bool>],
    prompts: &[String],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    let start = std::time::Instant::now();
    let (b, t_len, m) = x0.dims3()?;
    if prompts.len() != b || mask.len() != b {
        return Err(Error::Shape("batch size mismatch".into()));
    }
    let big_t = schedule.len();

    // per-sample timestep and noise draws
    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=big_t)).collect();
    let eps = randn(rng, (b, t_len, m), DType::F32, &ps.device)?;
    let drops: Vec<bool> = (0..b).map(|_| rng.gen::<f64>() < config.cfg_drop_prob).collect();

    let sab: Vec<f32> = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt() as f32).collect();
    let somab: Vec<f32> =
        ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt() as f32).collect();
    let sab = Tensor::from_vec(sab, (b, 1, 1), &ps.device)?;
    let somab = Tensor::from_vec(somab, (b, 1, 1), &ps.device)?;
    let x_t = (x0.broadcast_mul(&sab)? + eps.broadcast_mul(&somab)?)?;

    let prompt_opts: Vec<Option<&str>> = prompts
        .iter()
        .zip(&drops)
        .map(|(p, &d)| if d { None } else { Some(p.as_str()) })
        .collect();
    let cond = model.text_encoder.encode(&prompt_opts, vocab)?;
    let ts_f: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let out = model.denoise(&x_t, &ts_f, &cond, mask, Some(rng))?;

    // masked MSE, one weight per sample
    let mask_flat: Vec<f32> = mask
        .iter()
        .flat_map(|row| row.iter().map(|&v| if v { 1.0f32 } else { 0.0 }))
        .collect();
    let mask_t = Tensor::from_vec(mask_flat, (b, t_len, 1), &ps.device)?;
    let diff2 = (out - x0)?.sqr()?.broadcast_mul(&mask_t)?;
    let valid: Vec<f32> = mask
        .iter()
        .map(|row| (row.iter().filter(|&&v| v).count() * m) as f32)
        .collect();
    let valid_t = Tensor::from_vec(valid, (b,), &ps.device)?;
    let per_sample = diff2.sum((1, 2))?.div(&valid_t)?;
    let per_vals = per_sample.to_vec1::<f32>()?;
    for (i, v) in per_vals.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss non-finite for sample {i}")));
        }
    }
    let loss = per_sample.mean_all()?;
    let loss_val = loss.to_scalar::<f32>()? as f64;

    let grads = loss.backward()?;
    let mut named: Vec<(String, Tensor)> = Vec::with_capacity(ps.len());
    let mut tensors: Vec<Tensor> = Vec::with_capacity(ps.len());
    for (name, var) in ps.iter() {
        let g = match grads.get(var) {
            Some(g) => g.clone(),
            None => var.as_tensor().zeros_like()?,
        };
        tensors.push(g.clone());
        named.push((name.clone(), g));
    }
    let grad_norm = clip_gradients(&mut tensors, config.grad_clip_norm)?;
    for ((_, g), clipped) in named.iter_mut().zip(tensors) {
        *g = clipped;
    }

    let lr = lr_at(iteration, config);
    optimizer.step(ps, &named, lr, config.weight_decay)?;
    ema.update(ps)?;

    Ok(StepMetrics {
        iteration,
        loss: loss_val,
        lr,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Bundles everything the loop needs; `step` draws batches internally.
pub struct Trainer {
    pub model: CondUNet1D,
    pub ps: ParamStore,
    pub optimizer: AdamW,
    pub ema: EmaState,
    pub vocab: Vocab,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        model: CondUNet1D,
        ps: ParamStore,
        vocab: Vocab,
        schedule: NoiseSchedule,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let ema = EmaState::new(config.ema_beta);
        Ok(Trainer {
            model,
            ps,
            optimizer: AdamW::new(),
            ema,
            vocab,
            schedule,
            config,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn step(&mut self, dataset: &Dataset) -> Result<StepMetrics> {
        let idx = dataset.batch_indices(&mut self.rng, self.config.batch_size);
        let t = dataset.target_len;
        let m = dataset.features.dim().2;
        let mut flat = Vec::with_capacity(idx.len() * t * m);
        let mut mask = Vec::with_capacity(idx.len());
        let mut prompts = Vec::with_capacity(idx.len());
        for &i in &idx {
            for ti in 0..t {
                for fi in 0..m {
                    flat.push(dataset.features[(i, ti, fi)]);
                }
            }
            mask.push((0..t).map(|ti| dataset.mask[(i, ti)]).collect());
            prompts.push(dataset.prompts[i].clone());
        }
        let x0 = Tensor::from_vec(flat, (idx.len(), t, m), &self.ps.device)?;
        let metrics = training_step(
            &self.model,
            &self.ps,
            &mut self.optimizer,
            &mut self.ema,
            &self.vocab,
            &x0,
            &mask,
            &prompts,
            &self.schedule,
            &self.config,
            self.iteration,
            &mut self.rng,
        )?;
        self.iteration += 1;
        Ok(metrics)
    }

    /// Run to `config.iterations`, optionally logging JSON-lines metrics.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        mut log: Option<&mut dyn Write>,
        log_every: usize,
    ) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::new();
        while self.iteration < self.config.iterations {
            let m = self.step(dataset)?;
            if let Some(w) = log.as_deref_mut() {
                if log_every > 0 && m.iteration % log_every == 0 {
                    writeln!(w, "{}", serde_json::to_string(&m)?)?;
                }
            }
            history.push(m);
        }
        Ok(history)
    }
}
