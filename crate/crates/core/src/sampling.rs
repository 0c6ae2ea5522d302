//! Inference: the full-length discrete sampler, a second-order multistep
//! SDE solver on a Karras sigma grid, classifier-free guidance, a prompt
//! embedding cache, batched guidance, and an optional reduced-precision
//! denoiser path.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::checkpoint::LoadedModel;
use crate::condition::{ConditionEmbedding, TextEncoder, Vocab};
use crate::denoiser::CondUNet1D;
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::schedule::{karras_sigmas, KarrasGrid, NoiseSchedule, SigmaTimestepMap};
use crate::tensor::{randn, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Dpmpp2mSde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Full,
    Reduced,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub guidance_scale: f64,
    pub use_karras: bool,
    pub precision: Precision,
    pub seed: u64,
    /// Stochastic noise injection in the SDE solver; off gives the
    /// deterministic exponential-integrator variant.
    pub sde_noise: bool,
    /// Run conditional and unconditional passes as one batched call.
    pub parallel_cfg: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Dpmpp2mSde,
            steps: 10,
            guidance_scale: 2.5,
            use_karras: true,
            precision: Precision::Full,
            seed: 0,
            sde_noise: true,
            parallel_cfg: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::Config("guidance scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Instrumentation for the efficiency contracts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Forward passes through the denoiser (a batched pair counts once).
    pub denoiser_calls: usize,
    /// Guidance pair evaluations (one per sampler step under CFG).
    pub pair_evals: usize,
    /// Text encoder invocations.
    pub encoder_calls: usize,
}

/// Eq. 3: uncond + s * (cond - uncond), with bitwise-exact endpoints.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, s: f64) -> Result<Tensor> {
    if uncond.dims() != cond.dims() {
        return Err(Error::Shape("guidance shapes differ".into()));
    }
    if s == 0.0 {
        return Ok(uncond.clone());
    }
    if s == 1.0 {
        return Ok(cond.clone());
    }
    Ok((uncond + (cond - uncond)?.affine(s, 0.0)?)?)
}

/// Static threshold for x0 predictions in normalized feature space.
const X0_CLAMP: f32 = 8.0;

/// x0 prediction callback: (x in normalized data space, fractional t).
pub type X0Fn<'a> = dyn FnMut(&Tensor, f64) -> Result<Tensor> + 'a;
/// Hook applied to each x0 prediction: (prediction, step index, total steps).
pub type X0Hook<'a> = dyn FnMut(Tensor, usize, usize) -> Result<Tensor> + 'a;

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    let s = x.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("non-finite state at sampler step {step}")));
    }
    Ok(())
}

/// Full-length ancestral sampling. The state lives in the normalized
/// (variance-preserving) space; the model is called with integer t from T
/// down to 1 and the posterior step injects noise except at t=1.
pub fn sample_ddpm(
    predict: &mut X0Fn,
    mut hook: Option<&mut X0Hook>,
    shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    device: &Device,
) -> Result<Tensor> {
    let big_t = schedule.len();
    let mut x = randn(rng, shape, DType::F32, device)?;
    for (i, t) in (1..=big_t).rev().enumerate() {
        // detach: the weights are Vars, so without this the graph of every
        // forward pass would stay alive through x for the whole loop
        let mut x0_hat = predict(&x, t as f64)?.detach();
        if let Some(h) = hook.as_deref_mut() {
            x0_hat = h(x0_hat, i, big_t)?.detach();
        }
        check_finite(&x0_hat, i)?;
        if t == 1 {
            x = x0_hat;
        } else {
            let eps = randn(rng, shape, DType::F32, device)?;
            x = crate::schedule::ddpm_posterior_step(&x, &x0_hat, t, Some(&eps), schedule)?;
        }
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Second-order multistep SDE solver in half-log-SNR time over a Karras
/// grid. The state is kept in sigma (variance-exploding) coordinates; the
/// model sees the rescaled x/sqrt(1+sigma^2) and a fractional timestep.
pub fn sample_dpmpp_2m_sde(
    predict: &mut X0Fn,
    mut hook: Option<&mut X0Hook>,
    shape: (usize, usize, usize),
    grid: &KarrasGrid,
    sde_noise: bool,
    rng: &mut ChaCha8Rng,
    device: &Device,
) -> Result<Tensor> {
    let n = grid.n_steps;
    let mut x = randn(rng, shape, DType::F32, device)?.affine(grid.sigmas[0], 0.0)?;
    let mut prev: Option<(Tensor, f64)> = None; // (D_{i-1}, h_prev)
    for i in 0..n {
        let sigma = grid.sigmas[i];
        let x_vp = x.affine(1.0 / (1.0 + sigma * sigma).sqrt(), 0.0)?;
        let mut d = predict(&x_vp, grid.timesteps[i])?.detach();
        if let Some(h) = hook.as_deref_mut() {
            d = h(d, i, n)?.detach();
        }
        check_finite(&d, i)?;
        let sigma_next = grid.sigmas[i + 1];
        if sigma_next == 0.0 {
            x = d;
            check_finite(&x, i)?;
            break;
        }
        let h = (sigma / sigma_next).ln(); // lambda_next - lambda_cur > 0
        // second-order combination; first step has no history
        let d_tilde = match &prev {
            Some((d_prev, h_prev)) => {
                let c = h_prev / (2.0 * h);
                (d.affine(1.0 + c, 0.0)? - d_prev.affine(c, 0.0)?)?
            }
            None => d.clone(),
        };
        if sde_noise {
            let decay = (-2.0 * h).exp();
            let eps = randn(rng, shape, DType::F32, device)?;
            x = (x.affine(decay, 0.0)? + d_tilde.affine(1.0 - decay, 0.0)?)?;
            x = (x + eps.affine(sigma_next * (1.0 - decay).sqrt(), 0.0)?)?;
        } else {
            let decay = (-h).exp();
            x = (x.affine(decay, 0.0)? + d_tilde.affine(1.0 - decay, 0.0)?)?;
        }
        check_finite(&x, i)?;
        prev = Some((d, h));
    }
    Ok(x)
}

/// Conditional and null embeddings for one prompt.
pub struct CondPair {
    pub cond: ConditionEmbedding,
    pub null: ConditionEmbedding,
}

struct CacheInner {
    map: HashMap<String, Arc<CondPair>>,
    order: Vec<String>, // least recently used first
}

/// Bounded LRU cache of prompt embeddings, safe for concurrent use.
pub struct PromptCache {
    capacity: usize,
    inner: Mutex<CacheInner>,
}

impl PromptCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        PromptCache {
            capacity,
            inner: Mutex::new(CacheInner { map: HashMap::new(), order: Vec::new() }),
        }
    }

    /// Fetch the (cond, null) pair, encoding at most once per prompt while
    /// it stays resident.
    pub fn get_or_encode(
        &self,
        prompt: &str,
        encoder: &TextEncoder,
        vocab: &Vocab,
        counters: &mut Counters,
    ) -> Result<Arc<CondPair>> {
        let mut inner = self.inner.lock().expect("prompt cache poisoned");
        if let Some(pair) = inner.map.get(prompt).cloned() {
            let pos = inner.order.iter().position(|p| p == prompt).unwrap();
            let key = inner.order.remove(pos);
            inner.order.push(key);
            return Ok(pair);
        }
        drop(inner);
        counters.encoder_calls += 1;
        let cond = encoder.encode(&[Some(prompt)], vocab)?.detach();
        let null = encoder.encode(&[None], vocab)?.detach();
        let pair = Arc::new(CondPair { cond, null });
        let mut inner = self.inner.lock().expect("prompt cache poisoned");
        if inner.map.len() >= self.capacity {
            let evict = inner.order.remove(0);
            inner.map.remove(&evict);
        }
        inner.map.insert(prompt.to_string(), pair.clone());
        inner.order.push(prompt.to_string());
        Ok(pair)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("prompt cache poisoned").map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One batched model invocation over the (conditional, unconditional) pair.
pub fn batched_guidance_forward(
    model: &CondUNet1D,
    x_t: &Tensor,
    t: f64,
    cond: &ConditionEmbedding,
    null: &ConditionEmbedding,
    mask: &[Vec<bool>],
    counters: &mut Counters,
) -> Result<(Tensor, Tensor)> {
    let b = x_t.dim(0)?;
    let both = Tensor::cat(&[x_t, x_t], 0)?;
    let cond_both = ConditionEmbedding::concat(cond, null)?;
    let mut mask_both = mask.to_vec();
    mask_both.extend(mask.iter().cloned());
    let ts = vec![t; 2 * b];
    counters.denoiser_calls += 1;
    counters.pair_evals += 1;
    let out = model.denoise(&both, &ts, &cond_both, &mask_both, None)?;
    let c = out.narrow(0, 0, b)?;
    let u = out.narrow(0, b, b)?;
    Ok((c, u))
}

/// Guided x0 prediction, batching the CFG pair when requested. Guidance
/// scales 0 and 1 skip the unused branch entirely.
#[allow(clippy::too_many_arguments)]
pub fn guided_predict(
    model: &CondUNet1D,
    x_t: &Tensor,
    t: f64,
    pair: &CondPair,
    scale: f64,
    parallel: bool,
    mask: &[Vec<bool>],
    counters: &mut Counters,
) -> Result<Tensor> {
    let b = x_t.dim(0)?;
    let ts = vec![t; b];
    if scale == 0.0 {
        counters.denoiser_calls += 1;
        counters.pair_evals += 1;
        return model.denoise(x_t, &ts, &pair.null, mask, None);
    }
    if scale == 1.0 {
        counters.denoiser_calls += 1;
        counters.pair_evals += 1;
        return model.denoise(x_t, &ts, &pair.cond, mask, None);
    }
    let (c, u) = if parallel {
        batched_guidance_forward(model, x_t, t, &pair.cond, &pair.null, mask, counters)?
    } else {
        counters.denoiser_calls += 2;
        counters.pair_evals += 1;
        let c = model.denoise(x_t, &ts, &pair.cond, mask, None)?;
        let u = model.denoise(x_t, &ts, &pair.null, mask, None)?;
        (c, u)
    };
    cfg_combine(&u, &c, scale)
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub prompt: String,
    pub steps: usize,
    pub sampler: SamplerKind,
    pub aits_seconds: f64,
    pub denoiser_calls: usize,
    pub encoder_calls: usize,
}

/// Loaded checkpoint plus the caches needed for repeated generation.
pub struct InferenceEngine {
    pub loaded: LoadedModel,
    pub cache: PromptCache,
    sigma_map: SigmaTimestepMap,
    reduced: OnceLock<(CondUNet1D, ParamStore)>,
}

impl InferenceEngine {
    pub fn new(loaded: LoadedModel) -> Self {
        let sigma_map = SigmaTimestepMap::new(&loaded.schedule);
        InferenceEngine { loaded, cache: PromptCache::new(32), sigma_map, reduced: OnceLock::new() }
    }

    pub fn sigma_map(&self) -> &SigmaTimestepMap {
        &self.sigma_map
    }

    /// Half-precision mirror of the denoiser, built on first use.
    fn reduced_model(&self) -> Result<&(CondUNet1D, ParamStore)> {
        if let Some(pair) = self.reduced.get() {
            return Ok(pair);
        }
        let mut ps = ParamStore::with_dtype(self.loaded.ps.device.clone(), DType::F16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CondUNet1D::new(
            &mut ps,
            &mut rng,
            &self.loaded.meta.denoiser,
            self.loaded.meta.representation.feature_dim(),
        )?;
        for (name, dims, values) in self.loaded.ps.snapshot()? {
            let t = Tensor::from_vec(values, dims, &ps.device)?;
            ps.set(&name, &t)?;
        }
        let _ = self.reduced.set((model, ps));
        Ok(self.reduced.get().expect("reduced model initialized"))
    }

    pub fn karras_grid(&self, steps: usize) -> Result<KarrasGrid> {
        karras_sigmas(
            steps,
            self.sigma_map.sigma_min(),
            self.sigma_map.sigma_max(),
            7.0,
            &self.sigma_map,
        )
    }

    /// Generate one motion. Sampling time excludes checkpoint loading and
    /// prompt encoding done before the timer starts.
    pub fn generate(
        &self,
        prompt: &str,
        frames: usize,
        config: &SamplerConfig,
        hook: Option<&mut X0Hook>,
    ) -> Result<(MotionSequence, TimingReport, Counters)> {
        config.validate()?;
        if frames == 0 || frames > self.loaded.meta.target_len {
            return Err(Error::Config(format!(
                "frames must be in [1, {}]",
                self.loaded.meta.target_len
            )));
        }
        let m = self.loaded.meta.representation.feature_dim();
        let device = self.loaded.ps.device.clone();
        let mask = vec![vec![true; frames]; 1];
        let mut counters = Counters::default();
        let pair =
            self.cache
                .get_or_encode(prompt, &self.loaded.model.text_encoder, &self.loaded.vocab, &mut counters)?;

        let reduced = match config.precision {
            Precision::Full => None,
            Precision::Reduced => Some(self.reduced_model()?),
        };
        let model = match reduced {
            Some((m16, _)) => m16,
            None => &self.loaded.model,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shape = (1usize, frames, m);
        let counters_ref = &mut counters;
        let mut predict = |x: &Tensor, t: f64| -> Result<Tensor> {
            let out = guided_predict(
                model,
                x,
                t,
                &pair,
                config.guidance_scale,
                config.parallel_cfg,
                &mask,
                counters_ref,
            )?;
            // accumulation back at full precision, with static thresholding:
            // the features are z-scored, so valid data sits well inside the
            // clamp and runaway low-sigma feedback cannot blow up the state
            Ok(out.to_dtype(DType::F32)?.clamp(-X0_CLAMP, X0_CLAMP)?)
        };

        let start = std::time::Instant::now();
        let x0 = match config.kind {
            SamplerKind::Ddpm => sample_ddpm(
                &mut predict,
                hook,
                shape,
                &self.loaded.schedule,
                &mut rng,
                &device,
            )?,
            SamplerKind::Dpmpp2mSde => {
                let grid = self.karras_grid(config.steps)?;
                sample_dpmpp_2m_sde(
                    &mut predict,
                    hook,
                    shape,
                    &grid,
                    config.sde_noise,
                    &mut rng,
                    &device,
                )?
            }
        };
        let aits = start.elapsed().as_secs_f64();

        let flat = x0.squeeze(0)?.to_vec2::<f32>()?;
        let mut features = ndarray::Array2::zeros((frames, m));
        for (ti, row) in flat.iter().enumerate() {
            for (fi, &v) in row.iter().enumerate() {
                features[(ti, fi)] = v;
            }
        }
        self.loaded.meta.norm.denormalize_frames(&mut features);
        let seq = MotionSequence {
            fps: self.loaded.meta.fps,
            features,
            mask: vec![true; frames],
            label: Some(crate::condition::tokenize(prompt)),
        };
        seq.validate()?;
        let steps = match config.kind {
            SamplerKind::Ddpm => self.loaded.schedule.len(),
            SamplerKind::Dpmpp2mSde => config.steps,
        };
        let report = TimingReport {
            prompt: prompt.to_string(),
            steps,
            sampler: config.kind,
            aits_seconds: aits,
            denoiser_calls: counters.denoiser_calls,
            encoder_calls: counters.encoder_calls,
        };
        Ok((seq, report, counters))
    }
}
