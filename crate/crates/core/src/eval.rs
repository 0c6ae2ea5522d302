//! Metric suite (FID, R-precision, diversity, multi-modality, AITS, skate
//! ratio) backed by small contrastive motion/text encoders trained on the
//! synthetic corpus.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{linear, tokenize, Vocab};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::tensor::{Init, ParamStore};
use crate::training::AdamW;

pub use crate::footskate::skate_ratio;

/// Output dimension of both evaluation encoders. Kept small so the
/// finite-sample bias of FID stays negligible at desk-scale set sizes.
pub const EVAL_DIM: usize = 8;

const HIDDEN: usize = 64;

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

/// Contrastive encoder training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            iterations: 600,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 1e-4,
            temperature: 0.07,
        }
    }
}

/// Paired motion/text encoders producing unit-norm 32-d features. A trained
/// instance is a versioned artifact; all comparisons must use one version.
pub struct EvalEncoders {
    pub version: String,
    pub vocab: Vocab,
    summary_mean: Vec<f32>,
    summary_std: Vec<f32>,
    ps: ParamStore,
}

/// Per-feature mean and standard deviation over the valid frames,
/// concatenated; the fixed summary fed to the motion encoder MLP.
fn motion_summary(seq: &MotionSequence) -> Vec<f32> {
    let feats = seq.valid_features();
    let (v, m) = feats.dim();
    let mut out = vec![0.0f32; 2 * m];
    if v == 0 {
        return out;
    }
    for k in 0..m {
        let mut mean = 0.0f32;
        for f in 0..v {
            mean += feats[[f, k]];
        }
        mean /= v as f32;
        let mut var = 0.0f32;
        for f in 0..v {
            let d = feats[[f, k]] - mean;
            var += d * d;
        }
        out[k] = mean;
        out[m + k] = (var / v as f32).sqrt();
    }
    out
}

/// Length-normalized bag-of-words vector over the vocabulary.
fn text_bow(prompt: &str, vocab: &Vocab) -> Result<Vec<f32>> {
    let toks = tokenize(prompt);
    let mut out = vec![0.0f32; vocab.len()];
    if toks.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    for t in &toks {
        out[vocab.id(t)?] += 1.0 / toks.len() as f32;
    }
    Ok(out)
}

fn l2_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

fn mlp(ps: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let get = |n: &str| -> Result<Tensor> {
        Ok(ps
            .var(&format!("{prefix}.{n}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing eval parameter {prefix}.{n}")))?
            .as_tensor()
            .clone())
    };
    let h = linear(x, &get("w1")?, &get("b1")?)?.relu()?;
    l2_rows(&linear(&h, &get("w2")?, &get("b2")?)?)
}

fn init_params(
    ps: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    in_motion: usize,
    in_text: usize,
) -> Result<()> {
    for (prefix, dim_in) in [("eval.motion", in_motion), ("eval.text", in_text)] {
        ps.get(&format!("{prefix}.w1"), (dim_in, HIDDEN), Init::KaimingUniform { fan_in: dim_in }, rng)?;
        ps.get(&format!("{prefix}.b1"), (HIDDEN,), Init::Zeros, rng)?;
        ps.get(&format!("{prefix}.w2"), (HIDDEN, EVAL_DIM), Init::KaimingUniform { fan_in: HIDDEN }, rng)?;
        ps.get(&format!("{prefix}.b2"), (EVAL_DIM,), Init::Zeros, rng)?;
    }
    Ok(())
}

fn fnv_hash(bytes: impl Iterator<Item = u8>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl EvalEncoders {
    fn motion_input(&self, seqs: &[&MotionSequence]) -> Result<Tensor> {
        let dim = self.summary_mean.len();
        let mut flat = Vec::with_capacity(seqs.len() * dim);
        for s in seqs {
            let summary = motion_summary(s);
            if summary.len() != dim {
                return Err(Error::Shape(format!(
                    "motion summary dim {} != encoder dim {dim}",
                    summary.len()
                )));
            }
            for (k, v) in summary.iter().enumerate() {
                flat.push((v - self.summary_mean[k]) / self.summary_std[k].max(1e-4));
            }
        }
        Ok(Tensor::from_vec(flat, (seqs.len(), dim), &self.ps.device)?)
    }

    /// Unit-norm feature rows, one per motion.
    pub fn encode_motions(&self, seqs: &[&MotionSequence]) -> Result<Array2<f32>> {
        if seqs.is_empty() {
            return Err(Error::Config("no motions to encode".into()));
        }
        let x = self.motion_input(seqs)?;
        tensor_to_array(&mlp(&self.ps, "eval.motion", &x)?)
    }

    /// Unit-norm feature rows, one per prompt.
    pub fn encode_texts(&self, prompts: &[&str]) -> Result<Array2<f32>> {
        if prompts.is_empty() {
            return Err(Error::Config("no prompts to encode".into()));
        }
        let dim = self.vocab.len();
        let mut flat = Vec::with_capacity(prompts.len() * dim);
        for p in prompts {
            flat.extend(text_bow(p, &self.vocab)?);
        }
        let x = Tensor::from_vec(flat, (prompts.len(), dim), &self.ps.device)?;
        tensor_to_array(&mlp(&self.ps, "eval.text", &x)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let artifact = EncoderArtifact {
            version: self.version.clone(),
            words: self.vocab.words.clone(),
            summary_mean: self.summary_mean.clone(),
            summary_std: self.summary_std.clone(),
            params: self.ps.snapshot()?,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&artifact)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let artifact: EncoderArtifact = serde_json::from_slice(&std::fs::read(path)?)?;
        let vocab = Vocab::from_words(artifact.words);
        let device = Device::Cpu;
        let mut ps = ParamStore::new(device.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&mut ps, &mut rng, artifact.summary_mean.len(), vocab.len())?;
        for (name, dims, values) in artifact.params {
            let t = Tensor::from_vec(values, dims, &device)?;
            ps.set(&name, &t)?;
        }
        Ok(EvalEncoders {
            version: artifact.version,
            vocab,
            summary_mean: artifact.summary_mean,
            summary_std: artifact.summary_std,
            ps,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderArtifact {
    version: String,
    words: Vec<String>,
    summary_mean: Vec<f32>,
    summary_std: Vec<f32>,
    params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn tensor_to_array(t: &Tensor) -> Result<Array2<f32>> {
    let (r, c) = t.dims2()?;
    let host = t.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let mut out = Array2::zeros((r, c));
    for (i, row) in host.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Train the contrastive encoder pair with a symmetric InfoNCE objective
/// over in-batch negatives. Deterministic under the seed.
pub fn train_eval_encoders(corpus: &[MotionSequence], seed: u64) -> Result<EvalEncoders> {
    train_eval_encoders_with(corpus, seed, &EncoderTrainConfig::default())
}

pub fn train_eval_encoders_with(
    corpus: &[MotionSequence],
    seed: u64,
    config: &EncoderTrainConfig,
) -> Result<EvalEncoders> {
    if config.iterations == 0 || config.batch_size < 2 || config.temperature <= 0.0 {
        return Err(Error::Config("invalid encoder training config".into()));
    }
    let prompts: Vec<String> = corpus
        .iter()
        .map(|s| {
            s.label
                .as_ref()
                .map(|t| t.join(" "))
                .ok_or_else(|| Error::Config("corpus sequence missing a label".into()))
        })
        .collect::<Result<_>>()?;
    let distinct: HashSet<&String> = prompts.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::Config(
            "degenerate corpus: contrastive training needs at least 2 classes".into(),
        ));
    }

    let summaries: Vec<Vec<f32>> = corpus.iter().map(motion_summary).collect();
    let sdim = summaries[0].len();
    let n = corpus.len();
    let mut mean = vec![0.0f32; sdim];
    let mut std = vec![0.0f32; sdim];
    for s in &summaries {
        for k in 0..sdim {
            mean[k] += s[k] / n as f32;
        }
    }
    for s in &summaries {
        for k in 0..sdim {
            std[k] += (s[k] - mean[k]).powi(2) / n as f32;
        }
    }
    for v in std.iter_mut() {
        *v = v.sqrt();
    }

    let vocab = Vocab::build(prompts.iter().map(String::as_str));
    let device = Device::Cpu;
    let mut ps = ParamStore::new(device.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params(&mut ps, &mut rng, sdim, vocab.len())?;

    let bows: Vec<Vec<f32>> = prompts
        .iter()
        .map(|p| text_bow(p, &vocab))
        .collect::<Result<_>>()?;
    let normed: Vec<Vec<f32>> = summaries
        .iter()
        .map(|s| {
            s.iter()
                .enumerate()
                .map(|(k, v)| (v - mean[k]) / std[k].max(1e-4))
                .collect()
        })
        .collect();

    let mut opt = AdamW::new();
    let b = config.batch_size.min(n);
    let eye = Tensor::eye(b, DType::F32, &device)?;
    for _ in 0..config.iterations {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let mut mflat: Vec<f32> = Vec::with_capacity(b * sdim);
        let mut tflat: Vec<f32> = Vec::with_capacity(b * vocab.len());
        for &i in &idx {
            mflat.extend(&normed[i]);
            tflat.extend(&bows[i]);
        }
        let xm = Tensor::from_vec(mflat, (b, sdim), &device)?;
        let xt = Tensor::from_vec(tflat, (b, vocab.len()), &device)?;
        let zm = mlp(&ps, "eval.motion", &xm)?;
        let zt = mlp(&ps, "eval.text", &xt)?;
        let logits = zm.matmul(&zt.t()?)?.affine(1.0 / config.temperature, 0.0)?;
        let lr_rows = log_softmax_rows(&logits)?;
        let lr_cols = log_softmax_rows(&logits.t()?.contiguous()?)?;
        let diag_r = (lr_rows * &eye)?.sum_all()?;
        let diag_c = (lr_cols * &eye)?.sum_all()?;
        let loss = ((diag_r + diag_c)?.affine(-0.5 / b as f64, 0.0))?;

        let grads = loss.backward()?;
        let mut named = Vec::new();
        for name in ps.names() {
            if let Some(g) = grads.get(ps.var(&name).expect("named var").as_tensor()) {
                named.push((name, g.clone()));
            }
        }
        opt.step(&ps, &named, config.lr, config.weight_decay)?;
    }

    let snapshot = ps.snapshot()?;
    let version = fnv_hash(
        snapshot
            .iter()
            .flat_map(|(_, _, v)| v.iter().flat_map(|x| x.to_le_bytes())),
    );
    Ok(EvalEncoders { version, vocab, summary_mean: mean, summary_std: std, ps })
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// Set when a singular covariance forced the ridge fallback.
    pub ridge_used: bool,
}

fn mean_cov(x: &Array2<f32>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for k in 0..d {
            mean[k] += x[[i, k]] as f64 / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let da = x[[i, a]] as f64 - mean[a];
            for b in a..d {
                let db = x[[i, b]] as f64 - mean[b];
                cov[(a, b)] += da * db / (n - 1) as f64;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    (mean, cov)
}

/// Symmetric PSD square root; eigenvalues clamped at zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = m.nrows();
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        for a in 0..d {
            for b in 0..d {
                out[(a, b)] += s * v[a] * v[b];
            }
        }
    }
    out
}

fn frechet(mu_r: &[f64], cr: &DMatrix<f64>, mu_g: &[f64], cg: &DMatrix<f64>) -> f64 {
    let mut d2 = 0.0;
    for k in 0..mu_r.len() {
        d2 += (mu_r[k] - mu_g[k]).powi(2);
    }
    let sr_half = sqrtm_psd(cr);
    let inner = &sr_half * cg * &sr_half;
    let covmean = sqrtm_psd(&inner);
    d2 + cr.trace() + cg.trace() - 2.0 * covmean.trace()
}

/// Fréchet distance between the Gaussian fits of the two feature sets.
pub fn fid(real: &Array2<f32>, gen: &Array2<f32>) -> Result<FidResult> {
    let d = real.ncols();
    if d == 0 || gen.ncols() != d {
        return Err(Error::Shape("feature dimensions disagree".into()));
    }
    if real.nrows() < d + 1 || gen.nrows() < d + 1 {
        return Err(Error::Config(format!(
            "fid needs at least dim+1 = {} samples per side",
            d + 1
        )));
    }
    let (mu_r, cr) = mean_cov(real);
    let (mu_g, cg) = mean_cov(gen);

    let min_eig = |c: &DMatrix<f64>| -> f64 {
        c.clone().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let scale = cr.trace().max(cg.trace()).max(1.0);
    let singular = min_eig(&cr) < 1e-10 * scale || min_eig(&cg) < 1e-10 * scale;
    let (cr, cg, ridge_used) = if singular {
        let eye = DMatrix::identity(d, d) * 1e-6;
        (&cr + &eye, &cg + &eye, true)
    } else {
        (cr, cg, false)
    };
    let value = frechet(&mu_r, &cr, &mu_g, &cg).max(0.0);
    if !value.is_finite() {
        return Err(Error::Numerical("fid evaluated to a non-finite value".into()));
    }
    Ok(FidResult { value, ridge_used })
}

// ---------------------------------------------------------------------------
// R-precision, diversity, multi-modality
// ---------------------------------------------------------------------------

fn cosine(a: ndarray::ArrayView1<f32>, b: ndarray::ArrayView1<f32>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b.iter()) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-12)
}

/// Top-k retrieval accuracy: each motion's true text is ranked by cosine
/// similarity against pool_size-1 seeded random distractor texts.
pub fn r_precision(
    gen_features: &Array2<f32>,
    text_features: &Array2<f32>,
    k: usize,
    pool_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = gen_features.nrows();
    if n != text_features.nrows() || gen_features.ncols() != text_features.ncols() {
        return Err(Error::Shape("gen and text features must be paired".into()));
    }
    if pool_size < 2 || pool_size > n {
        return Err(Error::Config("pool_size must be in [2, sample count]".into()));
    }
    if k == 0 || k >= pool_size {
        return Err(Error::Config("k must be in [1, pool_size)".into()));
    }
    let mut hits = 0usize;
    let mut others: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i));
        others.shuffle(rng);
        let true_sim = cosine(gen_features.row(i), text_features.row(i));
        let higher = others[..pool_size - 1]
            .iter()
            .filter(|&&j| cosine(gen_features.row(i), text_features.row(j)) > true_sim)
            .count();
        if higher < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn pair_distance(features: &Array2<f32>, i: usize, j: usize) -> f64 {
    let mut d2 = 0.0f64;
    for k in 0..features.ncols() {
        let d = features[[i, k]] as f64 - features[[j, k]] as f64;
        d2 += d * d;
    }
    d2.sqrt()
}

/// Mean pairwise L2 distance over n_pairs seeded random disjoint pairs.
pub fn diversity(features: &Array2<f32>, n_pairs: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::Config("diversity needs at least 2 samples".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }
    let mut total = 0.0f64;
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..n);
        let j = loop {
            let j = rng.gen_range(0..n);
            if j != i {
                break j;
            }
        };
        total += pair_distance(features, i, j);
    }
    Ok(total / n_pairs as f64)
}

/// Mean pairwise L2 distance within same-text groups, over n_pairs seeded
/// draws; groups with fewer than 2 samples are skipped.
pub fn multimodality(
    groups: &[Array2<f32>],
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let eligible: Vec<&Array2<f32>> = groups.iter().filter(|g| g.nrows() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Config("multimodality needs a group with >= 2 samples".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }
    let mut total = 0.0f64;
    for _ in 0..n_pairs {
        let g = eligible[rng.gen_range(0..eligible.len())];
        let n = g.nrows();
        let i = rng.gen_range(0..n);
        let j = loop {
            let j = rng.gen_range(0..n);
            if j != i {
                break j;
            }
        };
        total += pair_distance(g, i, j);
    }
    Ok(total / n_pairs as f64)
}

/// Standard pair budget for diversity and multi-modality.
pub const DEFAULT_N_PAIRS: usize = 300;

// ---------------------------------------------------------------------------
// AITS
// ---------------------------------------------------------------------------

/// Average inference time per prompt at batch size 1; one warm-up run is
/// discarded. Returns (mean, sample standard deviation) in seconds.
pub fn aits<F>(mut infer: F, prompts: &[&str], repetitions: usize) -> Result<(f64, f64)>
where
    F: FnMut(&str) -> Result<()>,
{
    if prompts.is_empty() || repetitions == 0 {
        return Err(Error::Config("aits needs prompts and repetitions".into()));
    }
    infer(prompts[0])?;
    let mut times = Vec::with_capacity(prompts.len() * repetitions);
    for _ in 0..repetitions {
        for p in prompts {
            let start = Instant::now();
            infer(p)?;
            times.push(start.elapsed().as_secs_f64());
        }
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = if times.len() > 1 {
        times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// A metric mean with an optional 95% confidence half-width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub ci95: Option<f64>,
}

impl MetricStat {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n.max(1.0);
        if xs.len() < 2 {
            return MetricStat { mean, ci95: None };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        MetricStat { mean, ci95: Some(1.96 * (var / n).sqrt()) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub encoder_version: String,
    pub repetitions: usize,
    pub fid: MetricStat,
    pub fid_ridge_used: bool,
    pub r_precision_top1: MetricStat,
    pub r_precision_top2: MetricStat,
    pub r_precision_top3: MetricStat,
    pub diversity: MetricStat,
    /// Real-corpus diversity reported alongside for interpretation.
    pub real_diversity: MetricStat,
    pub multimodality: MetricStat,
    pub aits_seconds: MetricStat,
    pub skate_ratio: MetricStat,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two-row CSV: header plus values, CI columns blank when absent.
    pub fn to_csv(&self) -> String {
        let cols: [(&str, &MetricStat); 9] = [
            ("fid", &self.fid),
            ("r_precision_top1", &self.r_precision_top1),
            ("r_precision_top2", &self.r_precision_top2),
            ("r_precision_top3", &self.r_precision_top3),
            ("diversity", &self.diversity),
            ("real_diversity", &self.real_diversity),
            ("multimodality", &self.multimodality),
            ("aits_seconds", &self.aits_seconds),
            ("skate_ratio", &self.skate_ratio),
        ];
        let mut header = vec!["encoder_version".to_string(), "repetitions".to_string()];
        let mut row = vec![self.encoder_version.clone(), self.repetitions.to_string()];
        for (name, stat) in cols {
            header.push(name.to_string());
            row.push(format!("{}", stat.mean));
            header.push(format!("{name}_ci95"));
            row.push(stat.ci95.map(|c| format!("{c}")).unwrap_or_default());
        }
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}
