//! CondUNet1D: a Conv1D UNet over the frame axis that predicts the clean
//! sample x0 from a noised motion, a timestep, and a text condition.
//!
//! Conditioning enters through FiLM (time + sentence vector) inside every
//! conv block and through residual linear cross-attention against the
//! word-level token features. GroupNorm is feature-wise: statistics are
//! taken per frame so padded frames can never contaminate valid ones.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{sinusoidal_encoding, ConditionEmbedding, TextEncoder};
use crate::error::{Error, Result};
use crate::tensor::{Init, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub kernel_size: usize,
    pub groups: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub text_latent_dim: usize,
    pub time_latent_dim: usize,
    pub vocab_size: usize,
}

impl DenoiserConfig {
    /// Small configuration sized for CPU experiments.
    pub fn desk(vocab_size: usize) -> Self {
        DenoiserConfig {
            base_channels: 64,
            channel_multipliers: vec![1, 2, 2],
            kernel_size: 3,
            groups: 8,
            attention_heads: 4,
            dropout: 0.1,
            text_latent_dim: 64,
            time_latent_dim: 128,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.base_channels % self.groups != 0
            || self.base_channels % self.attention_heads != 0
        {
            return Err(Error::Config(format!(
                "base_channels {} must be divisible by groups {} and heads {}",
                self.base_channels, self.groups, self.attention_heads
            )));
        }
        if self.channel_multipliers.is_empty()
            || self.channel_multipliers.iter().any(|&m| m == 0)
        {
            return Err(Error::Config("channel multipliers must be non-empty positive".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.time_latent_dim % 2 != 0 || self.text_latent_dim % self.attention_heads != 0 {
            return Err(Error::Config("latent dims incompatible".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Frame count must be padded to a multiple of this before the UNet.
    pub fn frame_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Frame-uniform modulation: x * (1 + scale) + shift, broadcast over frames.
pub fn film_modulate(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c, _t) = x.dims3()?;
    let scale = scale.reshape((b, c, 1))?;
    let shift = shift.reshape((b, c, 1))?;
    Ok(x
        .broadcast_mul(&scale.affine(1.0, 1.0)?)?
        .broadcast_add(&shift)?)
}

/// Feature-wise GroupNorm: statistics per frame over each channel group,
/// never across the frame axis. `mask` (B,1,T) re-zeroes padded frames.
pub fn groupnorm_featurewise(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    if c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible by {groups} groups")));
    }
    // statistics at f32: the sum of squares overflows half precision
    let dtype = x.dtype();
    let xs = if dtype == DType::F16 { x.to_dtype(DType::F32)? } else { x.clone() };
    let g = xs.reshape((b, groups, c / groups, t))?;
    let mean = g.mean_keepdim(2)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered
        .broadcast_div(&(var + 1e-5)?.sqrt()?)?
        .reshape((b, c, t))?
        .to_dtype(dtype)?;
    let out = normed
        .broadcast_mul(&gamma.reshape((1, c, 1))?)?
        .broadcast_add(&beta.reshape((1, c, 1))?)?;
    match mask {
        Some(m) => Ok(out.broadcast_mul(m)?),
        None => Ok(out),
    }
}

fn phi(x: &Tensor) -> Result<Tensor> {
    // elu(u) + 1, the positive kernel feature map
    Ok(x.elu(1.0)?.affine(1.0, 1.0)?)
}

struct AttnParams {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
}

struct ConvBlock {
    out_ch: usize,
    gn1_g: Tensor,
    gn1_b: Tensor,
    conv1_w: Tensor,
    conv1_b: Tensor,
    film_w: Tensor,
    film_b: Tensor,
    gn2_g: Tensor,
    gn2_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    res: Option<(Tensor, Tensor)>,
    attn: AttnParams,
}

fn conv1d_same(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let k = w.dim(2)?;
    let out = x.conv1d(w, k / 2, stride, 1, 1)?;
    let oc = w.dim(0)?;
    Ok(out.broadcast_add(&b.reshape((1, oc, 1))?)?)
}

/// The motion denoiser G(x_t, t, c). Owns the text encoder.
pub struct CondUNet1D {
    pub config: DenoiserConfig,
    pub feature_dim: usize,
    pub text_encoder: TextEncoder,
    device: Device,
    dtype: DType,
    time_w1: Tensor,
    time_b1: Tensor,
    time_w2: Tensor,
    time_b2: Tensor,
    null_sentence: Tensor,
    in_w: Tensor,
    in_b: Tensor,
    enc_blocks: Vec<Vec<ConvBlock>>,
    downs: Vec<(Tensor, Tensor)>,
    mid_blocks: Vec<ConvBlock>,
    dec_blocks: Vec<Vec<ConvBlock>>,
    ups: Vec<(Tensor, Tensor)>,
    out_w: Tensor,
    out_b: Tensor,
}

const BLOCKS_PER_LEVEL: usize = 2;

impl CondUNet1D {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: &DenoiserConfig,
        feature_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let text_encoder = TextEncoder::new(
            ps,
            rng,
            "text",
            config.vocab_size,
            config.text_latent_dim,
            config.attention_heads,
        )?;
        let tl = config.time_latent_dim;
        let time_w1 = ps.get("time.w1", (tl, tl), Init::KaimingUniform { fan_in: tl }, rng)?;
        let time_b1 = ps.get("time.b1", (tl,), Init::Zeros, rng)?;
        let time_w2 = ps.get("time.w2", (tl, tl), Init::KaimingUniform { fan_in: tl }, rng)?;
        let time_b2 = ps.get("time.b2", (tl,), Init::Zeros, rng)?;
        let null_sentence = ps.get(
            "null_sentence",
            (config.text_latent_dim,),
            Init::Normal { std: 0.02 },
            rng,
        )?;

        let chs = config.channels();
        let n = chs.len();
        let k = config.kernel_size;
        let in_w = ps.get(
            "in_proj.w",
            (chs[0], feature_dim, 1),
            Init::KaimingUniform { fan_in: feature_dim },
            rng,
        )?;
        let in_b = ps.get("in_proj.b", (chs[0],), Init::Zeros, rng)?;

        let make_block = |ps: &mut ParamStore,
                              rng: &mut ChaCha8Rng,
                              name: String,
                              in_ch: usize,
                              out_ch: usize|
         -> Result<ConvBlock> {
            let gn1_g = ps.get(&format!("{name}.gn1.g"), (in_ch,), Init::Ones, rng)?;
            let gn1_b = ps.get(&format!("{name}.gn1.b"), (in_ch,), Init::Zeros, rng)?;
            let conv1_w = ps.get(
                &format!("{name}.conv1.w"),
                (out_ch, in_ch, k),
                Init::KaimingUniform { fan_in: in_ch * k },
                rng,
            )?;
            let conv1_b = ps.get(&format!("{name}.conv1.b"), (out_ch,), Init::Zeros, rng)?;
            let cond_dim = config.time_latent_dim + config.text_latent_dim;
            let film_w = ps.get(
                &format!("{name}.film.w"),
                (cond_dim, 2 * out_ch),
                Init::KaimingUniform { fan_in: cond_dim },
                rng,
            )?;
            let film_b = ps.get(&format!("{name}.film.b"), (2 * out_ch,), Init::Zeros, rng)?;
            let gn2_g = ps.get(&format!("{name}.gn2.g"), (out_ch,), Init::Ones, rng)?;
            let gn2_b = ps.get(&format!("{name}.gn2.b"), (out_ch,), Init::Zeros, rng)?;
            // zero-init so the block starts near identity
            let conv2_w =
                ps.get(&format!("{name}.conv2.w"), (out_ch, out_ch, k), Init::Zeros, rng)?;
            let conv2_b = ps.get(&format!("{name}.conv2.b"), (out_ch,), Init::Zeros, rng)?;
            let res = if in_ch != out_ch {
                let w = ps.get(
                    &format!("{name}.res.w"),
                    (out_ch, in_ch, 1),
                    Init::KaimingUniform { fan_in: in_ch },
                    rng,
                )?;
                let b = ps.get(&format!("{name}.res.b"), (out_ch,), Init::Zeros, rng)?;
                Some((w, b))
            } else {
                None
            };
            let td = config.text_latent_dim;
            let attn = AttnParams {
                wq: ps.get(
                    &format!("{name}.attn.q.w"),
                    (out_ch, out_ch, 1),
                    Init::KaimingUniform { fan_in: out_ch },
                    rng,
                )?,
                bq: ps.get(&format!("{name}.attn.q.b"), (out_ch,), Init::Zeros, rng)?,
                wk: ps.get(
                    &format!("{name}.attn.k.w"),
                    (td, out_ch),
                    Init::KaimingUniform { fan_in: td },
                    rng,
                )?,
                bk: ps.get(&format!("{name}.attn.k.b"), (out_ch,), Init::Zeros, rng)?,
                wv: ps.get(
                    &format!("{name}.attn.v.w"),
                    (td, out_ch),
                    Init::KaimingUniform { fan_in: td },
                    rng,
                )?,
                bv: ps.get(&format!("{name}.attn.v.b"), (out_ch,), Init::Zeros, rng)?,
                wo: ps.get(
                    &format!("{name}.attn.o.w"),
                    (out_ch, out_ch, 1),
                    Init::KaimingUniform { fan_in: out_ch },
                    rng,
                )?,
                bo: ps.get(&format!("{name}.attn.o.b"), (out_ch,), Init::Zeros, rng)?,
            };
            Ok(ConvBlock {
                out_ch,
                gn1_g,
                gn1_b,
                conv1_w,
                conv1_b,
                film_w,
                film_b,
                gn2_g,
                gn2_b,
                conv2_w,
                conv2_b,
                res,
                attn,
            })
        };

        let mut enc_blocks = Vec::with_capacity(n);
        let mut downs = Vec::with_capacity(n.saturating_sub(1));
        let mut cur = chs[0];
        for (i, &ch) in chs.iter().enumerate() {
            let mut level = Vec::with_capacity(BLOCKS_PER_LEVEL);
            for bi in 0..BLOCKS_PER_LEVEL {
                let in_ch = if bi == 0 { cur } else { ch };
                level.push(make_block(ps, rng, format!("enc{i}.block{bi}"), in_ch, ch)?);
            }
            enc_blocks.push(level);
            cur = ch;
            if i + 1 < n {
                let w = ps.get(
                    &format!("down{i}.w"),
                    (ch, ch, k),
                    Init::KaimingUniform { fan_in: ch * k },
                    rng,
                )?;
                let b = ps.get(&format!("down{i}.b"), (ch,), Init::Zeros, rng)?;
                downs.push((w, b));
            }
        }
        let mut mid_blocks = Vec::with_capacity(BLOCKS_PER_LEVEL);
        for bi in 0..BLOCKS_PER_LEVEL {
            mid_blocks.push(make_block(ps, rng, format!("mid.block{bi}"), cur, cur)?);
        }
        let mut dec_blocks = Vec::with_capacity(n);
        let mut ups = Vec::with_capacity(n.saturating_sub(1));
        for i in (0..n).rev() {
            let mut level = Vec::with_capacity(BLOCKS_PER_LEVEL);
            for bi in 0..BLOCKS_PER_LEVEL {
                let in_ch = if bi == 0 { cur + chs[i] } else { chs[i] };
                level.push(make_block(ps, rng, format!("dec{i}.block{bi}"), in_ch, chs[i])?);
            }
            dec_blocks.push(level);
            cur = chs[i];
            if i > 0 {
                let w = ps.get(
                    &format!("up{i}.w"),
                    (cur, cur, k),
                    Init::KaimingUniform { fan_in: cur * k },
                    rng,
                )?;
                let b = ps.get(&format!("up{i}.b"), (cur,), Init::Zeros, rng)?;
                ups.push((w, b));
            }
        }
        let out_w = ps.get(
            "out_proj.w",
            (feature_dim, chs[0], 1),
            Init::KaimingUniform { fan_in: chs[0] },
            rng,
        )?;
        let out_b = ps.get("out_proj.b", (feature_dim,), Init::Zeros, rng)?;

        Ok(CondUNet1D {
            config: config.clone(),
            feature_dim,
            text_encoder,
            device: ps.device.clone(),
            dtype: ps.dtype,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            null_sentence,
            in_w,
            in_b,
            enc_blocks,
            downs,
            mid_blocks,
            dec_blocks,
            ups,
            out_w,
            out_b,
        })
    }

    /// Sinusoidal encoding of each timestep followed by two linear layers
    /// with SiLU between. Fractional t is allowed.
    pub fn encode_timestep(&self, ts: &[f64]) -> Result<Tensor> {
        let tl = self.config.time_latent_dim;
        let rows: Vec<f32> = ts.iter().flat_map(|&t| sinusoidal_encoding(t, tl)).collect();
        let enc = Tensor::from_vec(rows, (ts.len(), tl), &self.device)?.to_dtype(self.dtype)?;
        let h = enc.matmul(&self.time_w1)?.broadcast_add(&self.time_b1)?.silu()?;
        Ok(h.matmul(&self.time_w2)?.broadcast_add(&self.time_b2)?)
    }

    /// Sentence vectors with null rows replaced by the learned ∅ embedding.
    fn effective_sentence(&self, cond: &ConditionEmbedding) -> Result<Tensor> {
        let b = cond.batch_size();
        let d = self.config.text_latent_dim;
        let flags: Vec<f32> = cond.is_null.iter().map(|&n| if n { 1.0 } else { 0.0 }).collect();
        let null_f = Tensor::from_vec(flags, (b, 1), &self.device)?.to_dtype(self.dtype)?;
        let keep = null_f.affine(-1.0, 1.0)?;
        let sent = cond.sentence.to_dtype(self.dtype)?;
        Ok(sent
            .broadcast_mul(&keep)?
            .broadcast_add(&self.null_sentence.reshape((1, d))?.broadcast_mul(&null_f)?)?)
    }

    /// Residual kernelized cross-attention of frame features against the
    /// word tokens. Returns the flag from the all-masked non-null case.
    pub fn residual_linear_cross_attention(
        &self,
        block: usize,
        x: &Tensor,
        cond: &ConditionEmbedding,
    ) -> Result<(Tensor, bool)> {
        let blk = self.block_by_index(block)?;
        attention_forward(&blk.attn, x, cond, self.config.attention_heads, self.dtype)
    }

    fn block_by_index(&self, idx: usize) -> Result<&ConvBlock> {
        self.all_blocks()
            .into_iter()
            .nth(idx)
            .ok_or_else(|| Error::Config(format!("no block {idx}")))
    }

    fn all_blocks(&self) -> Vec<&ConvBlock> {
        let mut v = Vec::new();
        for level in &self.enc_blocks {
            v.extend(level.iter());
        }
        v.extend(self.mid_blocks.iter());
        for level in &self.dec_blocks {
            v.extend(level.iter());
        }
        v
    }

    fn run_block(
        &self,
        blk: &ConvBlock,
        x: &Tensor,
        time_emb: &Tensor,
        sentence: &Tensor,
        cond: &ConditionEmbedding,
        mask: &Tensor,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let g = self.config.groups;
        let h = groupnorm_featurewise(x, g, &blk.gn1_g, &blk.gn1_b, Some(mask))?;
        let h = h.silu()?.broadcast_mul(mask)?;
        let h = conv1d_same(&h, &blk.conv1_w, &blk.conv1_b, 1)?;
        let condvec = Tensor::cat(&[time_emb, sentence], 1)?.silu()?;
        let film = condvec.matmul(&blk.film_w)?.broadcast_add(&blk.film_b)?;
        let scale = film.narrow(1, 0, blk.out_ch)?;
        let shift = film.narrow(1, blk.out_ch, blk.out_ch)?;
        let h = film_modulate(&h, &scale, &shift)?;
        let h = groupnorm_featurewise(&h, g, &blk.gn2_g, &blk.gn2_b, Some(mask))?;
        let mut h = h.silu()?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            let p = self.config.dropout;
            if p > 0.0 {
                let n = h.elem_count();
                let keep = 1.0f32 / (1.0 - p as f32);
                let draws: Vec<f32> = (0..n)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = Tensor::from_vec(draws, h.shape(), &self.device)?.to_dtype(self.dtype)?;
                h = (h * m)?;
            }
        }
        let h = h.broadcast_mul(mask)?;
        let h = conv1d_same(&h, &blk.conv2_w, &blk.conv2_b, 1)?;
        let res = match &blk.res {
            Some((w, b)) => conv1d_same(x, w, b, 1)?,
            None => x.clone(),
        };
        let y = (h + res)?;
        let (y, _flag) = attention_forward(&blk.attn, &y, cond, self.config.attention_heads, self.dtype)?;
        Ok(y.broadcast_mul(mask)?)
    }

    /// Run one conv block standalone (test hook).
    pub fn conv_block(
        &self,
        block: usize,
        x: &Tensor,
        time_emb: &Tensor,
        cond: &ConditionEmbedding,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let blk = self.block_by_index(block)?;
        let sentence = self.effective_sentence(cond)?;
        self.run_block(blk, x, time_emb, &sentence, cond, mask, &mut None)
    }

    /// Predict x0 from x_t. Input (B, T, M), per-sample timesteps, valid
    /// masks per sample (contiguous prefixes). Dropout is applied only when
    /// a rng is supplied.
    pub fn denoise(
        &self,
        x_t: &Tensor,
        ts: &[f64],
        cond: &ConditionEmbedding,
        mask: &[Vec<bool>],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let (b, t, m) = x_t.dims3()?;
        if m != self.feature_dim {
            return Err(Error::Shape(format!(
                "feature dim {m} does not match model dim {}",
                self.feature_dim
            )));
        }
        if ts.len() != b || cond.batch_size() != b || mask.len() != b {
            return Err(Error::Shape("batch size mismatch across inputs".into()));
        }
        let tmax = self.config.frame_multiple().max(1);
        let t_pad = t.div_ceil(tmax) * tmax;
        let n = self.config.levels();

        // channels-first, zero-pad frames to the UNet multiple
        let mut x = x_t.to_dtype(self.dtype)?.transpose(1, 2)?.contiguous()?;
        if t_pad > t {
            let pad = Tensor::zeros((b, m, t_pad - t), self.dtype, &self.device)?;
            x = Tensor::cat(&[&x, &pad], 2)?;
        }

        // per-level masks from valid lengths, halving by ceil each level
        let mut valid: Vec<usize> = mask
            .iter()
            .map(|row| row.iter().take_while(|&&v| v).count())
            .collect();
        if valid.iter().any(|&v| v == 0 || v > t) {
            return Err(Error::Shape("each sample needs a non-empty valid prefix".into()));
        }
        let mut level_masks = Vec::with_capacity(n);
        let mut len = t_pad;
        for _ in 0..n {
            let mut flat = Vec::with_capacity(b * len);
            for &v in &valid {
                for i in 0..len {
                    flat.push(if i < v.min(len) { 1.0f32 } else { 0.0 });
                }
            }
            level_masks
                .push(Tensor::from_vec(flat, (b, 1, len), &self.device)?.to_dtype(self.dtype)?);
            len /= 2;
            valid = valid.iter().map(|&v| v.div_ceil(2)).collect();
        }

        let time_emb = self.encode_timestep(ts)?;
        let sentence = self.effective_sentence(cond)?;

        x = x.broadcast_mul(&level_masks[0])?;
        x = conv1d_same(&x, &self.in_w, &self.in_b, 1)?;
        let mut skips = Vec::with_capacity(n);
        for (i, level) in self.enc_blocks.iter().enumerate() {
            for blk in level {
                x = self.run_block(blk, &x, &time_emb, &sentence, cond, &level_masks[i], &mut dropout_rng)?;
            }
            skips.push(x.clone());
            if i + 1 < n {
                let (w, bias) = &self.downs[i];
                x = conv1d_same(&x.broadcast_mul(&level_masks[i])?, w, bias, 2)?;
            }
        }
        for blk in &self.mid_blocks {
            x = self.run_block(blk, &x, &time_emb, &sentence, cond, &level_masks[n - 1], &mut dropout_rng)?;
        }
        for (di, i) in (0..n).rev().enumerate() {
            let skip = &skips[i];
            x = Tensor::cat(&[&x, skip], 1)?;
            for blk in &self.dec_blocks[di] {
                x = self.run_block(blk, &x, &time_emb, &sentence, cond, &level_masks[i], &mut dropout_rng)?;
            }
            if i > 0 {
                // nearest-neighbor doubling then conv
                let (bb, cc, tt) = x.dims3()?;
                let up = Tensor::cat(&[&x.unsqueeze(3)?, &x.unsqueeze(3)?], 3)?
                    .reshape((bb, cc, 2 * tt))?;
                let (w, bias) = &self.ups[di];
                x = conv1d_same(&up.broadcast_mul(&level_masks[i - 1])?, w, bias, 1)?;
            }
        }
        x = x.broadcast_mul(&level_masks[0])?;
        x = conv1d_same(&x, &self.out_w, &self.out_b, 1)?;
        x = x.broadcast_mul(&level_masks[0])?;
        let x = x.narrow(2, 0, t)?.transpose(1, 2)?.contiguous()?;
        Ok(x)
    }

    /// Total parameter count implied by the configuration; must match the
    /// store after construction.
    pub fn expected_param_count(config: &DenoiserConfig, feature_dim: usize) -> usize {
        let d = config.text_latent_dim;
        let tl = config.time_latent_dim;
        let k = config.kernel_size;
        let chs = config.channels();
        let n = chs.len();
        // text encoder: embedding + 4 layers (2 LayerNorms, 4 square
        // projections, FFN at 4x) + final LayerNorm
        let text_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let text = config.vocab_size * d + crate::condition::TEXT_ENCODER_LAYERS * text_layer + 2 * d;
        // time MLP + null embedding
        let time = 2 * (tl * tl + tl) + d;
        let block = |in_ch: usize, out_ch: usize| -> usize {
            let mut p = 2 * in_ch; // gn1
            p += out_ch * in_ch * k + out_ch; // conv1
            p += (tl + d) * 2 * out_ch + 2 * out_ch; // film
            p += 2 * out_ch; // gn2
            p += out_ch * out_ch * k + out_ch; // conv2
            if in_ch != out_ch {
                p += out_ch * in_ch + out_ch; // residual 1x1
            }
            // attention: q/o convs at out_ch, k/v from text latent
            p += 2 * (out_ch * out_ch + out_ch) + 2 * (d * out_ch + out_ch);
            p
        };
        let mut total = text + time;
        total += chs[0] * feature_dim + chs[0]; // in_proj
        let mut cur = chs[0];
        for (i, &ch) in chs.iter().enumerate() {
            total += block(cur, ch) + block(ch, ch);
            cur = ch;
            if i + 1 < n {
                total += ch * ch * k + ch; // down
            }
        }
        total += 2 * block(cur, cur); // bottleneck
        for i in (0..n).rev() {
            total += block(cur + chs[i], chs[i]) + block(chs[i], chs[i]);
            cur = chs[i];
            if i > 0 {
                total += cur * cur * k + cur; // up
            }
        }
        total += feature_dim * chs[0] + feature_dim; // out_proj
        total
    }
}

fn attention_forward(
    attn: &AttnParams,
    x: &Tensor,
    cond: &ConditionEmbedding,
    heads: usize,
    dtype: DType,
) -> Result<(Tensor, bool)> {
    let (b, c, t) = x.dims3()?;
    let l = cond.token_mask.first().map(|r| r.len()).unwrap_or(0);
    if cond.batch_size() != b {
        return Err(Error::Shape("condition batch mismatch".into()));
    }
    let hd = c / heads;
    let dev = x.device();

    let q = conv1d_same(x, &attn.wq, &attn.bq, 1)?; // (B,C,T)
    let tokens = cond.tokens.to_dtype(dtype)?;
    let kk = tokens.broadcast_matmul(&attn.wk)?.broadcast_add(&attn.bk)?; // (B,L,C)
    let vv = tokens.broadcast_matmul(&attn.wv)?.broadcast_add(&attn.bv)?;

    let q = q.reshape((b, heads, hd, t))?.transpose(2, 3)?.contiguous()?; // (B,H,T,hd)
    let split_tok = |t_: &Tensor| -> Result<Tensor> {
        Ok(t_.reshape((b, l, heads, hd))?.transpose(1, 2)?.contiguous()?) // (B,H,L,hd)
    };
    let kk = split_tok(&kk)?;
    let vv = split_tok(&vv)?;

    let mask_f: Vec<f32> = cond
        .token_mask
        .iter()
        .flat_map(|row| row.iter().map(|&m| if m { 1.0f32 } else { 0.0 }))
        .collect();
    let key_mask = Tensor::from_vec(mask_f, (b, 1, l, 1), dev)?.to_dtype(dtype)?;

    let pk = phi(&kk)?.broadcast_mul(&key_mask)?; // masked keys removed
    let pq = phi(&q)?;
    let vv = vv.broadcast_mul(&key_mask)?;
    let kv = pk.transpose(2, 3)?.contiguous()?.matmul(&vv)?; // (B,H,hd,hd)
    let num = pq.matmul(&kv)?; // (B,H,T,hd)
    let ksum = pk.sum_keepdim(2)?.transpose(2, 3)?.contiguous()?; // (B,H,hd,1)
    let den = pq.matmul(&ksum)?; // (B,H,T,1)
    // at half precision normalize in f32: the 1e-12 floor flushes to zero
    // in f16 and an all-masked key row would divide 0/0
    let out = if dtype == DType::F16 {
        num.to_dtype(DType::F32)?
            .broadcast_div(&(den.to_dtype(DType::F32)? + 1e-12)?)?
            .to_dtype(dtype)?
    } else {
        num.broadcast_div(&(den + 1e-12)?)?
    };
    let out = out.transpose(2, 3)?.contiguous()?.reshape((b, c, t))?;
    let out = conv1d_same(&out, &attn.wo, &attn.bo, 1)?;

    // zero the residual for null samples and flag all-masked live samples
    let mut any_degenerate = false;
    let gate: Vec<f32> = cond
        .token_mask
        .iter()
        .zip(&cond.is_null)
        .map(|(row, &null)| {
            let any = row.iter().any(|&m| m);
            if !any && !null {
                any_degenerate = true;
            }
            if any && !null {
                1.0f32
            } else {
                0.0
            }
        })
        .collect();
    let gate = Tensor::from_vec(gate, (b, 1, 1), dev)?.to_dtype(dtype)?;
    let y = (x + out.broadcast_mul(&gate)?)?;
    Ok((y, any_degenerate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::{ConditionEmbedding, Vocab, MAX_TOKENS};
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn tiny_config(vocab: usize) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            kernel_size: 3,
            groups: 2,
            attention_heads: 2,
            dropout: 0.0,
            text_latent_dim: 8,
            time_latent_dim: 8,
            vocab_size: vocab,
        }
    }

    fn build(dtype: DType) -> (CondUNet1D, ParamStore, Vocab) {
        let vocab = Vocab::build(["a person walks forward", "a person squats"]);
        let mut ps = ParamStore::with_dtype(Device::Cpu, dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = tiny_config(vocab.len());
        let model = CondUNet1D::new(&mut ps, &mut rng, &cfg, 6).unwrap();
        (model, ps, vocab)
    }

    fn full_mask(b: usize, t: usize) -> Vec<Vec<bool>> {
        vec![vec![true; t]; b]
    }

    #[test]
    fn param_count_formula_matches() {
        let (_, ps, _) = build(DType::F32);
        let cfg = tiny_config(Vocab::build(["a person walks forward", "a person squats"]).len());
        assert_eq!(ps.param_count(), CondUNet1D::expected_param_count(&cfg, 6));
        let desk = DenoiserConfig::desk(64);
        let mut ps2 = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m2 = CondUNet1D::new(&mut ps2, &mut rng, &desk, 36).unwrap();
        assert_eq!(ps2.param_count(), CondUNet1D::expected_param_count(&m2.config, 36));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(10);
        c.base_channels = 9;
        assert!(c.validate().is_err());
        let mut c = tiny_config(10);
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        let mut c = tiny_config(10);
        c.channel_multipliers.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn timestep_encoding_properties() {
        let (model, _, _) = build(DType::F32);
        let a = model.encode_timestep(&[5.0]).unwrap();
        let b = model.encode_timestep(&[5.0]).unwrap();
        assert_eq!(
            a.to_vec2::<f32>().unwrap(),
            b.to_vec2::<f32>().unwrap(),
            "deterministic in t"
        );
        let c = model.encode_timestep(&[900.0]).unwrap();
        let av = a.to_vec2::<f32>().unwrap();
        let cv = c.to_vec2::<f32>().unwrap();
        assert!(av[0].iter().zip(&cv[0]).any(|(x, y)| (x - y).abs() > 1e-4));
        // fractional t accepted
        model.encode_timestep(&[2.5]).unwrap();
    }

    #[test]
    fn film_identity_and_doubling() {
        let dev = Device::Cpu;
        let x = Tensor::from_slice(&[1.0f32, 2.0, 3.0, 4.0], (1, 2, 2), &dev).unwrap();
        let zero = Tensor::zeros((1, 2), DType::F32, &dev).unwrap();
        let one = Tensor::ones((1, 2), DType::F32, &dev).unwrap();
        let id = film_modulate(&x, &zero, &zero).unwrap();
        assert_eq!(id.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let dbl = film_modulate(&x, &one, &zero).unwrap();
        assert_eq!(dbl.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
        // identical frames stay identical (frame-uniform modulation)
        let same = Tensor::from_slice(&[1.0f32, 1.0, 5.0, 5.0], (1, 2, 2), &dev).unwrap();
        let sc = Tensor::from_slice(&[0.3f32, -0.2], (1, 2), &dev).unwrap();
        let sh = Tensor::from_slice(&[0.1f32, 0.7], (1, 2), &dev).unwrap();
        let out = film_modulate(&same, &sc, &sh).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[2], v[3]);
    }

    #[test]
    fn groupnorm_constant_groups_zeroed() {
        let dev = Device::Cpu;
        // 4 channels, 2 groups; each group constant per frame
        let x = Tensor::from_slice(
            &[2.0f32, 2.0, -3.0, -3.0],
            (1, 4, 1),
            &dev,
        )
        .unwrap();
        let gamma = Tensor::ones((4,), DType::F32, &dev).unwrap();
        let beta = Tensor::zeros((4,), DType::F32, &dev).unwrap();
        let out = groupnorm_featurewise(&x, 2, &gamma, &beta, None).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
        assert!(groupnorm_featurewise(&x, 3, &gamma, &beta, None).is_err());
    }

    #[test]
    fn groupnorm_group1_equals_layernorm() {
        let dev = Device::Cpu;
        let vals = [1.0f32, -2.0, 0.5, 3.0];
        let x = Tensor::from_slice(&vals, (1, 4, 1), &dev).unwrap();
        let gamma = Tensor::ones((4,), DType::F32, &dev).unwrap();
        let beta = Tensor::zeros((4,), DType::F32, &dev).unwrap();
        let out = groupnorm_featurewise(&x, 1, &gamma, &beta, None)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let mean: f32 = vals.iter().sum::<f32>() / 4.0;
        let var: f32 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        for (o, v) in out.iter().zip(&vals) {
            assert!((o - (v - mean) / (var + 1e-5).sqrt()).abs() < 1e-5);
        }
    }

    #[test]
    fn groupnorm_padding_invariance() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = crate::tensor::randn(&mut rng, (1usize, 4usize, 5usize), DType::F32, &dev).unwrap();
        let pad = Tensor::zeros((1, 4, 100), DType::F32, &dev).unwrap();
        let xp = Tensor::cat(&[&x, &pad], 2).unwrap();
        let gamma = Tensor::ones((4,), DType::F32, &dev).unwrap();
        let beta = Tensor::zeros((4,), DType::F32, &dev).unwrap();
        let a = groupnorm_featurewise(&x, 2, &gamma, &beta, None).unwrap();
        let b = groupnorm_featurewise(&xp, 2, &gamma, &beta, None).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bv = b.narrow(2, 0, 5).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(av, bv, "bit-identical on valid frames");
    }

    fn null_cond(model: &CondUNet1D, b: usize) -> ConditionEmbedding {
        let dev = Device::Cpu;
        ConditionEmbedding {
            sentence: Tensor::zeros((b, model.config.text_latent_dim), model.dtype, &dev).unwrap(),
            tokens: Tensor::zeros((b, MAX_TOKENS, model.config.text_latent_dim), model.dtype, &dev)
                .unwrap(),
            token_mask: vec![vec![false; MAX_TOKENS]; b],
            is_null: vec![true; b],
        }
    }

    #[test]
    fn attention_null_is_identity() {
        let (model, _, _) = build(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = crate::tensor::randn(&mut rng, (2usize, 8usize, 6usize), DType::F32, &Device::Cpu)
            .unwrap();
        let cond = null_cond(&model, 2);
        let (y, flag) = model.residual_linear_cross_attention(0, &x, &cond).unwrap();
        assert!(!flag);
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            "null condition must be exact identity"
        );
        // all-masked but not null: identity plus a flag
        let mut cond = null_cond(&model, 2);
        cond.is_null = vec![false, false];
        let (y, flag) = model.residual_linear_cross_attention(0, &x, &cond).unwrap();
        assert!(flag);
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn attention_single_key_weights() {
        // with one unmasked token the kernel weights collapse to 1, so the
        // per-frame context is exactly that token's value projection
        let (model, _, vocab) = build(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dev = Device::Cpu;
        let x = crate::tensor::randn(&mut rng, (1usize, 8usize, 3usize), DType::F32, &dev).unwrap();
        let tokens =
            crate::tensor::randn(&mut rng, (1usize, MAX_TOKENS, 8usize), DType::F32, &dev).unwrap();
        let mut mask = vec![false; MAX_TOKENS];
        mask[0] = true;
        let _ = vocab;
        let cond = ConditionEmbedding {
            sentence: Tensor::zeros((1, 8), DType::F32, &dev).unwrap(),
            tokens: tokens.clone(),
            token_mask: vec![mask],
            is_null: vec![false],
        };
        let (y, _) = model.residual_linear_cross_attention(0, &x, &cond).unwrap();
        // oracle: out = x + wo(v1) broadcast to every frame
        let blk = model.block_by_index(0).unwrap();
        let t0 = tokens.narrow(1, 0, 1).unwrap(); // (1,1,8)
        let v1 = t0
            .broadcast_matmul(&blk.attn.wv)
            .unwrap()
            .broadcast_add(&blk.attn.bv)
            .unwrap(); // (1,1,8)
        let v1 = v1.transpose(1, 2).unwrap().contiguous().unwrap(); // (1,8,1)
        let v1 = v1.broadcast_as((1, 8, 3)).unwrap().contiguous().unwrap();
        let expect = (x.clone() + conv1d_same(&v1, &blk.attn.wo, &blk.attn.bo, 1).unwrap()).unwrap();
        let got = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let exp = expect.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (g, e) in got.iter().zip(&exp) {
            assert!((g - e).abs() < 2e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn attention_matches_dense_oracle() {
        // tiny dims: brute-force the kernelized formula per frame and head
        let (model, _, _) = build(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dev = Device::Cpu;
        let b = 1;
        let c = 8;
        let t = 2;
        let x = crate::tensor::randn(&mut rng, (b, c, t), DType::F32, &dev).unwrap();
        let tokens =
            crate::tensor::randn(&mut rng, (b, MAX_TOKENS, 8usize), DType::F32, &dev).unwrap();
        let mut mask = vec![false; MAX_TOKENS];
        for m in mask.iter_mut().take(3) {
            *m = true;
        }
        let cond = ConditionEmbedding {
            sentence: Tensor::zeros((b, 8), DType::F32, &dev).unwrap(),
            tokens: tokens.clone(),
            token_mask: vec![mask.clone()],
            is_null: vec![false],
        };
        let (y, _) = model.residual_linear_cross_attention(0, &x, &cond).unwrap();

        let blk = model.block_by_index(0).unwrap();
        let heads = 2;
        let hd = c / heads;
        let q = conv1d_same(&x, &blk.attn.wq, &blk.attn.bq, 1).unwrap();
        let k = tokens
            .broadcast_matmul(&blk.attn.wk)
            .unwrap()
            .broadcast_add(&blk.attn.bk)
            .unwrap();
        let v = tokens
            .broadcast_matmul(&blk.attn.wv)
            .unwrap()
            .broadcast_add(&blk.attn.bv)
            .unwrap();
        let qv = q.to_vec3::<f32>().unwrap(); // (B,C,T)
        let kvv = k.to_vec3::<f32>().unwrap(); // (B,L,C)
        let vvv = v.to_vec3::<f32>().unwrap();
        let phi_s = |u: f32| -> f64 {
            let u = u as f64;
            if u > 0.0 {
                u + 1.0
            } else {
                u.exp()
            }
        };
        let mut ctx = vec![vec![0.0f32; t]; c];
        for h in 0..heads {
            for fi in 0..t {
                for d_out in 0..hd {
                    let mut num = 0.0f64;
                    let mut den = 0.0f64;
                    // accumulate over keys; weights normalize to 1
                    for (l, &mk) in mask.iter().enumerate() {
                        if !mk {
                            continue;
                        }
                        let mut dot = 0.0f64;
                        for di in 0..hd {
                            dot += phi_s(qv[0][h * hd + di][fi]) * phi_s(kvv[0][l][h * hd + di]);
                        }
                        num += dot * vvv[0][l][h * hd + d_out] as f64;
                        den += dot;
                    }
                    ctx[h * hd + d_out][fi] = (num / (den + 1e-12)) as f32;
                }
            }
        }
        let flat: Vec<f32> = ctx.iter().flatten().copied().collect();
        let ctx_t = Tensor::from_vec(flat, (1, c, t), &dev).unwrap();
        let expect =
            (x.clone() + conv1d_same(&ctx_t, &blk.attn.wo, &blk.attn.bo, 1).unwrap()).unwrap();
        let got = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let exp = expect.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (g, e) in got.iter().zip(&exp) {
            assert!((g - e).abs() < 1e-4, "{g} vs {e}");
        }
    }

    #[test]
    fn conv_block_receptive_field() {
        let (model, _, _) = build(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dev = Device::Cpu;
        let t = 16;
        let x = crate::tensor::randn(&mut rng, (1usize, 8usize, t), DType::F32, &dev).unwrap();
        let cond = null_cond(&model, 1);
        let time_emb = model.encode_timestep(&[10.0]).unwrap();
        let mask = Tensor::ones((1, 1, t), DType::F32, &dev).unwrap();
        let base = model.conv_block(0, &x, &time_emb, &cond, &mask).unwrap();
        // poke frame 8; two k=3 convs give radius 2
        let mut xv = x.to_vec3::<f32>().unwrap();
        for ch in xv[0].iter_mut() {
            ch[8] += 1.0;
        }
        let flat: Vec<f32> = xv[0].iter().flatten().copied().collect();
        let x2 = Tensor::from_vec(flat, (1, 8, t), &dev).unwrap();
        let out = model.conv_block(0, &x2, &time_emb, &cond, &mask).unwrap();
        let a = base.to_vec3::<f32>().unwrap();
        let b = out.to_vec3::<f32>().unwrap();
        for fi in 0..t {
            let changed = (0..8).any(|ci| (a[0][ci][fi] - b[0][ci][fi]).abs() > 1e-6);
            let within = (fi as i64 - 8).abs() <= 2;
            if within {
                continue;
            }
            assert!(!changed, "frame {fi} outside the kernel radius changed");
        }
        // the poked frame itself must change
        assert!((0..8).any(|ci| (a[0][ci][8] - b[0][ci][8]).abs() > 1e-6));
    }

    #[test]
    fn conv_block_near_identity_at_init() {
        // zero-init second conv and no channel change: output = x + attention
        // residual; with a null condition that collapses to exactly x
        let (model, _, _) = build(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dev = Device::Cpu;
        let x = crate::tensor::randn(&mut rng, (1usize, 8usize, 8usize), DType::F32, &dev).unwrap();
        let cond = null_cond(&model, 1);
        let time_emb = model.encode_timestep(&[3.0]).unwrap();
        let mask = Tensor::ones((1, 1, 8), DType::F32, &dev).unwrap();
        let y = model.conv_block(1, &x, &time_emb, &cond, &mask).unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in xv.iter().zip(&yv) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    fn encode(model: &CondUNet1D, vocab: &Vocab, prompts: &[Option<&str>]) -> ConditionEmbedding {
        model.text_encoder.encode(prompts, vocab).unwrap()
    }

    #[test]
    fn denoise_shape_and_determinism() {
        let (model, _, vocab) = build(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = crate::tensor::randn(&mut rng, (2usize, 12usize, 6usize), DType::F32, &Device::Cpu)
            .unwrap();
        let cond = encode(&model, &vocab, &[Some("a person walks forward"), None]);
        let mask = full_mask(2, 12);
        let a = model.denoise(&x, &[5.0, 700.0], &cond, &mask, None).unwrap();
        assert_eq!(a.dims(), &[2, 12, 6]);
        let b = model.denoise(&x, &[5.0, 700.0], &cond, &mask, None).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        // translation must change the output (no spurious invariance)
        let shifted = x.affine(1.0, 0.5).unwrap();
        let c = model.denoise(&shifted, &[5.0, 700.0], &cond, &mask, None).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let cv = c.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(av.iter().zip(&cv).any(|(x, y)| (x - y).abs() > 1e-5));
    }

    #[test]
    fn denoise_null_ignores_token_content() {
        let (model, _, _) = build(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dev = Device::Cpu;
        let x = crate::tensor::randn(&mut rng, (1usize, 8usize, 6usize), DType::F32, &dev).unwrap();
        let mut cond_a = null_cond(&model, 1);
        let mut cond_b = null_cond(&model, 1);
        // different garbage in the token matrices; is_null must hide it
        cond_a.tokens =
            crate::tensor::randn(&mut rng, (1usize, MAX_TOKENS, 8usize), DType::F32, &dev).unwrap();
        cond_b.tokens =
            crate::tensor::randn(&mut rng, (1usize, MAX_TOKENS, 8usize), DType::F32, &dev).unwrap();
        let mask = full_mask(1, 8);
        let a = model.denoise(&x, &[100.0], &cond_a, &mask, None).unwrap();
        let b = model.denoise(&x, &[100.0], &cond_b, &mask, None).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            "null output must be bitwise independent of token content"
        );
    }

    #[test]
    fn denoise_padding_invariance() {
        let (model, _, vocab) = build(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dev = Device::Cpu;
        let valid = 11;
        let x = crate::tensor::randn(&mut rng, (1usize, valid, 6usize), DType::F32, &dev).unwrap();
        let cond = encode(&model, &vocab, &[Some("a person squats")]);
        let run = |total: usize| -> Vec<f32> {
            let pad = Tensor::zeros((1, total - valid, 6), DType::F32, &dev).unwrap();
            let xt = Tensor::cat(&[&x, &pad], 1).unwrap();
            let mut mask = vec![vec![false; total]; 1];
            for v in mask[0].iter_mut().take(valid) {
                *v = true;
            }
            let out = model.denoise(&xt, &[40.0], &cond, &mask, None).unwrap();
            out.narrow(1, 0, valid)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        let a = run(16);
        let b = run(32);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "padding changed a valid frame: {x} vs {y}");
        }
    }

    #[test]
    fn denoise_rejects_bad_shapes() {
        let (model, _, vocab) = build(DType::F32);
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 8, 5), DType::F32, &dev).unwrap();
        let cond = encode(&model, &vocab, &[Some("a person squats")]);
        assert!(model.denoise(&x, &[1.0], &cond, &full_mask(1, 8), None).is_err());
        let x = Tensor::zeros((1, 8, 6), DType::F32, &dev).unwrap();
        assert!(model.denoise(&x, &[1.0, 2.0], &cond, &full_mask(1, 8), None).is_err());
        assert!(model
            .denoise(&x, &[1.0], &cond, &[vec![false; 8]], None)
            .is_err());
    }

    #[test]
    fn dropout_is_rng_driven() {
        let vocab = Vocab::build(["a person walks forward"]);
        let mut cfg = tiny_config(vocab.len());
        cfg.dropout = 0.5;
        let mut ps = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = CondUNet1D::new(&mut ps, &mut rng, &cfg, 6).unwrap();
        // the zero-init second conv hides dropout at init; give it weight
        let mut wr = ChaCha8Rng::seed_from_u64(1);
        let w = crate::tensor::randn(&mut wr, (8usize, 8usize, 3usize), DType::F32, &Device::Cpu)
            .unwrap()
            .affine(0.1, 0.0)
            .unwrap();
        ps.set("enc0.block0.conv2.w", &w).unwrap();
        let mut xr = ChaCha8Rng::seed_from_u64(0);
        let x =
            crate::tensor::randn(&mut xr, (1usize, 8usize, 6usize), DType::F32, &Device::Cpu)
                .unwrap();
        let cond = model.text_encoder.encode(&[Some("a person walks forward")], &vocab).unwrap();
        let mask = full_mask(1, 8);
        let mut d1 = ChaCha8Rng::seed_from_u64(42);
        let mut d2 = ChaCha8Rng::seed_from_u64(42);
        let mut d3 = ChaCha8Rng::seed_from_u64(43);
        let a = model.denoise(&x, &[9.0], &cond, &mask, Some(&mut d1)).unwrap();
        let b = model.denoise(&x, &[9.0], &cond, &mask, Some(&mut d2)).unwrap();
        let c = model.denoise(&x, &[9.0], &cond, &mask, Some(&mut d3)).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let cv = c.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(av, bv, "same dropout seed, same output");
        assert!(av.iter().zip(&cv).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn gradient_check_finite_differences() {
        // f64 model against central differences on a small batch
        let (model, ps, vocab) = build(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dev = Device::Cpu;
        let x = crate::tensor::randn(&mut rng, (1usize, 16usize, 6usize), DType::F32, &dev)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let mask = full_mask(1, 16);
        let target = crate::tensor::randn(&mut rng, (1usize, 16usize, 6usize), DType::F32, &dev)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        // the condition must be re-encoded per evaluation so perturbations
        // of text-encoder parameters show up in the finite differences
        let loss_of = |model: &CondUNet1D| -> f64 {
            let cond = encode(model, &vocab, &[Some("a person walks forward")]);
            let out = model.denoise(&x, &[37.0], &cond, &mask, None).unwrap();
            (out - &target)
                .unwrap()
                .sqr()
                .unwrap()
                .mean_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let cond = encode(&model, &vocab, &[Some("a person walks forward")]);
        let out = model.denoise(&x, &[37.0], &cond, &mask, None).unwrap();
        let loss = (out - &target).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();

        // probe a few entries spread across distinct parameter tensors
        let probes = [
            ("enc0.block0.conv1.w", 3usize),
            ("mid.block1.film.w", 17),
            ("dec1.block0.gn1.g", 2),
            ("in_proj.w", 5),
            ("time.w1", 11),
            ("text.layer2.q.w", 7),
            ("enc1.block1.attn.k.w", 9),
            ("null_sentence", 1),
        ];
        let eps = 1e-5;
        for (name, idx) in probes {
            let var = ps.var(name).unwrap();
            let g = grads
                .get(var)
                .unwrap_or_else(|| panic!("no grad for {name}"))
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let dims = var.dims().to_vec();
            let bump = |delta: f64| {
                let mut v = orig.clone();
                v[idx] += delta;
                let t = Tensor::from_vec(v, dims.clone(), &dev).unwrap();
                var.set(&t).unwrap();
            };
            bump(eps);
            let up = loss_of(&model);
            bump(-eps);
            let down = loss_of(&model);
            bump(0.0);
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(g[idx].abs()).max(1e-8);
            let rel = (fd - g[idx]).abs() / denom;
            assert!(rel < 1e-4, "{name}[{idx}]: autograd {} vs fd {fd} (rel {rel})", g[idx]);
        }
        let _ = loss;
    }
}
