//! Text conditioning: a small word vocabulary, a learned token embedding
//! with sinusoidal positions, and a four-layer transformer encoder that
//! produces word-level token features plus a masked-mean sentence vector.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Init, ParamStore};

/// Hard cap on prompt length in tokens.
pub const MAX_TOKENS: usize = 16;

pub const PAD_TOKEN: &str = "<pad>";

/// Word-level vocabulary. Id 0 is reserved for padding.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    pub words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(prompts: I) -> Self {
        let mut words = vec![PAD_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(PAD_TOKEN.to_string(), 0);
        for prompt in prompts {
            for tok in tokenize(prompt) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), words.len());
                    words.push(tok);
                }
            }
        }
        Vocab { words, index }
    }

    /// Rebuild a vocabulary from a stored word list.
    pub fn from_words(words: Vec<String>) -> Self {
        let mut v = Vocab { words, index: HashMap::new() };
        v.reindex();
        v
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unknown token {word:?}")))
    }

    /// Token ids for a prompt, padded to MAX_TOKENS, with the valid mask.
    pub fn encode(&self, prompt: &str) -> Result<(Vec<u32>, Vec<bool>)> {
        let toks = tokenize(prompt);
        if toks.len() > MAX_TOKENS {
            return Err(Error::Vocab(format!(
                "prompt has {} tokens, maximum is {MAX_TOKENS}",
                toks.len()
            )));
        }
        let mut ids = Vec::with_capacity(MAX_TOKENS);
        let mut mask = Vec::with_capacity(MAX_TOKENS);
        for t in &toks {
            ids.push(self.id(t)? as u32);
            mask.push(true);
        }
        while ids.len() < MAX_TOKENS {
            ids.push(0);
            mask.push(false);
        }
        Ok((ids, mask))
    }
}

/// Lowercased whitespace tokenization with punctuation stripped.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '-')
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Encoded condition for one batch of prompts.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    /// (B, text_latent) masked-mean sentence vectors; zero rows for null.
    pub sentence: Tensor,
    /// (B, L, text_latent) word-level features.
    pub tokens: Tensor,
    /// (B, L) key validity; all-false rows are null.
    pub token_mask: Vec<Vec<bool>>,
    /// Per-sample null flags.
    pub is_null: Vec<bool>,
}

impl ConditionEmbedding {
    pub fn batch_size(&self) -> usize {
        self.is_null.len()
    }

    /// Cut the embedding loose from any autograd graph (for caching).
    pub fn detach(&self) -> Self {
        ConditionEmbedding {
            sentence: self.sentence.detach(),
            tokens: self.tokens.detach(),
            token_mask: self.token_mask.clone(),
            is_null: self.is_null.clone(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn concat(a: &Self, b: &Self) -> Result<Self> {
        let mut token_mask = a.token_mask.clone();
        token_mask.extend(b.token_mask.iter().cloned());
        let mut is_null = a.is_null.clone();
        is_null.extend(b.is_null.iter().copied());
        Ok(ConditionEmbedding {
            sentence: Tensor::cat(&[&a.sentence, &b.sentence], 0)?,
            tokens: Tensor::cat(&[&a.tokens, &b.tokens], 0)?,
            token_mask,
            is_null,
        })
    }

    /// Tile a batch `times` over the batch axis.
    pub fn repeat(&self, times: usize) -> Result<Self> {
        if times == 0 {
            return Err(Error::Config("repeat count must be positive".into()));
        }
        let mut out = self.clone();
        for _ in 1..times {
            out = Self::concat(&out, self)?;
        }
        Ok(out)
    }
}

/// Sinusoidal encoding with interleaved (sin, cos) pairs at geometric
/// frequencies. Accepts fractional positions.
pub fn sinusoidal_encoding(pos: f64, dim: usize) -> Vec<f32> {
    assert!(dim >= 2 && dim % 2 == 0, "encoding dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let exponent = if half == 1 { 0.0 } else { i as f64 / (half - 1) as f64 };
        let omega = (10_000.0f64).powf(-exponent);
        out.push((pos * omega).sin() as f32);
        out.push((pos * omega).cos() as f32);
    }
    out
}

/// Softmax over the last axis; the max is detached so the gradient matches
/// plain softmax.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Batched linear layer: x (..., in) times w (in, out) plus b.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(w)?.broadcast_add(b)?)
}

struct EncoderLayer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    ff1_w: Tensor,
    ff1_b: Tensor,
    ff2_w: Tensor,
    ff2_b: Tensor,
}

/// Pre-norm transformer encoder over token embeddings.
pub struct TextEncoder {
    pub dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    embed: Tensor,
    layers: Vec<EncoderLayer>,
    final_g: Tensor,
    final_b: Tensor,
    positions: Tensor,
}

pub const TEXT_ENCODER_LAYERS: usize = 4;

impl TextEncoder {
    /// Registers all parameters under `prefix` in a deterministic order.
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        vocab_size: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "text latent dim {dim} not divisible by {heads} heads"
            )));
        }
        let embed = ps.get(
            &format!("{prefix}.embed"),
            (vocab_size, dim),
            Init::Normal { std: 0.02 },
            rng,
        )?;
        let mut layers = Vec::with_capacity(TEXT_ENCODER_LAYERS);
        for l in 0..TEXT_ENCODER_LAYERS {
            let p = format!("{prefix}.layer{l}");
            let lin = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize|
             -> Result<(Tensor, Tensor)> {
                let w = ps.get(
                    &format!("{p}.{name}.w"),
                    (i, o),
                    Init::KaimingUniform { fan_in: i },
                    rng,
                )?;
                let b = ps.get(&format!("{p}.{name}.b"), (o,), Init::Zeros, rng)?;
                Ok((w, b))
            };
            let ln1_g = ps.get(&format!("{p}.ln1.g"), (dim,), Init::Ones, rng)?;
            let ln1_b = ps.get(&format!("{p}.ln1.b"), (dim,), Init::Zeros, rng)?;
            let (wq, bq) = lin(ps, rng, "q", dim, dim)?;
            let (wk, bk) = lin(ps, rng, "k", dim, dim)?;
            let (wv, bv) = lin(ps, rng, "v", dim, dim)?;
            let (wo, bo) = lin(ps, rng, "o", dim, dim)?;
            let ln2_g = ps.get(&format!("{p}.ln2.g"), (dim,), Init::Ones, rng)?;
            let ln2_b = ps.get(&format!("{p}.ln2.b"), (dim,), Init::Zeros, rng)?;
            let (ff1_w, ff1_b) = lin(ps, rng, "ff1", dim, 4 * dim)?;
            let (ff2_w, ff2_b) = lin(ps, rng, "ff2", 4 * dim, dim)?;
            layers.push(EncoderLayer {
                ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b,
                ff1_w, ff1_b, ff2_w, ff2_b,
            });
        }
        let final_g = ps.get(&format!("{prefix}.final.g"), (dim,), Init::Ones, rng)?;
        let final_b = ps.get(&format!("{prefix}.final.b"), (dim,), Init::Zeros, rng)?;
        let pos_rows: Vec<f32> = (0..MAX_TOKENS)
            .flat_map(|p| sinusoidal_encoding(p as f64, dim))
            .collect();
        let positions = Tensor::from_vec(pos_rows, (MAX_TOKENS, dim), &ps.device)?
            .to_dtype(ps.dtype)?;
        Ok(TextEncoder { dim, heads, vocab_size, embed, layers, final_g, final_b, positions })
    }

    /// Encode a batch of prompts. `None` entries produce null conditions.
    pub fn encode(&self, prompts: &[Option<&str>], vocab: &Vocab) -> Result<ConditionEmbedding> {
        let b = prompts.len();
        if b == 0 {
            return Err(Error::Config("empty prompt batch".into()));
        }
        let mut ids = Vec::with_capacity(b * MAX_TOKENS);
        let mut mask = Vec::with_capacity(b);
        let mut is_null = Vec::with_capacity(b);
        for p in prompts {
            match p {
                Some(text) => {
                    let (row_ids, row_mask) = vocab.encode(text)?;
                    if !row_mask.iter().any(|&m| m) {
                        return Err(Error::Vocab("prompt has no tokens".into()));
                    }
                    ids.extend(row_ids);
                    mask.push(row_mask);
                    is_null.push(false);
                }
                None => {
                    ids.extend(std::iter::repeat(0u32).take(MAX_TOKENS));
                    mask.push(vec![false; MAX_TOKENS]);
                    is_null.push(true);
                }
            }
        }
        self.forward(&ids, &mask, &is_null)
    }

    fn forward(
        &self,
        ids: &[u32],
        mask: &[Vec<bool>],
        is_null: &[bool],
    ) -> Result<ConditionEmbedding> {
        let b = mask.len();
        let dev = self.embed.device();
        let dtype = self.embed.dtype();
        let l = MAX_TOKENS;
        let id_t = Tensor::from_slice(ids, (b * l,), dev)?;
        let x = self.embed.index_select(&id_t, 0)?.reshape((b, l, self.dim))?;
        let mut x = x.broadcast_add(&self.positions.reshape((1, l, self.dim))?)?;

        // additive key mask: 0 on valid tokens, -1e9 on padding
        let neg: Vec<f32> = mask
            .iter()
            .flat_map(|row| row.iter().map(|&m| if m { 0.0f32 } else { -1e9 }))
            .collect();
        let key_bias = Tensor::from_vec(neg, (b, 1, 1, l), dev)?.to_dtype(dtype)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();

        for layer in &self.layers {
            let h = layer_norm(&x, &layer.ln1_g, &layer.ln1_b)?;
            let split = |t: Tensor| -> Result<Tensor> {
                Ok(t.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
            };
            let q = split(linear(&h, &layer.wq, &layer.bq)?)?;
            let k = split(linear(&h, &layer.wk, &layer.bk)?)?;
            let v = split(linear(&h, &layer.wv, &layer.bv)?)?;
            let logits = q
                .matmul(&k.transpose(2, 3)?.contiguous()?)?
                .affine(scale, 0.0)?
                .broadcast_add(&key_bias)?;
            let attn = softmax_last(&logits)?;
            let ctx = attn
                .matmul(&v)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b, l, self.dim))?;
            x = (x + linear(&ctx, &layer.wo, &layer.bo)?)?;
            let h = layer_norm(&x, &layer.ln2_g, &layer.ln2_b)?;
            let ff = linear(&linear(&h, &layer.ff1_w, &layer.ff1_b)?.silu()?, &layer.ff2_w, &layer.ff2_b)?;
            x = (x + ff)?;
        }
        let tokens = layer_norm(&x, &self.final_g, &self.final_b)?;

        // masked mean over valid tokens; null rows come out exactly zero
        let mask_f: Vec<f32> = mask
            .iter()
            .flat_map(|row| row.iter().map(|&m| if m { 1.0f32 } else { 0.0 }))
            .collect();
        let mask_t = Tensor::from_vec(mask_f, (b, l, 1), dev)?.to_dtype(dtype)?;
        let counts = mask_t.sum(1)?.clamp(1.0, f64::INFINITY)?;
        let sentence = tokens
            .broadcast_mul(&mask_t)?
            .sum(1)?
            .broadcast_div(&counts)?;

        Ok(ConditionEmbedding {
            sentence,
            tokens,
            token_mask: mask.to_vec(),
            is_null: is_null.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn build() -> (TextEncoder, Vocab, ParamStore) {
        let vocab = Vocab::build(
            ["a person walks forward", "a person squats up and down"],
        );
        let mut ps = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc =
            TextEncoder::new(&mut ps, &mut rng, "text", vocab.len(), 32, 4).unwrap();
        (enc, vocab, ps)
    }

    #[test]
    fn vocab_ids_and_unknowns() {
        let vocab = Vocab::build(["a person walks forward"]);
        assert_eq!(vocab.id("<pad>").unwrap(), 0);
        assert_eq!(vocab.id("person").unwrap(), 2);
        assert!(vocab.id("backflip").is_err());
        let (ids, mask) = vocab.encode("A PERSON walks.").unwrap();
        assert_eq!(ids.len(), MAX_TOKENS);
        assert_eq!(&ids[..3], &[1, 2, 3]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
    }

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(tokenize("Walks, forward!"), vec!["walks", "forward"]);
        assert_eq!(tokenize("walk-skate"), vec!["walk-skate"]);
    }

    #[test]
    fn sinusoidal_pairs_unit_norm() {
        let enc = sinusoidal_encoding(42.5, 64);
        for pair in enc.chunks(2) {
            let n = pair[0] * pair[0] + pair[1] * pair[1];
            assert!((n - 1.0).abs() < 1e-5);
        }
        // distinguishable endpoints
        let a = sinusoidal_encoding(1.0, 64);
        let b = sinusoidal_encoding(1000.0, 64);
        let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(dot / (na * nb) < 0.99);
    }

    #[test]
    fn softmax_matches_reference() {
        let dev = Device::Cpu;
        let x = Tensor::from_slice(&[1.0f32, 2.0, 3.0, -1e9f32, 0.5, 0.5], (2, 3), &dev).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f32>().unwrap();
        let denom = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()) as f32;
        assert!((s[0][0] - 1.0f32.exp() / denom).abs() < 1e-6);
        assert!((s[0][2] - 3.0f32.exp() / denom).abs() < 1e-6);
        assert!(s[1][0] < 1e-12, "masked logit gets zero weight");
        assert!((s[1][1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn null_condition_contract() {
        let (enc, vocab, _ps) = build();
        let c = enc.encode(&[None, Some("a person walks forward")], &vocab).unwrap();
        assert_eq!(c.is_null, vec![true, false]);
        let s = c.sentence.to_vec2::<f32>().unwrap();
        assert!(s[0].iter().all(|&v| v == 0.0), "null sentence must be zero");
        assert!(s[1].iter().any(|&v| v != 0.0));
        assert!(c.token_mask[0].iter().all(|&m| !m));
    }

    #[test]
    fn pad_content_irrelevant() {
        let (enc, vocab, _ps) = build();
        // same prompt, hand-built id rows differing only in padded positions
        let (ids, mask) = vocab.encode("a person walks").unwrap();
        let mut ids_b = ids.clone();
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                ids_b[i] = (vocab.len() - 1) as u32;
            }
        }
        let a = enc
            .forward(&ids, &[mask.clone()], &[false])
            .unwrap();
        let b = enc.forward(&ids_b, &[mask.clone()], &[false]).unwrap();
        let ta = a.tokens.to_vec3::<f32>().unwrap();
        let tb = b.tokens.to_vec3::<f32>().unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for d in 0..32 {
                    assert!((ta[0][i][d] - tb[0][i][d]).abs() < 1e-5);
                }
            }
        }
        let sa = a.sentence.to_vec2::<f32>().unwrap();
        let sb = b.sentence.to_vec2::<f32>().unwrap();
        for d in 0..32 {
            assert!((sa[0][d] - sb[0][d]).abs() < 1e-5);
        }
    }

    #[test]
    fn different_labels_differ() {
        let (enc, vocab, _ps) = build();
        let c = enc
            .encode(&[Some("a person walks forward"), Some("a person squats up and down")], &vocab)
            .unwrap();
        let s = c.sentence.to_vec2::<f32>().unwrap();
        let diff: f32 = s[0].iter().zip(&s[1]).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn too_long_prompt_rejected() {
        let (enc, vocab, _ps) = build();
        let long = "a ".repeat(MAX_TOKENS + 1);
        assert!(enc.encode(&[Some(&long)], &vocab).is_err());
        assert!(enc.encode(&[Some("unknownword")], &vocab).is_err());
    }
}
