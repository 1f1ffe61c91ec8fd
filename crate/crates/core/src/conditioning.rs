//! Condition assembly: a hashed-token text encoder, the sampling-rate
//! embedding table, the null condition and the timestep embedding.

use candle_core::{DType, Device, Tensor};

use crate::dsp::RateSet;
use crate::error::{Error, Result};
use crate::nn::{silu, Init, Linear, ParamStore};
use crate::rng::fnv1a;

pub const COND_DIM: usize = 64;
pub const VOCAB_SIZE: usize = 4096;
pub const MAX_TOKENS: usize = 16;
pub const NULL_TOKEN: u32 = 0;
/// Additive attention bias for padded condition rows.
pub const MASK_BIAS: f64 = -1e9;

/// Lowercase whitespace tokenization into hash buckets `1..V`; bucket 0 is
/// reserved for the null token. Truncates at [`MAX_TOKENS`].
pub fn tokenize(prompt: &str, vocab: usize) -> Vec<u32> {
    let ids: Vec<u32> = prompt
        .split_whitespace()
        .take(MAX_TOKENS)
        .map(|tok| {
            let h = fnv1a(tok.to_lowercase().as_bytes());
            1 + (h % (vocab as u64 - 1)) as u32
        })
        .collect();
    if ids.is_empty() {
        vec![NULL_TOKEN]
    } else {
        ids
    }
}

#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub tokens: Vec<u32>,
    /// `L × d`.
    pub embeddings: Tensor,
}

pub struct TextEncoder {
    token_table: Tensor,
    position_table: Tensor,
    vocab: usize,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::invalid("vocabulary needs at least two buckets"));
        }
        Ok(Self {
            token_table: ps.param(&format!("{name}.tokens"), &[vocab, dim], Init::Normal(1.0))?,
            position_table: ps.param(&format!("{name}.positions"), &[MAX_TOKENS, dim], Init::Normal(0.1))?,
            vocab,
        })
    }

    pub fn param_count(dim: usize, vocab: usize) -> usize {
        (vocab + MAX_TOKENS) * dim
    }

    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens = tokenize(prompt, self.vocab);
        let ids = Tensor::new(tokens.as_slice(), self.token_table.device())?;
        let tok = self.token_table.index_select(&ids, 0)?;
        let pos = self.position_table.narrow(0, 0, tokens.len())?;
        Ok(TextEmbedding {
            tokens,
            embeddings: (tok + pos)?,
        })
    }
}

/// Learned `R × d` table over an ordered rate set.
pub struct RateEmbedding {
    table: Tensor,
    rates: RateSet,
}

impl RateEmbedding {
    pub const PARAM: &'static str = "rate_table";

    pub fn new(ps: &mut ParamStore, name: &str, rates: RateSet, dim: usize) -> Result<Self> {
        let table = ps.param(&format!("{name}.{}", Self::PARAM), &[rates.rates().len(), dim], Init::Normal(1.0))?;
        Ok(Self { table, rates })
    }

    pub fn rates(&self) -> &RateSet {
        &self.rates
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Row of `rate_hz`, shape `d`.
    pub fn embed(&self, rate_hz: u32) -> Result<Tensor> {
        let row = self.rates.config(rate_hz)?.rate_id;
        Ok(self.table.get(row)?)
    }
}

#[derive(Clone, Debug)]
pub struct Condition {
    /// `(L + 1) × d`: text rows followed by the rate row.
    pub sequence: Tensor,
    pub is_null: bool,
}

impl Condition {
    pub fn len(&self) -> usize {
        self.sequence.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rate_row(&self) -> Result<Tensor> {
        Ok(self.sequence.get(self.len() - 1)?)
    }
}

pub fn assemble_condition(text: &TextEmbedding, rate_row: &Tensor) -> Result<Condition> {
    let d = text.embeddings.dim(1)?;
    if rate_row.dims() != [d] {
        return Err(Error::shape(format!(
            "rate embedding has shape {:?}, text width is {d}",
            rate_row.dims()
        )));
    }
    let sequence = Tensor::cat(&[&text.embeddings, &rate_row.unsqueeze(0)?], 0)?;
    Ok(Condition {
        sequence,
        is_null: false,
    })
}

/// Text encoder and rate table together.
pub struct Conditioner {
    pub text: TextEncoder,
    pub rate: RateEmbedding,
    pub dim: usize,
}

impl Conditioner {
    pub fn new(ps: &mut ParamStore, rates: RateSet, dim: usize) -> Result<Self> {
        Ok(Self {
            text: TextEncoder::new(ps, "cond.text", dim, VOCAB_SIZE)?,
            rate: RateEmbedding::new(ps, "cond", rates, dim)?,
            dim,
        })
    }

    pub fn param_count(rates: usize, dim: usize) -> usize {
        TextEncoder::param_count(dim, VOCAB_SIZE) + rates * dim
    }

    pub fn condition(&self, prompt: &str, rate_hz: u32) -> Result<Condition> {
        assemble_condition(&self.text.encode(prompt)?, &self.rate.embed(rate_hz)?)
    }

    /// `c_∅`: the blank-prompt text rows with the same rate row.
    pub fn null_condition(&self, rate_hz: u32) -> Result<Condition> {
        let mut c = self.condition(" ", rate_hz)?;
        c.is_null = true;
        Ok(c)
    }
}

/// Conditions padded to a common length, with an attention bias marking padding.
pub struct ConditionBatch {
    /// `(B, S, d)`.
    pub sequence: Tensor,
    /// `(B, 1, 1, S)`; `None` when no row is padded.
    pub mask_bias: Option<Tensor>,
}

impl ConditionBatch {
    pub fn new(conds: &[&Condition]) -> Result<Self> {
        let first = conds.first().ok_or_else(|| Error::invalid("empty condition batch"))?;
        let d = first.sequence.dim(1)?;
        let dtype = first.sequence.dtype();
        let dev = first.sequence.device().clone();
        let s = conds.iter().map(|c| c.len()).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(conds.len());
        let mut bias = Vec::with_capacity(conds.len() * s);
        for c in conds {
            if c.sequence.dim(1)? != d {
                return Err(Error::shape("conditions in a batch have different widths"));
            }
            let pad = s - c.len();
            let seq = if pad > 0 {
                Tensor::cat(&[&c.sequence, &Tensor::zeros((pad, d), dtype, &dev)?], 0)?
            } else {
                c.sequence.clone()
            };
            rows.push(seq);
            bias.extend(std::iter::repeat(0.0).take(c.len()));
            bias.extend(std::iter::repeat(MASK_BIAS).take(pad));
        }
        let padded = bias.iter().any(|&b| b != 0.0);
        let mask_bias = if padded {
            Some(Tensor::from_vec(bias, (conds.len(), 1, 1, s), &dev)?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self {
            sequence: Tensor::stack(&rows, 0)?,
            mask_bias,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.sequence.dims()[0]
    }
}

/// Standard transformer sinusoid: `sin(t ω_i)` in the first half,
/// `cos(t ω_i)` in the second, `ω_i = 10000^{-i/(d/2)}`.
pub fn sinusoidal(t: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid(format!("timestep embedding width must be even and positive, got {d}")));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

/// Pre-projection timestep embedding for `1 ≤ t ≤ T`.
pub fn embed_timestep(t: usize, d: usize, num_steps: usize) -> Result<Vec<f64>> {
    if t == 0 || t > num_steps {
        return Err(Error::invalid(format!("timestep {t} outside 1..={num_steps}")));
    }
    sinusoidal(t as f64, d)
}

/// Sinusoid followed by a learned `Linear → SiLU → Linear` projection.
pub struct TimestepEmbedder {
    fc1: Linear,
    fc2: Linear,
    sin_dim: usize,
}

impl TimestepEmbedder {
    pub fn new(ps: &mut ParamStore, name: &str, sin_dim: usize, out_dim: usize) -> Result<Self> {
        if sin_dim % 2 != 0 {
            return Err(Error::invalid("timestep embedding width must be even"));
        }
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), sin_dim, out_dim, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), out_dim, out_dim, true)?,
            sin_dim,
        })
    }

    pub fn param_count(sin_dim: usize, out_dim: usize) -> usize {
        Linear::param_count(sin_dim, out_dim, true) + Linear::param_count(out_dim, out_dim, true)
    }

    /// `(B, out_dim)` for a batch of timesteps.
    pub fn forward(&self, ts: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(ts.len() * self.sin_dim);
        for &t in ts {
            flat.extend(sinusoidal(t as f64, self.sin_dim)?);
        }
        let x = Tensor::from_vec(flat, (ts.len(), self.sin_dim), dev)?.to_dtype(dtype)?;
        self.fc2.forward(&silu(&self.fc1.forward(&x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conditioner() -> (ParamStore, Conditioner) {
        let mut ps = ParamStore::new(DType::F32, 11);
        let c = Conditioner::new(&mut ps, RateSet::standard(), COND_DIM).unwrap();
        (ps, c)
    }

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        t.to_vec2::<f32>().unwrap()
    }

    #[test]
    fn prompt_shapes_and_null_canonicalization() {
        let (_, c) = conditioner();
        let e = c.text.encode("a rising chirp").unwrap();
        assert_eq!(e.embeddings.dims(), &[3, COND_DIM]);
        let a = c.text.encode("").unwrap();
        let b = c.text.encode(" ").unwrap();
        assert_eq!(a.tokens, vec![NULL_TOKEN]);
        assert_eq!(rows(&a.embeddings), rows(&b.embeddings));
        assert_eq!(rows(&e.embeddings), rows(&c.text.encode("A Rising  chirp").unwrap().embeddings));
    }

    #[test]
    fn truncates_long_prompts() {
        let long = vec!["word"; 40].join(" ");
        assert_eq!(tokenize(&long, VOCAB_SIZE).len(), MAX_TOKENS);
    }

    #[test]
    fn rate_rows_and_unknown_rate() {
        let (_, c) = conditioner();
        let table = rows(c.rate.table());
        assert_eq!(c.rate.embed(16_000).unwrap().to_vec1::<f32>().unwrap(), table[0]);
        assert_eq!(c.rate.embed(48_000).unwrap().to_vec1::<f32>().unwrap(), table[3]);
        let err = c.rate.embed(44_100).unwrap_err();
        assert!(err.to_string().contains("48000"));
    }

    #[test]
    fn conditions_across_rates_differ_only_in_last_row() {
        let (_, c) = conditioner();
        let conds: Vec<_> = [16_000, 24_000, 32_000, 48_000]
            .iter()
            .map(|&r| rows(&c.condition("a low hum", r).unwrap().sequence))
            .collect();
        for other in &conds[1..] {
            assert_eq!(other.len(), 4);
            assert_eq!(other[..3], conds[0][..3]);
            assert_ne!(other[3], conds[0][3]);
        }
    }

    #[test]
    fn null_condition_shares_rate_row() {
        let (_, c) = conditioner();
        let cond = c.condition("a rising chirp", 32_000).unwrap();
        let null = c.null_condition(32_000).unwrap();
        assert!(null.is_null);
        assert_eq!(null.len(), 2);
        let a = cond.rate_row().unwrap().to_vec1::<f32>().unwrap();
        let b = null.rate_row().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(rows(&null.sequence)[0], rows(&c.text.encode(" ").unwrap().embeddings)[0]);
    }

    #[test]
    fn assemble_rejects_width_mismatch() {
        let (_, c) = conditioner();
        let t = c.text.encode("x").unwrap();
        let bad = Tensor::zeros(COND_DIM + 1, DType::F32, &Device::Cpu).unwrap();
        assert!(assemble_condition(&t, &bad).is_err());
    }

    #[test]
    fn batch_padding_mask() {
        let (_, c) = conditioner();
        let a = c.condition("a b c", 16_000).unwrap();
        let b = c.null_condition(16_000).unwrap();
        let batch = ConditionBatch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.sequence.dims(), &[2, 4, COND_DIM]);
        let m = batch.mask_bias.unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&m[..4], &[0.0; 4]);
        assert_eq!(m[5], 0.0);
        assert!(m[6] < -1e8 && m[7] < -1e8);
    }

    #[test]
    fn sinusoid_at_zero_and_distinctness() {
        let z = sinusoidal(0.0, 8).unwrap();
        assert_eq!(&z[..4], &[0.0; 4]);
        assert_eq!(&z[4..], &[1.0; 4]);
        assert!(sinusoidal(1.0, 7).is_err());
        assert!(embed_timestep(0, 64, 1000).is_err());
        assert!(embed_timestep(1001, 64, 1000).is_err());
        let embs: Vec<_> = (1..=1000).map(|t| embed_timestep(t, 64, 1000).unwrap()).collect();
        let mut min = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d);
            }
        }
        assert!(min > 1e-6, "closest pair distance² {min}");
    }

    #[test]
    fn corpus_captions_have_distinct_token_sequences() {
        use crate::dataset::EventClass;
        let mut seen = std::collections::HashMap::new();
        for class in EventClass::ALL {
            for caption in class.templates() {
                let toks = tokenize(caption, VOCAB_SIZE);
                if let Some(prev) = seen.insert(toks, caption) {
                    panic!("{caption:?} collides with {prev:?}");
                }
            }
        }
    }
}
