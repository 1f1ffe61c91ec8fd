use candle_core::{Tensor, D};

use super::fused;
use super::conv;
use super::{Init, ParamStore};
use crate::error::{Error, Result};

/// Number of groups used by every group normalization.
pub const GROUPS: usize = 8;

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(fused::silu(x)?)
}

/// Nearest-neighbour 2× upsampling of an NCHW tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(fused::upsample2x(x)?)
}

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[cout, cin, kernel, kernel], Init::FanIn(fan_in))?,
            bias: ps.param(&format!("{name}.bias"), &[cout], Init::Zeros)?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel * kernel + cout
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[fan_out, fan_in], Init::FanIn(fan_in))?,
            bias: if bias {
                Some(ps.param(&format!("{name}.bias"), &[fan_out], Init::Zeros)?)
            } else {
                None
            },
        })
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    /// Applies to the last dimension of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        if channels % GROUPS != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible into {GROUPS} groups")));
        }
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: ps.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    /// Normalizes `(B, C, H, W)` over each group of channels and all positions.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let h = fused::group_standardize(x, GROUPS, 1e-5)?;
        Ok(h
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Multi-head attention from flattened feature-map positions (queries) to a
/// condition sequence (keys and values), added back residually.
pub struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, cond_width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels)?,
            to_q: Linear::new(ps, &format!("{name}.to_q"), channels, channels, false)?,
            to_k: Linear::new(ps, &format!("{name}.to_k"), cond_width, channels, false)?,
            to_v: Linear::new(ps, &format!("{name}.to_v"), cond_width, channels, false)?,
            to_out: Linear::new(ps, &format!("{name}.to_out"), channels, channels, true)?,
            heads,
        })
    }

    pub fn param_count(channels: usize, cond_width: usize) -> usize {
        GroupNorm::param_count(channels)
            + 2 * Linear::param_count(channels, channels, false)
            + Linear::param_count(channels, channels, true)
            - channels * channels
            + 2 * Linear::param_count(cond_width, channels, false)
    }

    /// `x`: `(B, C, H, W)`; `context`: `(B, S, d)`; `mask_bias`: `(B, 1, 1, S)`
    /// additive bias, `0` for real rows and a large negative value for padding.
    pub fn forward(&self, x: &Tensor, context: &Tensor, mask_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = context.dim(1)?;
        let dh = c / self.heads;
        let seq = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.to_q.forward(&seq)?, h * w)?;
        let k = split(self.to_k.forward(context)?, s)?;
        let v = split(self.to_v.forward(context)?, s)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = mask_bias {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, h * w, c))?;
        let out = self.to_out.forward(&out)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn param_counts_match_store() {
        let mut ps = ParamStore::new(DType::F32, 0);
        Conv2d::new(&mut ps, "c", 3, 8, 3, 1).unwrap();
        assert_eq!(ps.num_params(), Conv2d::param_count(3, 8, 3));
        let mut ps = ParamStore::new(DType::F32, 0);
        CrossAttention::new(&mut ps, "a", 16, 12, 2).unwrap();
        assert_eq!(ps.num_params(), CrossAttention::param_count(16, 12));
    }

    #[test]
    fn attention_shapes_and_masking() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let attn = CrossAttention::new(&mut ps, "a", 16, 8, 2).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 16, 4, 2), &dev).unwrap();
        let ctx = Tensor::randn(0f64, 1.0, (2, 3, 8), &dev).unwrap();
        let y = attn.forward(&x, &ctx, None).unwrap();
        assert_eq!(y.dims(), &[2, 16, 4, 2]);
        // masking the last row must equal dropping it
        let mask = Tensor::from_vec(vec![0.0, 0.0, -1e9, 0.0, 0.0, -1e9], (2, 1, 1, 3), &dev).unwrap();
        let masked = attn.forward(&x, &ctx, Some(&mask)).unwrap();
        let dropped = attn.forward(&x, &ctx.narrow(1, 0, 2).unwrap(), None).unwrap();
        let diff = (masked - dropped).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn conv_matches_builtin() {
        let mut ps = ParamStore::new(DType::F64, 2);
        let dev = Device::Cpu;
        for (cin, cout, k, s) in [(3, 5, 3, 1), (3, 5, 3, 2), (4, 2, 1, 1)] {
            let conv = Conv2d::new(&mut ps, &format!("c{cin}{cout}{k}{s}"), cin, cout, k, s).unwrap();
            let x = Tensor::randn(0f64, 1.0, (2, cin, 6, 5), &dev).unwrap();
            let reference = x
                .conv2d(&conv.weight, k / 2, s, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, cout, 1, 1)).unwrap())
                .unwrap();
            let d = (conv.forward(&x).unwrap() - reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn upsample_doubles_spatial_dims() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap()[..4], [0.0, 0.0, 1.0, 1.0]);
    }
}
