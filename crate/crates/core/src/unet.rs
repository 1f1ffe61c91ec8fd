//! Noise-prediction U-Net: encoder blocks, a middle block and decoder
//! blocks with concatenated skips, timestep injection per residual block
//! and cross-attention over the condition sequence.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionBatch, TimestepEmbedder};
use crate::error::{Error, Result};
use crate::nn::{silu, upsample2x, Conv2d, CrossAttention, GroupNorm, Linear, ParamStore, GROUPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width of each resolution level; its length is the block count.
    pub widths: Vec<usize>,
    pub cond_dim: usize,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            widths: vec![32, 64, 64, 128],
            cond_dim: 64,
            time_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("U-Net needs at least one block".into()));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % GROUPS != 0) {
            return Err(Error::Config(format!("width {w} is not a positive multiple of {GROUPS}")));
        }
        if self.in_channels == 0 || self.cond_dim == 0 {
            return Err(Error::Config("in_channels and cond_dim must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    /// Spatial divisibility the input is padded to.
    pub fn multiple(&self) -> usize {
        1 << (self.blocks() - 1)
    }

    fn temb_dim(&self) -> usize {
        4 * self.widths[0]
    }

    fn has_attention(level: usize) -> bool {
        level >= 1
    }

    /// Decoder input widths (after skip concatenation) and output widths, deepest first.
    fn decoder_widths(&self) -> Vec<(usize, usize)> {
        let n = self.blocks();
        (0..n)
            .rev()
            .map(|level| {
                let below = if level + 1 == n { self.widths[n - 1] } else { self.widths[level + 1] };
                (below + self.widths[level], self.widths[level])
            })
            .collect()
    }
}

/// Largest head count `≤ max(1, width/32)` that divides `width`.
fn head_count(width: usize) -> usize {
    (1..=(width / 32).max(1)).rev().find(|h| width % h == 0).unwrap_or(1)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1)?,
            temb: Linear::new(ps, &format!("{name}.temb"), temb_dim, cout, true)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn param_count(cin: usize, cout: usize, temb_dim: usize) -> usize {
        GroupNorm::param_count(cin)
            + Conv2d::param_count(cin, cout, 3)
            + Linear::param_count(temb_dim, cout, true)
            + GroupNorm::param_count(cout)
            + Conv2d::param_count(cout, cout, 3)
            + if cin != cout { Conv2d::param_count(cin, cout, 1) } else { 0 }
    }

    /// `temb` is the activated timestep embedding, `(B, temb_dim)`.
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let t = self.temb.forward(temb)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct Level {
    res: ResBlock,
    attn: Option<CrossAttention>,
}

impl Level {
    fn forward(&self, x: &Tensor, temb: &Tensor, cond: &ConditionBatch) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.attn {
            Some(a) => a.forward(&h, &cond.sequence, cond.mask_bias.as_ref()),
            None => Ok(h),
        }
    }
}

pub struct UNet {
    pub config: UNetConfig,
    time: TimestepEmbedder,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(ps: &mut ParamStore, name: &str, config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let n = config.blocks();
        let td = config.temb_dim();
        let w = &config.widths;
        let d = config.cond_dim;
        let time = TimestepEmbedder::new(ps, &format!("{name}.time"), config.time_dim, td)?;
        let conv_in = Conv2d::new(ps, &format!("{name}.conv_in"), config.in_channels, w[0], 3, 1)?;
        let mut down = Vec::with_capacity(n);
        let mut downsample = Vec::with_capacity(n.saturating_sub(1));
        let mut cin = w[0];
        for (i, &cout) in w.iter().enumerate() {
            let p = format!("{name}.down.{i}");
            down.push(Level {
                res: ResBlock::new(ps, &format!("{p}.res"), cin, cout, td)?,
                attn: if UNetConfig::has_attention(i) {
                    Some(CrossAttention::new(ps, &format!("{p}.attn"), cout, d, head_count(cout))?)
                } else {
                    None
                },
            });
            if i + 1 < n {
                downsample.push(Conv2d::new(ps, &format!("{p}.downsample"), cout, cout, 3, 2)?);
            }
            cin = cout;
        }
        let wm = w[n - 1];
        let mid1 = ResBlock::new(ps, &format!("{name}.mid.res1"), wm, wm, td)?;
        let mid_attn = CrossAttention::new(ps, &format!("{name}.mid.attn"), wm, d, head_count(wm))?;
        let mid2 = ResBlock::new(ps, &format!("{name}.mid.res2"), wm, wm, td)?;
        let mut up = Vec::with_capacity(n);
        for (j, (cin, cout)) in config.decoder_widths().into_iter().enumerate() {
            let level = n - 1 - j;
            let p = format!("{name}.up.{j}");
            up.push(Level {
                res: ResBlock::new(ps, &format!("{p}.res"), cin, cout, td)?,
                attn: if UNetConfig::has_attention(level) {
                    Some(CrossAttention::new(ps, &format!("{p}.attn"), cout, d, head_count(cout))?)
                } else {
                    None
                },
            });
        }
        let norm_out = GroupNorm::new(ps, &format!("{name}.norm_out"), w[0])?;
        let conv_out = Conv2d::new(ps, &format!("{name}.conv_out"), w[0], config.in_channels, 3, 1)?;
        Ok(Self {
            config,
            time,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
        })
    }

    /// Timestep embedding `(B, 4·w0)` before activation.
    pub fn embed_time(&self, ts: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
        self.time.forward(ts, dtype, dev)
    }

    pub fn forward(&self, x: &Tensor, ts: &[usize], cond: &ConditionBatch) -> Result<Tensor> {
        let temb = self.embed_time(ts, x.dtype(), x.device())?;
        self.forward_with_temb(x, &temb, cond)
    }

    /// Predicted noise with the same shape as `x`. Inputs whose spatial
    /// extent is not a multiple of `2^(blocks−1)` are edge-padded and the
    /// output cropped back.
    pub fn forward_with_temb(&self, x: &Tensor, temb: &Tensor, cond: &ConditionBatch) -> Result<Tensor> {
        let (b, c, t, f) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!("input has {c} channels, U-Net expects {}", self.config.in_channels)));
        }
        if temb.dims() != [b, self.config.temb_dim()] {
            return Err(Error::shape(format!("timestep embedding {:?} for batch {b}", temb.dims())));
        }
        if cond.batch_size() != b || cond.sequence.dim(2)? != self.config.cond_dim {
            return Err(Error::shape(format!(
                "condition batch {:?} does not match input batch {b} / width {}",
                cond.sequence.dims(),
                self.config.cond_dim
            )));
        }
        let m = self.config.multiple();
        let (tp, fp) = (t.div_ceil(m) * m, f.div_ceil(m) * m);
        let mut h = x.clone();
        if tp > t {
            h = h.pad_with_same(2, 0, tp - t)?;
        }
        if fp > f {
            h = h.pad_with_same(3, 0, fp - f)?;
        }
        let temb = silu(temb)?;
        let mut h = self.conv_in.forward(&h)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, level) in self.down.iter().enumerate() {
            h = level.forward(&h, &temb, cond)?;
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        h = self.mid_attn.forward(&h, &cond.sequence, cond.mask_bias.as_ref())?;
        h = self.mid2.forward(&h, &temb)?;
        let n = self.up.len();
        for (j, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = level.forward(&h, &temb, cond)?;
            if j + 1 < n {
                h = upsample2x(&h)?;
            }
        }
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?;
        Ok(out.narrow(2, 0, t)?.narrow(3, 0, f)?)
    }
}

/// Exact trainable parameter count of a U-Net built from `config`,
/// including the timestep projection.
pub fn count_params(config: &UNetConfig) -> Result<usize> {
    config.validate()?;
    let n = config.blocks();
    let td = config.temb_dim();
    let w = &config.widths;
    let d = config.cond_dim;
    let mut total = TimestepEmbedder::param_count(config.time_dim, td);
    total += Conv2d::param_count(config.in_channels, w[0], 3);
    let mut cin = w[0];
    for (i, &cout) in w.iter().enumerate() {
        total += ResBlock::param_count(cin, cout, td);
        if UNetConfig::has_attention(i) {
            total += CrossAttention::param_count(cout, d);
        }
        if i + 1 < n {
            total += Conv2d::param_count(cout, cout, 3);
        }
        cin = cout;
    }
    let wm = w[n - 1];
    total += 2 * ResBlock::param_count(wm, wm, td) + CrossAttention::param_count(wm, d);
    for (j, (cin, cout)) in config.decoder_widths().into_iter().enumerate() {
        total += ResBlock::param_count(cin, cout, td);
        if UNetConfig::has_attention(n - 1 - j) {
            total += CrossAttention::param_count(cout, d);
        }
    }
    total += GroupNorm::param_count(w[0]) + Conv2d::param_count(w[0], config.in_channels, 3);
    Ok(total)
}
