//! Elementwise and normalization kernels with hand-written gradients.
//! The composite versions record many intermediate ops and dominate the
//! backward pass on CPU.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op needs a contiguous input".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn unsupported(op: &str) -> candle_core::Error {
    candle_core::Error::Msg(format!("{op} supports f32 and f64"))
}

macro_rules! dispatch {
    ($s:expr, $l:expr, $name:expr, |$x:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(_) => {
                let $x = slice::<f32>($s, $l)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(_) => {
                let $x = slice::<f64>($s, $l)?;
                CpuStorage::F64($body)
            }
            _ => return Err(unsupported($name)),
        }
    };
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct Silu;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "fused-silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch!(s, l, "silu", |x| x.iter().map(|&v| v * sigmoid(v)).collect());
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let pair = Tensor::stack(&[arg.contiguous()?, grad.contiguous()?], 0)?;
        Ok(Some(pair.apply_op1_no_bwd(&SiluGrad)?))
    }
}

/// Input `(2, ...)` holding `[x, dy]`; output `dy · silu'(x)`.
struct SiluGrad;

impl CustomOp1 for SiluGrad {
    fn name(&self) -> &'static str {
        "fused-silu-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Float>(v: &[T]) -> Vec<T> {
            let (x, g) = v.split_at(v.len() / 2);
            x.iter()
                .zip(g)
                .map(|(&x, &g)| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })
                .collect()
        }
        let out = dispatch!(s, l, "silu", |v| run(v));
        Ok((out, Shape::from(&l.dims()[1..])))
    }
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

/// Nearest-neighbour 2× upsampling of `(B, C, H, W)`.
struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Copy>(x: &[T], h: usize, w: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(x.len() * 4);
            for plane in x.chunks_exact(h * w) {
                for row in plane.chunks_exact(w) {
                    for _ in 0..2 {
                        for &v in row {
                            out.push(v);
                            out.push(v);
                        }
                    }
                }
            }
            out
        }
        let d = l.dims();
        let (h, w) = (d[2], d[3]);
        let out = dispatch!(s, l, "upsample2x", |x| run(x, h, w));
        Ok((out, Shape::from((d[0], d[1], 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Pool2x)?))
    }
}

/// 2×2 sum pooling, the adjoint of [`Upsample2x`].
struct Pool2x;

impl CustomOp1 for Pool2x {
    fn name(&self) -> &'static str {
        "sum-pool2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Float>(x: &[T], h: usize, w: usize) -> Vec<T> {
            let (ho, wo) = (h / 2, w / 2);
            let mut out = vec![T::zero(); x.len() / 4];
            for (p, plane) in x.chunks_exact(h * w).enumerate() {
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..h {
                    let row = &plane[i * w..(i + 1) * w];
                    let drow = &mut dst[(i / 2) * wo..(i / 2 + 1) * wo];
                    for j in 0..w {
                        drow[j / 2] = drow[j / 2] + row[j];
                    }
                }
            }
            out
        }
        let d = l.dims();
        let (h, w) = (d[2], d[3]);
        let out = dispatch!(s, l, "pool2x", |x| run(x, h, w));
        Ok((out, Shape::from((d[0], d[1], h / 2, w / 2))))
    }
}

pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

/// Per-(sample, group) standardization of `(B, C, ...)` without the affine part.
struct GroupStandardize {
    groups: usize,
    eps: f64,
}

fn group_stats<T: Float>(x: &[T], eps: f64) -> (T, T) {
    let n = T::from(x.len()).unwrap();
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::from(eps).unwrap()).sqrt())
}

impl CustomOp1 for GroupStandardize {
    fn name(&self) -> &'static str {
        "group-standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = l.dims();
        let group_len = l.shape().elem_count() / (d[0] * self.groups);
        let eps = self.eps;
        fn run<T: Float>(x: &[T], group_len: usize, eps: f64) -> Vec<T> {
            let mut out = Vec::with_capacity(x.len());
            for g in x.chunks_exact(group_len) {
                let (mean, inv) = group_stats(g, eps);
                out.extend(g.iter().map(|&v| (v - mean) * inv));
            }
            out
        }
        let out = dispatch!(s, l, "group norm", |x| run(x, group_len, eps));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let pair = Tensor::stack(&[arg.contiguous()?, grad.contiguous()?], 0)?;
        let op = GroupStandardizeGrad {
            groups: self.groups,
            eps: self.eps,
        };
        Ok(Some(pair.apply_op1_no_bwd(&op)?))
    }
}

/// Input `(2, B, C, ...)` holding `[x, dy]`; output `dx`.
struct GroupStandardizeGrad {
    groups: usize,
    eps: f64,
}

impl CustomOp1 for GroupStandardizeGrad {
    fn name(&self) -> &'static str {
        "group-standardize-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = l.dims();
        let half = l.shape().elem_count() / 2;
        let group_len = half / (d[1] * self.groups);
        let eps = self.eps;
        fn run<T: Float>(v: &[T], group_len: usize, eps: f64) -> Vec<T> {
            let (x, dy) = v.split_at(v.len() / 2);
            let mut out = Vec::with_capacity(x.len());
            let n = T::from(group_len).unwrap();
            for (g, gy) in x.chunks_exact(group_len).zip(dy.chunks_exact(group_len)) {
                let (mean, inv) = group_stats(g, eps);
                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for (&xv, &yv) in g.iter().zip(gy) {
                    sum_dy = sum_dy + yv;
                    sum_dy_xhat = sum_dy_xhat + yv * (xv - mean) * inv;
                }
                let (m1, m2) = (sum_dy / n, sum_dy_xhat / n);
                out.extend(g.iter().zip(gy).map(|(&xv, &yv)| inv * (yv - m1 - (xv - mean) * inv * m2)));
            }
            out
        }
        let out = dispatch!(s, l, "group norm", |v| run(v, group_len, eps));
        Ok((out, Shape::from(&d[1..])))
    }
}

pub fn group_standardize(x: &Tensor, groups: usize, eps: f64) -> candle_core::Result<Tensor> {
    let d = x.dims();
    if d.len() < 2 || d[1] % groups != 0 {
        return Err(candle_core::Error::Msg(format!("{groups} groups do not divide the channels of {d:?}")));
    }
    x.contiguous()?.apply_op1(GroupStandardize { groups, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    fn grad_of(x: &Var, f: impl Fn(&Tensor) -> Tensor, weights: &Tensor) -> Tensor {
        let loss = (f(x.as_tensor()) * weights).unwrap().sum_all().unwrap();
        loss.backward().unwrap().get(x.as_tensor()).unwrap().clone()
    }

    #[test]
    fn silu_matches_composite() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 2.0, (3, 4, 5), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 4, 5), &dev).unwrap();
        assert!(max_diff(&silu(x.as_tensor()).unwrap(), &x.as_tensor().silu().unwrap()) < 1e-14);
        let a = grad_of(&x, |t| silu(t).unwrap(), &w);
        let b = grad_of(&x, |t| t.silu().unwrap(), &w);
        assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn upsample_matches_builtin() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 3, 8, 10), &dev).unwrap();
        let builtin = |t: &Tensor| t.upsample_nearest2d(8, 10).unwrap();
        assert!(max_diff(&upsample2x(x.as_tensor()).unwrap(), &builtin(x.as_tensor())) == 0.0);
        let a = grad_of(&x, |t| upsample2x(t).unwrap(), &w);
        let b = grad_of(&x, builtin, &w);
        assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn group_standardize_matches_composite() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(1f64, 3.0, (2, 8, 3, 5), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 8, 3, 5), &dev).unwrap();
        let composite = |t: &Tensor| {
            let g = t.reshape((2, 4, 30)).unwrap();
            let mean = g.mean_keepdim(2).unwrap();
            let c = g.broadcast_sub(&mean).unwrap();
            let var = c.sqr().unwrap().mean_keepdim(2).unwrap();
            c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap().reshape((2, 8, 3, 5)).unwrap()
        };
        let ours = |t: &Tensor| group_standardize(t, 4, 1e-5).unwrap();
        assert!(max_diff(&ours(x.as_tensor()), &composite(x.as_tensor())) < 1e-12);
        let a = grad_of(&x, ours, &w);
        let b = grad_of(&x, composite, &w);
        assert!(max_diff(&a, &b) < 1e-10);
    }
}
