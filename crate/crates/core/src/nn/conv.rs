//! 2-D convolution as one fused differentiable op. Forward and both
//! gradients run as patch extraction plus matrix products, which is much
//! faster on CPU than the built-in transposed-convolution backward.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }

    fn identity(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Calls `f(input_offset, col_offset, lo, hi, iw0)` for each contiguous run
    /// of one sample: patch-row entries `lo..hi` starting at `col_offset` read
    /// the input row at `input_offset` at columns `iw0 + ow·stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, isize)) {
        let (ho, wo) = self.out_hw();
        let l = ho * wo;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let krow = (c * self.k + ki) * self.k + kj;
                    let iw0 = kj as isize - p;
                    let lo = ((-iw0).max(0) as usize).div_ceil(self.stride);
                    let hi = if (self.w as isize) > iw0 {
                        (((self.w as isize - 1 - iw0) / s) as usize + 1).min(wo)
                    } else {
                        0
                    };
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..ho {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        f((c * self.h + ih as usize) * self.w, krow * l + oh * wo, lo, hi, iw0);
                    }
                }
            }
        }
    }

    /// One sample `(C, H, W)` into patches `(C·k·k, Ho·Wo)`.
    fn im2col<T: Float>(&self, x: &[T], out: &mut [T]) {
        out.fill(T::zero());
        let st = self.stride as isize;
        self.for_each_run(|src, dst, lo, hi, iw0| {
            for ow in lo..hi {
                out[dst + ow] = x[(src as isize + iw0 + ow as isize * st) as usize];
            }
        });
    }

    /// Adjoint of [`Geometry::im2col`], accumulated into `out`.
    fn col2im_add<T: Float>(&self, cols: &[T], out: &mut [T]) {
        let st = self.stride as isize;
        self.for_each_run(|dst, src, lo, hi, iw0| {
            for ow in lo..hi {
                let i = (dst as isize + iw0 + ow as isize * st) as usize;
                out[i] = out[i] + cols[src + ow];
            }
        });
    }
}

/// Row-major `C = alpha·op(A)·op(B) + beta·C` with explicit strides.
trait Gemm: Float {
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_rs: isize, a_cs: isize, b: &[Self], b_rs: isize, b_cs: isize, beta: Self, c: &mut [Self]);
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], a_rs: isize, a_cs: isize, b: &[$t], b_rs: isize, b_cs: isize, beta: $t, c: &mut [$t]) {
                assert!(c.len() >= m * n);
                // SAFETY: the strides address only elements inside `a`, `b` and `c`,
                // which callers size as m×k, k×n and m×n.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), a_rs, a_cs, b.as_ptr(), b_rs, b_cs, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("convolution needs contiguous operands".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn dtype_error() -> candle_core::Error {
    candle_core::Error::Msg("convolution supports f32 and f64".into())
}

struct Conv {
    g: Geometry,
    cout: usize,
}

impl Conv {
    fn forward<T: Gemm>(&self, x: &[T], w: &[T], bias: &[T], b: usize) -> Vec<T> {
        let g = self.g;
        let (kc, l) = (g.cols(), g.positions());
        let in_len = g.c * g.h * g.w;
        let mut out = vec![T::zero(); b * self.cout * l];
        let mut cols = vec![T::zero(); if g.identity() { 0 } else { kc * l }];
        for bi in 0..b {
            let xs = &x[bi * in_len..(bi + 1) * in_len];
            let patches: &[T] = if g.identity() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            let y = &mut out[bi * self.cout * l..(bi + 1) * self.cout * l];
            for (co, row) in y.chunks_exact_mut(l).enumerate() {
                row.fill(bias[co]);
            }
            T::gemm(self.cout, kc, l, w, kc as isize, 1, patches, l as isize, 1, T::one(), y);
        }
        out
    }
}

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = xl.dims()[0];
        let (ho, wo) = self.g.out_hw();
        let out = match (xs, ws, bs) {
            (CpuStorage::F32(_), CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(self.forward(slice(xs, xl)?, slice(ws, wl)?, slice(bs, bl)?, b))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(self.forward(slice(xs, xl)?, slice(ws, wl)?, slice(bs, bl)?, b))
            }
            _ => return Err(dtype_error()),
        };
        Ok((out, Shape::from((b, self.cout, ho, wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let op = ConvGrad { g: self.g, cout: self.cout };
        let gx = grad.apply_op2_no_bwd(w, &GradInput(op.clone()))?;
        let gw = x.apply_op2_no_bwd(&grad, &GradWeight(op))?;
        let gb = grad.sum((0, 2, 3))?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

#[derive(Clone)]
struct ConvGrad {
    g: Geometry,
    cout: usize,
}

struct GradInput(ConvGrad);

impl GradInput {
    fn run<T: Gemm>(&self, grad: &[T], w: &[T], b: usize) -> Vec<T> {
        let ConvGrad { g, cout } = self.0;
        let (kc, l) = (g.cols(), g.positions());
        let in_len = g.c * g.h * g.w;
        let mut out = vec![T::zero(); b * in_len];
        let mut cols = vec![T::zero(); kc * l];
        for bi in 0..b {
            let gy = &grad[bi * cout * l..(bi + 1) * cout * l];
            let dst = &mut out[bi * in_len..(bi + 1) * in_len];
            if g.identity() {
                T::gemm(kc, cout, l, w, 1, kc as isize, gy, l as isize, 1, T::zero(), dst);
            } else {
                T::gemm(kc, cout, l, w, 1, kc as isize, gy, l as isize, 1, T::zero(), &mut cols);
                g.col2im_add(&cols, dst);
            }
        }
        out
    }
}

impl CustomOp2 for GradInput {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-input"
    }

    fn cpu_fwd(&self, gs: &CpuStorage, gl: &Layout, ws: &CpuStorage, wl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = gl.dims()[0];
        let g = self.0.g;
        let out = match (gs, ws) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(self.run(slice(gs, gl)?, slice(ws, wl)?, b)),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(self.run(slice(gs, gl)?, slice(ws, wl)?, b)),
            _ => return Err(dtype_error()),
        };
        Ok((out, Shape::from((b, g.c, g.h, g.w))))
    }
}

struct GradWeight(ConvGrad);

impl GradWeight {
    fn run<T: Gemm>(&self, x: &[T], grad: &[T], b: usize) -> Vec<T> {
        let ConvGrad { g, cout } = self.0;
        let (kc, l) = (g.cols(), g.positions());
        let in_len = g.c * g.h * g.w;
        let mut out = vec![T::zero(); cout * kc];
        let mut cols = vec![T::zero(); if g.identity() { 0 } else { kc * l }];
        for bi in 0..b {
            let xs = &x[bi * in_len..(bi + 1) * in_len];
            let patches: &[T] = if g.identity() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            let gy = &grad[bi * cout * l..(bi + 1) * cout * l];
            T::gemm(cout, l, kc, gy, l as isize, 1, patches, 1, l as isize, T::one(), &mut out);
        }
        out
    }
}

impl CustomOp2 for GradWeight {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-weight"
    }

    fn cpu_fwd(&self, xs: &CpuStorage, xl: &Layout, gs: &CpuStorage, gl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = xl.dims()[0];
        let ConvGrad { g, cout } = self.0;
        let out = match (xs, gs) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(self.run(slice(xs, xl)?, slice(gs, gl)?, b)),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(self.run(slice(xs, xl)?, slice(gs, gl)?, b)),
            _ => return Err(dtype_error()),
        };
        Ok((out, Shape::from((cout, g.c, g.k, g.k))))
    }
}

/// Square-kernel convolution of `(B, C, H, W)` with weight `(Cout, C, k, k)`
/// and bias `(Cout)`, zero padding `pad`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (cout, cin, k, k2) = weight.dims4()?;
    if cin != c || k != k2 || bias.dims() != [cout] {
        return Err(candle_core::Error::Msg(format!(
            "conv weight {:?} / bias {:?} do not fit input {:?}",
            weight.dims(),
            bias.dims(),
            x.dims()
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
        return Err(candle_core::Error::Msg(format!("kernel {k} does not fit a {h}x{w} input")));
    }
    let op = Conv {
        g: Geometry { k, stride, pad, c, h, w },
        cout,
    };
    x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_builtin_forward_and_gradients() {
        let dev = Device::Cpu;
        for (cin, cout, k, s, h, w) in [(3, 4, 3, 1, 7, 5), (3, 4, 3, 2, 8, 6), (2, 3, 1, 1, 4, 4), (2, 5, 3, 2, 7, 7)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, cin, h, w), &dev).unwrap()).unwrap();
            let wt = Var::from_tensor(&Tensor::randn(0f64, 1.0, (cout, cin, k, k), &dev).unwrap()).unwrap();
            let bias = Var::from_tensor(&Tensor::randn(0f64, 1.0, cout, &dev).unwrap()).unwrap();
            let p = k / 2;
            let ours = conv2d(x.as_tensor(), wt.as_tensor(), bias.as_tensor(), s, p).unwrap();
            let reference = x
                .as_tensor()
                .conv2d(wt.as_tensor(), p, s, 1, 1)
                .unwrap()
                .broadcast_add(&bias.as_tensor().reshape((1, cout, 1, 1)).unwrap())
                .unwrap();
            assert!(max_diff(&ours, &reference) < 1e-12);
            let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &wt, &bias] {
                let d = max_diff(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap());
                assert!(d < 1e-10, "{cin} {cout} {k} {s}: {d}");
            }
        }
    }

    #[test]
    fn works_in_f32() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (1, 2, 5, 5), &dev).unwrap();
        let w = Tensor::randn(0f32, 1.0, (3, 2, 3, 3), &dev).unwrap();
        let b = Tensor::zeros(3, candle_core::DType::F32, &dev).unwrap();
        let ours = conv2d(&x, &w, &b, 1, 1).unwrap();
        let reference = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let d = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5);
    }
}
