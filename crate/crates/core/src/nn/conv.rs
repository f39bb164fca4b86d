//! 1-D correlation with a hand-written backward pass.
//!
//! Autograd through `Tensor::conv1d` in candle-core 0.11 returns wrong kernel
//! gradients whenever the batch is larger than one, so every convolution in
//! this crate goes through [`conv1d`], whose gradients are computed with
//! forward-only convolutions on contiguous operands.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Conv1dOp {
    padding: usize,
    stride: usize,
    dilation: usize,
    input_grad: bool,
    kernel_grad: bool,
}

fn to_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv1d operands must be contiguous".into()))?;
    let dev = candle_core::Device::Cpu;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], l.shape(), &dev),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], l.shape(), &dev),
        _ => Err(candle_core::Error::Msg("conv1d supports f32 and f64 only".into())),
    }
}

fn into_storage(t: &Tensor) -> candle_core::Result<(CpuStorage, Shape)> {
    let t = t.contiguous()?;
    let shape = t.shape().clone();
    let storage = match t.dtype() {
        DType::F32 => CpuStorage::F32(t.flatten_all()?.to_vec1()?),
        DType::F64 => CpuStorage::F64(t.flatten_all()?.to_vec1()?),
        d => return Err(candle_core::Error::Msg(format!("conv1d does not support {d:?}"))),
    };
    Ok((storage, shape))
}

impl CustomOp2 for Conv1dOp {
    fn name(&self) -> &'static str {
        "svcforge-conv1d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = to_tensor(s1, l1)?;
        let w = to_tensor(s2, l2)?;
        let y = x.conv1d(&w, self.padding, self.stride, self.dilation, 1)?;
        into_storage(&y)
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (x, w, grad) = (x.detach(), w.detach(), grad.detach().contiguous()?);
        let (b, c_out, l_out) = grad.dims3()?;
        let (_, c_in, l_in) = x.dims3()?;
        let k = w.dim(2)?;
        let (p, s, d) = (self.padding, self.stride, self.dilation);

        // Kernel gradient: correlate inputs with output gradients across the batch.
        let gw = if self.kernel_grad {
            Some(
                x.transpose(0, 1)?
                    .contiguous()?
                    .conv1d(&grad.transpose(0, 1)?.contiguous()?, p, d, s, 1)?
                    .transpose(0, 1)?
                    .narrow(2, 0, k)?
                    .contiguous()?,
            )
        } else {
            None
        };
        if !self.input_grad {
            return Ok((None, gw));
        }

        // Input gradient: zero-stuffed output gradient correlated with the
        // time-reversed, channel-transposed kernel.
        let stuffed = if s > 1 {
            let zeros = Tensor::zeros((b, c_out, l_out, s - 1), grad.dtype(), grad.device())?;
            Tensor::cat(&[&grad.unsqueeze(3)?, &zeros], 3)?
                .reshape((b, c_out, l_out * s))?
                .narrow(2, 0, (l_out - 1) * s + 1)?
                .contiguous()?
        } else {
            grad
        };
        let full = d * (k - 1);
        if p > full {
            return Err(candle_core::Error::Msg(format!(
                "conv1d backward needs padding <= dilation * (kernel - 1), got {p} > {full}"
            )));
        }
        let rev: Vec<u32> = (0..k as u32).rev().collect();
        let rev = Tensor::new(rev.as_slice(), w.device())?;
        let wt = w.index_select(&rev, 2)?.transpose(0, 1)?.contiguous()?;
        let left = full - p;
        let need = l_in + full;
        let have = stuffed.dim(2)? + left;
        let padded = stuffed
            .pad_with_zeros(2, left, need.saturating_sub(have))?
            .narrow(2, 0, need)?
            .contiguous()?;
        let gx = padded.conv1d(&wt, 0, 1, d, 1)?;
        debug_assert_eq!(gx.dims3()?, (b, c_in, l_in));
        Ok((Some(gx), gw))
    }
}

/// Cross-correlation of `x: (B, C_in, L)` with `w: (C_out, C_in / groups, K)`.
pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> candle_core::Result<Tensor> {
    let op = Conv1dOp {
        padding,
        stride,
        dilation,
        input_grad: x.track_op(),
        kernel_grad: w.track_op(),
    };
    if groups == 1 {
        return x.contiguous()?.apply_op2(&w.contiguous()?, op);
    }
    let xs = x.chunk(groups, 1)?;
    let ws = w.chunk(groups, 0)?;
    let ys = xs
        .iter()
        .zip(&ws)
        .map(|(x, w)| x.contiguous()?.apply_op2(&w.contiguous()?, op))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Tensor::cat(&ys, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn finite_difference_errors(b: usize, pad: usize, stride: usize, dil: usize, k: usize, groups: usize) -> (f64, f64) {
        let dev = Device::Cpu;
        let lin = |n: usize, shape: (usize, usize, usize)| {
            Tensor::arange(0u32, n as u32, &dev)
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap()
                .reshape(shape)
                .unwrap()
        };
        let x = Var::from_tensor(&lin(b * 4 * 11, (b, 4, 11)).sin().unwrap()).unwrap();
        let w = Var::from_tensor(&lin(6 * (4 / groups) * k, (6, 4 / groups, k)).cos().unwrap()).unwrap();
        let y = conv1d(&x, &w, pad, stride, dil, groups).unwrap();
        let r = lin(y.elem_count(), y.dims3().unwrap()).sqrt().unwrap();
        let f = |x: &Tensor, w: &Tensor| -> f64 {
            (conv1d(x, w, pad, stride, dil, groups).unwrap() * &r)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let g = (&y * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let h = 1e-5;
        let mut errs = [0.0f64; 2];
        for (slot, (var, other_is_x)) in [(&x, false), (&w, true)].into_iter().enumerate() {
            let analytic: Vec<f64> = g.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            for i in 0..base.len() {
                let mut up = base.clone();
                up[i] += h;
                let mut down = base.clone();
                down[i] -= h;
                let up = Tensor::from_vec(up, var.shape(), &dev).unwrap();
                let down = Tensor::from_vec(down, var.shape(), &dev).unwrap();
                let n = if other_is_x {
                    (f(&x, &up) - f(&x, &down)) / (2.0 * h)
                } else {
                    (f(&up, &w) - f(&down, &w)) / (2.0 * h)
                };
                errs[slot] = errs[slot].max((n - analytic[i]).abs());
            }
        }
        (errs[0], errs[1])
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (b, pad, stride, dil, k, groups) in [
            (3, 1, 1, 1, 3, 1),
            (2, 0, 1, 1, 1, 1),
            (2, 2, 1, 2, 3, 1),
            (2, 1, 2, 1, 3, 1),
            (2, 2, 3, 1, 5, 1),
            (2, 0, 2, 1, 4, 1),
            (2, 2, 2, 1, 5, 2),
            (1, 6, 1, 3, 5, 4),
        ] {
            let (ex, ew) = finite_difference_errors(b, pad, stride, dil, k, groups);
            assert!(ex < 1e-6 && ew < 1e-6, "b{b} p{pad} s{stride} d{dil} k{k} g{groups}: {ex:e} {ew:e}");
        }
    }
}
