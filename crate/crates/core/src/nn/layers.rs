use candle_core::{DType, Tensor};

use crate::error::Result;

use super::params::{Init, ParamBuilder};

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    (x * slope)? + (x.relu()? * (1.0 - slope))?
}

/// Sum of `x * mask` divided by the mask's sum (scaled by broadcast width).
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> candle_core::Result<Tensor> {
    let m = mask.broadcast_as(x.shape())?;
    let num = (x * &m)?.sum_all()?;
    let den = m.sum_all()?;
    num / den
}

/// 1-D convolution on `(B, C_in, T)` with symmetric "same" padding for odd
/// kernels unless told otherwise.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv1d {
    pub fn new(
        b: &ParamBuilder<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        init: Option<Init>,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = b.get((c_out, c_in, kernel), "weight", init.unwrap_or(Init::Uniform(bound)))?;
        let bias_init = match init {
            Some(Init::Zeros) => Init::Zeros,
            _ => Init::Uniform(bound),
        };
        let bias = Some(b.get(c_out, "bias", bias_init)?);
        Ok(Self {
            weight,
            bias,
            dilation,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            groups: 1,
        })
    }

    pub fn new_no_bias(
        b: &ParamBuilder<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        init: Option<Init>,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = b.get((c_out, c_in, kernel), "weight", init.unwrap_or(Init::Uniform(bound)))?;
        Ok(Self {
            weight,
            bias: None,
            dilation,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            groups: 1,
        })
    }

    /// Grouped convolution with explicit stride and padding.
    #[allow(clippy::too_many_arguments)]
    pub fn grouped(
        b: &ParamBuilder<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(crate::Error::Config(format!(
                "{c_in} -> {c_out} channels do not split into {groups} groups"
            )));
        }
        let bound = 1.0 / ((c_in / groups * kernel) as f64).sqrt();
        Ok(Self {
            weight: b.get((c_out, c_in / groups, kernel), "weight", Init::Uniform(bound))?,
            bias: Some(b.get(c_out, "bias", Init::Uniform(bound))?),
            dilation: 1,
            stride,
            padding,
            groups,
        })
    }

    pub fn with_stride(mut self, stride: usize, padding: usize) -> Self {
        self.stride = stride;
        self.padding = padding;
        self
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2).unwrap_or(1)
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = super::conv::conv1d(x, &self.weight, self.padding, self.stride, self.dilation, self.groups)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1))?),
            None => Ok(y),
        }
    }
}

/// Transposed 1-D convolution. The kernel is stored in correlation layout
/// `(C_out, C_in, K)` (equivalent to the usual `(C_in, C_out, K)` layout
/// flipped along time), and the op runs as zero-insertion + full-padded
/// correlation, so `forward_full` yields `(L - 1) * stride + dilation * (K - 1) + 1`
/// frames.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvTranspose1d {
    pub fn new(
        b: &ParamBuilder<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        init: Option<Init>,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = b.get((c_out, c_in, kernel), "weight", init.unwrap_or(Init::Uniform(bound)))?;
        let bias_init = match init {
            Some(Init::Zeros) => Init::Zeros,
            _ => Init::Uniform(bound),
        };
        let bias = Some(b.get(c_out, "bias", bias_init)?);
        Ok(Self {
            weight,
            bias,
            stride,
            dilation,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2).unwrap_or(1)
    }

    pub fn full_len(&self, l_in: usize) -> usize {
        (l_in - 1) * self.stride + self.dilation * (self.kernel() - 1) + 1
    }

    pub fn forward_full(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let stuffed = if self.stride > 1 {
            let zeros = Tensor::zeros((b, c, l, self.stride - 1), x.dtype(), x.device())?;
            Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?
                .reshape((b, c, l * self.stride))?
                .narrow(2, 0, (l - 1) * self.stride + 1)?
        } else {
            x.clone()
        };
        let pad = self.dilation * (self.kernel() - 1);
        let y = super::conv::conv1d(&stuffed, &self.weight, pad, 1, self.dilation, 1)?;
        match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, (), 1))?),
            None => Ok(y),
        }
    }

    /// Full output cropped to `[start, start + len)`.
    pub fn forward_cropped(&self, x: &Tensor, start: usize, len: usize) -> candle_core::Result<Tensor> {
        self.forward_full(x)?.narrow(2, start, len)
    }
}

/// Normalization over the channel axis of `(B, C, T)`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.get(channels, "gamma", Init::Const(1.0))?,
            beta: b.get(channels, "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .broadcast_mul(&self.gamma.reshape((1, (), 1))?)?
            .broadcast_add(&self.beta.reshape((1, (), 1))?)
    }
}

/// Lookup table `(N, D)`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(b: &ParamBuilder<'_>, n: usize, dim: usize, std: f64) -> Result<Self> {
        Ok(Self {
            table: b.get((n, dim), "weight", Init::Normal(std))?,
        })
    }

    /// `ids` of length N → `(N, D)`.
    pub fn forward(&self, ids: &[u32]) -> candle_core::Result<Tensor> {
        let idx = Tensor::new(ids, self.table.device())?;
        self.table.index_select(&idx, 0)
    }
}

/// `(B, 1, T)` mask of ones for `t < len[b]`.
pub fn sequence_mask(lengths: &[usize], t: usize, dtype: DType) -> candle_core::Result<Tensor> {
    let data: Vec<f32> = lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |i| if i < l { 1.0 } else { 0.0 }))
        .collect();
    Tensor::from_vec(data, (lengths.len(), 1, t), &candle_core::Device::Cpu)?.to_dtype(dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn conv_transpose_matches_scatter_definition() {
        let store = ParamStore::new(0, DType::F64);
        let ct = ConvTranspose1d::new(&store.root().pp("ct"), 2, 3, 4, 3, 2, None).unwrap();
        let x = Tensor::new(&[[[0.5f64, -1.0, 2.0], [1.5, 0.25, -0.75]]], &candle_core::Device::Cpu).unwrap();
        let y = ct.forward_full(&x).unwrap();
        let l = 3;
        assert_eq!(y.dims3().unwrap(), (1, 3, ct.full_len(l)));
        let w: Vec<Vec<Vec<f64>>> = ct.weight.to_vec3().unwrap();
        let bias: Vec<f64> = ct.bias.as_ref().unwrap().to_vec1().unwrap();
        let xv: Vec<Vec<Vec<f64>>> = x.to_vec3().unwrap();
        let yv: Vec<Vec<Vec<f64>>> = y.to_vec3().unwrap();
        let k = 4;
        // Scatter form: input m, tap j lands on m*stride + j*dilation, with the
        // usual kernel being the stored one reversed in time.
        let mut expect = vec![vec![0.0f64; ct.full_len(l)]; 3];
        for o in 0..3 {
            for i in 0..2 {
                for m in 0..l {
                    for j in 0..k {
                        expect[o][m * 3 + j * 2] += xv[0][i][m] * w[o][i][k - 1 - j];
                    }
                }
            }
            for v in expect[o].iter_mut() {
                *v += bias[o];
            }
        }
        for o in 0..3 {
            for n in 0..ct.full_len(l) {
                assert!((yv[0][o][n] - expect[o][n]).abs() < 1e-12);
            }
        }
    }
}
