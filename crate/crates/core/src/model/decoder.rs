use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv1d, ConvTranspose1d, ParamBuilder};

pub const LRELU_SLOPE: f64 = 0.1;

/// Kernel for an upsampling stage of factor `u`; always leaves an even
/// `k - u` so the cropped output is exactly `u` times longer.
pub fn upsample_kernel(u: usize) -> usize {
    2 * u + u % 2
}

#[derive(Debug, Clone)]
struct ResBlock {
    convs1: Vec<Conv1d>,
    convs2: Vec<Conv1d>,
}

impl ResBlock {
    fn new(b: &ParamBuilder<'_>, channels: usize, kernel: usize, dilations: &[usize]) -> Result<Self> {
        let mut convs1 = Vec::new();
        let mut convs2 = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            convs1.push(Conv1d::new(&b.pp(format!("c1.{i}")), channels, channels, kernel, d, None)?);
            convs2.push(Conv1d::new(&b.pp(format!("c2.{i}")), channels, channels, kernel, 1, None)?);
        }
        Ok(Self { convs1, convs2 })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (c1, c2) in self.convs1.iter().zip(&self.convs2) {
            let xt = c1.forward(&leaky_relu(&x, LRELU_SLOPE)?)?;
            let xt = c2.forward(&leaky_relu(&xt, LRELU_SLOPE)?)?;
            x = (xt + x)?;
        }
        Ok(x)
    }
}

/// Strided convolution bringing the excitation to a stage's rate.
#[derive(Debug, Clone)]
struct ExcitationDown {
    conv: Conv1d,
    stride: usize,
}

impl ExcitationDown {
    fn forward(&self, e: &Tensor) -> Result<Tensor> {
        if self.stride == 1 {
            return Ok(self.conv.forward(e)?);
        }
        let left = self.stride / 2;
        let right = self.stride - left;
        let padded = e.pad_with_zeros(2, left, right)?;
        Ok(self.conv.forward(&padded)?)
    }
}

/// Upsampling generator with multi-receptive-field residual blocks and
/// additive excitation injection after every upsampling stage.
#[derive(Debug, Clone)]
pub struct Decoder {
    hop: usize,
    pub conv_pre: Conv1d,
    cond: Option<Conv1d>,
    pub ups: Vec<ConvTranspose1d>,
    ups_crop: Vec<usize>,
    excitation: Vec<ExcitationDown>,
    resblocks: Vec<Vec<ResBlock>>,
    pub conv_post: Conv1d,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &ParamBuilder<'_>,
        in_channels: usize,
        initial_channels: usize,
        rates: &[usize],
        resblock_kernels: &[usize],
        resblock_dilations: &[Vec<usize>],
        gin_channels: usize,
    ) -> Result<Self> {
        if resblock_kernels.len() != resblock_dilations.len() || resblock_kernels.is_empty() {
            return Err(Error::Config("each residual-block kernel needs a dilation list".into()));
        }
        if initial_channels >> rates.len() == 0 {
            return Err(Error::Config(format!(
                "{initial_channels} initial channels cannot be halved {} times",
                rates.len()
            )));
        }
        let conv_pre = Conv1d::new(&b.pp("conv_pre"), in_channels, initial_channels, 7, 1, None)?;
        let cond = if gin_channels > 0 {
            Some(Conv1d::new(&b.pp("cond"), gin_channels, initial_channels, 1, 1, None)?)
        } else {
            None
        };
        let mut ups = Vec::new();
        let mut ups_crop = Vec::new();
        let mut excitation = Vec::new();
        let mut resblocks = Vec::new();
        for (i, &u) in rates.iter().enumerate() {
            let c_in = initial_channels >> i;
            let c_out = initial_channels >> (i + 1);
            let k = upsample_kernel(u);
            ups.push(ConvTranspose1d::new(&b.pp(format!("ups.{i}")), c_in, c_out, k, u, 1, None)?);
            ups_crop.push((k - u) / 2);
            let stride: usize = rates[i + 1..].iter().product();
            let kernel = if stride == 1 { 1 } else { 2 * stride };
            excitation.push(ExcitationDown {
                conv: Conv1d::new(&b.pp(format!("excitation.{i}")), 1, c_out, kernel, 1, None)?
                    .with_stride(stride, 0),
                stride,
            });
            let blocks = resblock_kernels
                .iter()
                .zip(resblock_dilations)
                .enumerate()
                .map(|(j, (&k, d))| ResBlock::new(&b.pp(format!("res.{i}.{j}")), c_out, k, d))
                .collect::<Result<Vec<_>>>()?;
            resblocks.push(blocks);
        }
        let c_last = initial_channels >> rates.len();
        let conv_post = Conv1d::new_no_bias(&b.pp("conv_post"), c_last, 1, 7, 1, None)?;
        Ok(Self {
            hop: rates.iter().product(),
            conv_pre,
            cond,
            ups,
            ups_crop,
            excitation,
            resblocks,
            conv_post,
        })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// `z: (B, C, T)`, `excitation: (B, 1, T * hop)` → `(B, 1, T * hop)` in `[-1, 1]`.
    pub fn forward(&self, z: &Tensor, excitation: &Tensor, g: Option<&Tensor>) -> Result<Tensor> {
        let (b, _, t) = z.dims3()?;
        let (eb, ec, en) = excitation.dims3()?;
        if eb != b || ec != 1 || en != t * self.hop {
            return Err(Error::Contract(format!(
                "excitation {:?} does not match {t} frames x hop {}",
                excitation.shape(),
                self.hop
            )));
        }
        let mut x = self.conv_pre.forward(z)?;
        if let (Some(c), Some(g)) = (&self.cond, g) {
            x = x.broadcast_add(&c.forward(g)?)?;
        }
        for i in 0..self.ups.len() {
            x = leaky_relu(&x, LRELU_SLOPE)?;
            let len = x.dim(2)? * self.ups[i].stride;
            x = self.ups[i].forward_cropped(&x, self.ups_crop[i], len)?;
            x = (x + self.excitation[i].forward(excitation)?)?;
            let mut acc: Option<Tensor> = None;
            for rb in &self.resblocks[i] {
                let y = rb.forward(&x)?;
                acc = Some(match acc {
                    Some(a) => (a + y)?,
                    None => y,
                });
            }
            x = (acc.expect("non-empty residual blocks") / self.resblocks[i].len() as f64)?;
        }
        let x = leaky_relu(&x, 0.01)?;
        Ok(self.conv_post.forward(&x)?.tanh()?)
    }
}
