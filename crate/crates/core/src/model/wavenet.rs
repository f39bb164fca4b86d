use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{sigmoid, Conv1d, ParamBuilder};

/// Non-causal WaveNet stack: dilated convolutions with gated activations,
/// residual and skip paths, and an optional global conditioning vector.
#[derive(Debug, Clone)]
pub struct WaveNet {
    hidden: usize,
    in_layers: Vec<Conv1d>,
    res_skip: Vec<Conv1d>,
    cond: Option<Conv1d>,
}

impl WaveNet {
    pub fn new(
        b: &ParamBuilder<'_>,
        hidden: usize,
        kernel: usize,
        dilation_rate: usize,
        layers: usize,
        gin_channels: usize,
    ) -> Result<Self> {
        let mut in_layers = Vec::with_capacity(layers);
        let mut res_skip = Vec::with_capacity(layers);
        for i in 0..layers {
            let d = dilation_rate.pow(i as u32);
            in_layers.push(Conv1d::new(&b.pp(format!("in.{i}")), hidden, 2 * hidden, kernel, d, None)?);
            let out = if i + 1 < layers { 2 * hidden } else { hidden };
            res_skip.push(Conv1d::new(&b.pp(format!("res_skip.{i}")), hidden, out, 1, 1, None)?);
        }
        let cond = if gin_channels > 0 {
            Some(Conv1d::new(&b.pp("cond"), gin_channels, 2 * hidden * layers, 1, 1, None)?)
        } else {
            None
        };
        Ok(Self {
            hidden,
            in_layers,
            res_skip,
            cond,
        })
    }

    /// `x: (B, H, T)`, `mask: (B, 1, T)`, `g: (B, gin, 1)`.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, g: Option<&Tensor>) -> Result<Tensor> {
        let h = self.hidden;
        let n = self.in_layers.len();
        let g = match (&self.cond, g) {
            (Some(c), Some(g)) => Some(c.forward(g)?),
            _ => None,
        };
        let mut x = x.clone();
        let mut skip: Option<Tensor> = None;
        for i in 0..n {
            let mut x_in = self.in_layers[i].forward(&x)?;
            if let Some(g) = &g {
                x_in = x_in.broadcast_add(&g.narrow(1, 2 * h * i, 2 * h)?)?;
            }
            let acts = (x_in.narrow(1, 0, h)?.tanh()? * sigmoid(&x_in.narrow(1, h, h)?)?)?;
            let rs = self.res_skip[i].forward(&acts)?;
            let s = if i + 1 < n {
                x = (x + rs.narrow(1, 0, h)?)?.broadcast_mul(mask)?;
                rs.narrow(1, h, h)?
            } else {
                rs
            };
            skip = Some(match skip {
                Some(acc) => (acc + s)?,
                None => s,
            });
        }
        let out = match skip {
            Some(s) => s,
            None => x.zeros_like()?,
        };
        Ok(out.broadcast_mul(mask)?)
    }
}
