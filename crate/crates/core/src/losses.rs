//! Training objectives: mel reconstruction, Monte-Carlo KL through the flow,
//! least-squares adversarial terms, feature matching and the adaptation
//! weight regularizer.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianSequence, GENERATOR_PREFIXES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_recon: f64,
    pub lambda_kl: f64,
    pub lambda_reg: f64,
    pub use_feature_matching: bool,
    pub lambda_fm: f64,
    /// Parameter namespaces pulled toward the pre-adaptation snapshot.
    pub wreg_scope: Vec<String>,
}

impl LossConfig {
    pub fn vits() -> Self {
        Self::desk()
    }

    pub fn desk() -> Self {
        Self {
            lambda_recon: 45.0,
            lambda_kl: 1.0,
            lambda_reg: 1e-3,
            use_feature_matching: false,
            lambda_fm: 2.0,
            wreg_scope: GENERATOR_PREFIXES
                .iter()
                .map(|p| p.trim_end_matches('.').to_string())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_recon", self.lambda_recon),
            ("lambda_kl", self.lambda_kl),
            ("lambda_reg", self.lambda_reg),
            ("lambda_fm", self.lambda_fm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for s in &self.wreg_scope {
            if !GENERATOR_PREFIXES.contains(&format!("{s}.").as_str()) {
                return Err(Error::Config(format!("wreg_scope entry `{s}` is not a generator namespace")));
            }
        }
        Ok(())
    }

    /// Parameter-name prefixes covered by the regularizer.
    pub fn wreg_prefixes(&self) -> Vec<String> {
        self.wreg_scope.iter().map(|s| format!("{s}.")).collect()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean absolute difference; with `mask: (B, 1, T)` only valid frames count.
pub fn recon_loss(mel_y: &Tensor, mel_hat: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if mel_y.shape() != mel_hat.shape() {
        return Err(Error::Contract(format!(
            "mel shapes differ: {:?} vs {:?}",
            mel_y.shape(),
            mel_hat.shape()
        )));
    }
    let diff = (mel_y - mel_hat)?.abs()?;
    match mask {
        None => Ok(diff.mean_all()?),
        Some(m) => Ok(crate::nn::masked_mean(&diff, m)?),
    }
}

/// Monte-Carlo KL through the flow: valid-frame mean of
/// `sum_c [log q(z_q) - log p(z')] - logdet / frames`.
///
/// `logdet` is per example `(B,)`; the result is summed over channels, so
/// divide by `C` for a per-dimension figure.
pub fn kl_loss(
    q: &GaussianSequence,
    z_q: &Tensor,
    z_p: &Tensor,
    logdet: &Tensor,
    p: &GaussianSequence,
    mask: &Tensor,
) -> Result<Tensor> {
    q.check_finite()?;
    p.check_finite()?;
    if z_q.shape() != q.mean.shape() || z_p.shape() != p.mean.shape() {
        return Err(Error::Contract("latent and distribution shapes differ".into()));
    }
    let eps_q = ((z_q - &q.mean)? * q.log_std.neg()?.exp()?)?;
    let log_q = (q.log_std.neg()? - (eps_q.sqr()? * 0.5)?)?;
    let eps_p = ((z_p - &p.mean)? * p.log_std.neg()?.exp()?)?;
    let log_p = (p.log_std.neg()? - (eps_p.sqr()? * 0.5)?)?;
    let per = (log_q - log_p)?.broadcast_mul(mask)?.sum_all()?;
    let frames = mask.sum_all()?;
    Ok(((per - logdet.sum_all()?)? / frames)?)
}

/// Sum over sub-discriminators of `mean (D(G(z)) - 1)^2`.
pub fn adv_g(fake: &[Tensor]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for s in fake {
        let l = (s - 1.0)?.sqr()?.mean_all()?;
        acc = Some(match acc {
            Some(a) => (a + l)?,
            None => l,
        });
    }
    acc.ok_or_else(|| Error::Contract("no discriminator scores".into()))
}

/// Sum over sub-discriminators of `mean (D(y) - 1)^2 + mean D(G(z))^2`.
pub fn adv_d(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Contract("real and generated score lists differ".into()));
    }
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let l = ((r - 1.0)?.sqr()?.mean_all()? + f.sqr()?.mean_all()?)?;
        acc = Some(match acc {
            Some(a) => (a + l)?,
            None => l,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// L1 between discriminator activations on real (held fixed) and generated audio.
pub fn feature_matching(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (rs, fs) in real.iter().zip(fake) {
        for (r, f) in rs.iter().zip(fs) {
            let l = (r.detach() - f)?.abs()?.mean_all()?;
            acc = Some(match acc {
                Some(a) => (a + l)?,
                None => l,
            });
        }
    }
    acc.ok_or_else(|| Error::Contract("no discriminator features".into()))
}

/// `sum ||theta - theta_ref||^2` over the parameters present in `reference`.
pub fn weight_reg(reference: &BTreeMap<String, Tensor>, params: &[(String, Var)]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (name, var) in params {
        let Some(r) = reference.get(name) else {
            continue;
        };
        let l = (var.as_tensor() - r)?.sqr()?.sum_all()?;
        acc = Some(match acc {
            Some(a) => (a + l)?,
            None => l,
        });
    }
    acc.ok_or_else(|| Error::Contract("weight regularizer covers no parameters".into()))
}

/// Generator-side terms of one step.
#[derive(Debug, Clone)]
pub struct GeneratorTerms<T> {
    pub adv_g: T,
    pub recon: T,
    pub kl: T,
    pub wreg: Option<T>,
    pub fm: Option<T>,
}

/// `adv_g + l_recon * recon + l_kl * kl [+ l_reg * wreg] [+ l_fm * fm]`.
pub fn total_g(t: &GeneratorTerms<Tensor>, cfg: &LossConfig) -> Result<Tensor> {
    let mut total = ((&t.adv_g + (&t.recon * cfg.lambda_recon)?)? + (&t.kl * cfg.lambda_kl)?)?;
    if let Some(w) = &t.wreg {
        total = (total + (w * cfg.lambda_reg)?)?;
    }
    if let (true, Some(fm)) = (cfg.use_feature_matching, &t.fm) {
        total = (total + (fm * cfg.lambda_fm)?)?;
    }
    Ok(total)
}

pub fn total_d(adv_d: &Tensor) -> Tensor {
    adv_d.clone()
}

/// Scalars of one training step, written as one JSON line per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub stage: String,
    pub recon: f64,
    pub kl: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub wreg: f64,
    pub fm: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn new(step: u64, stage: &str, t: &GeneratorTerms<f64>, adv_d: f64, cfg: &LossConfig) -> Self {
        let mut total = t.adv_g + cfg.lambda_recon * t.recon + cfg.lambda_kl * t.kl;
        if let Some(w) = t.wreg {
            total += cfg.lambda_reg * w;
        }
        let fm = t.fm.unwrap_or(0.0);
        if cfg.use_feature_matching {
            total += cfg.lambda_fm * fm;
        }
        Self {
            step,
            stage: stage.to_string(),
            recon: t.recon,
            kl: t.kl,
            adv_g: t.adv_g,
            adv_d,
            wreg: t.wreg.unwrap_or(0.0),
            fm,
            total_g: total,
            total_d: adv_d,
        }
    }

    pub fn from_tensors(step: u64, stage: &str, t: &GeneratorTerms<Tensor>, adv_d: &Tensor, cfg: &LossConfig) -> Result<Self> {
        let terms = GeneratorTerms {
            adv_g: scalar(&t.adv_g)?,
            recon: scalar(&t.recon)?,
            kl: scalar(&t.kl)?,
            wreg: t.wreg.as_ref().map(scalar).transpose()?,
            fm: t.fm.as_ref().map(scalar).transpose()?,
        };
        Ok(Self::new(step, stage, &terms, scalar(adv_d)?, cfg))
    }

    /// Names of non-finite entries, if any.
    pub fn non_finite(&self) -> Vec<&'static str> {
        [
            ("recon", self.recon),
            ("kl", self.kl),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("wreg", self.wreg),
            ("fm", self.fm),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
        .collect()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}
