//! Tversky-family segmentation losses.
//!
//! For a probability map `p` and binary mask `g`, with
//! `tp = sum(p g)`, `fn = sum((1 - p) g)`, `fp = sum(p (1 - g))`:
//!
//! ```text
//! TI   = (tp + eps) / (tp + alpha fn + beta fp + eps)
//! TL   = 1 - TI
//! FTL  = (1 - TI)^gamma
//! ```
//!
//! `alpha` weighs false negatives, `beta` false positives. The index is
//! computed per sample; batch losses average the per-sample values using
//! each sample's own domain parameters.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Imaging domain of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    /// Multi-contrast, four distinct channels.
    Mri,
    /// Single grayscale channel replicated to four.
    Ct,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Mri, Domain::Ct];

    pub fn code(self) -> u8 {
        match self {
            Domain::Mri => 0,
            Domain::Ct => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Domain::Mri),
            1 => Ok(Domain::Ct),
            other => Err(Error::invalid("domain", format!("unknown domain code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Mri => "MRI",
            Domain::Ct => "CT",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MRI" | "MRI_LIKE" => Ok(Domain::Mri),
            "CT" | "CT_LIKE" => Ok(Domain::Ct),
            _ => Err(Error::invalid("domain", format!("unknown domain tag `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    /// False-negative weight.
    pub alpha: f64,
    /// False-positive weight.
    pub beta: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub epsilon: f64,
}

impl LossParams {
    pub const DEFAULT_EPSILON: f64 = 1e-6;
    pub const DEFAULT_GAMMA: f64 = 4.0 / 3.0;

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.gamma > 0.0
            && self.epsilon > 0.0
            && [self.alpha, self.beta, self.gamma, self.epsilon]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "loss params",
                format!("need alpha, beta >= 0 and gamma, epsilon > 0, got {self:?}"),
            ))
        }
    }
}

/// Per-domain loss parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTable {
    pub mri: LossParams,
    pub ct: LossParams,
}

impl Default for LossTable {
    fn default() -> Self {
        Self {
            mri: LossParams::new(0.7, 0.3, LossParams::DEFAULT_GAMMA),
            ct: LossParams::new(0.5, 0.5, LossParams::DEFAULT_GAMMA),
        }
    }
}

impl LossTable {
    /// Same parameters for every domain.
    pub fn uniform(params: LossParams) -> Self {
        Self {
            mri: params,
            ct: params,
        }
    }

    pub fn get(&self, domain: Domain) -> LossParams {
        match domain {
            Domain::Mri => self.mri,
            Domain::Ct => self.ct,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mri.validate()?;
        self.ct.validate()
    }
}

/// Soft confusion sums of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftCounts {
    pub tp: f64,
    pub fn_: f64,
    pub fp: f64,
}

fn check_pair(p: &[f64], g: &[f64]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::shape(
            "tversky_index",
            format!("prediction has {} pixels, mask has {}", p.len(), g.len()),
        ));
    }
    if let Some(bad) = g.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask", format!("value {bad} is not binary")));
    }
    Ok(())
}

pub fn soft_counts(p: &[f64], g: &[f64]) -> Result<SoftCounts> {
    check_pair(p, g)?;
    let mut c = SoftCounts {
        tp: 0.0,
        fn_: 0.0,
        fp: 0.0,
    };
    for (&pi, &gi) in p.iter().zip(g) {
        c.tp += pi * gi;
        c.fn_ += (1.0 - pi) * gi;
        c.fp += pi * (1.0 - gi);
    }
    Ok(c)
}

/// Tversky index from precomputed soft counts.
pub fn tversky_from_counts(c: SoftCounts, params: &LossParams) -> f64 {
    (c.tp + params.epsilon) / (c.tp + params.alpha * c.fn_ + params.beta * c.fp + params.epsilon)
}

pub fn tversky_index(p: &[f64], g: &[f64], params: &LossParams) -> Result<f64> {
    params.validate()?;
    Ok(tversky_from_counts(soft_counts(p, g)?, params))
}

pub fn tversky_loss(p: &[f64], g: &[f64], params: &LossParams) -> Result<f64> {
    Ok(1.0 - tversky_index(p, g, params)?)
}

fn focal(ti: f64, gamma: f64) -> f64 {
    let base = 1.0 - ti;
    if gamma == 1.0 {
        base
    } else {
        base.powf(gamma)
    }
}

pub fn focal_tversky_loss(p: &[f64], g: &[f64], params: &LossParams) -> Result<f64> {
    Ok(focal(tversky_index(p, g, params)?, params.gamma))
}

/// Focal Tversky loss of one sample and its gradient with respect to `p`.
pub fn focal_tversky_with_grad(p: &[f64], g: &[f64], params: &LossParams) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    let c = soft_counts(p, g)?;
    let num = c.tp + params.epsilon;
    let den = c.tp + params.alpha * c.fn_ + params.beta * c.fp + params.epsilon;
    let ti = num / den;
    let base = 1.0 - ti;
    let loss = focal(ti, params.gamma);
    // d loss / d TI; zero at TI = 1 for gamma > 1, undefined below 1 so clamp to 0 there
    let dloss_dti = if params.gamma == 1.0 {
        -1.0
    } else if base > 0.0 {
        -params.gamma * base.powf(params.gamma - 1.0)
    } else {
        0.0
    };
    let grad = g
        .iter()
        .map(|&gi| {
            let dnum = gi;
            let dden = gi - params.alpha * gi + params.beta * (1.0 - gi);
            dloss_dti * (dnum * den - num * dden) / (den * den)
        })
        .collect();
    Ok((loss, grad))
}

fn per_sample<'a>(
    p: &'a Tensor,
    g: &'a Tensor,
    domains: &[Domain],
) -> Result<impl Iterator<Item = (usize, &'a [f64], &'a [f64])>> {
    if p.shape() != g.shape() {
        return Err(Error::shape(
            "batch_modality_loss",
            format!("prediction {:?} vs mask {:?}", p.shape(), g.shape()),
        ));
    }
    let n = *p
        .shape()
        .first()
        .ok_or_else(|| Error::shape("batch_modality_loss", "expected a batch axis"))?;
    if n == 0 {
        return Err(Error::Empty("batch".into()));
    }
    if domains.len() != n {
        return Err(Error::shape(
            "batch_modality_loss",
            format!("{} domain tags for a batch of {n}", domains.len()),
        ));
    }
    let stride = p.len() / n;
    Ok((0..n).map(move |i| {
        (
            i,
            &p.data()[i * stride..(i + 1) * stride],
            &g.data()[i * stride..(i + 1) * stride],
        )
    }))
}

/// Per-sample focal Tversky losses of a batch.
pub fn sample_losses(p: &Tensor, g: &Tensor, domains: &[Domain], table: &LossTable) -> Result<Vec<f64>> {
    per_sample(p, g, domains)?
        .map(|(i, ps, gs)| focal_tversky_loss(ps, gs, &table.get(domains[i])))
        .collect()
}

/// Mean focal Tversky loss over the batch, each sample with its domain's parameters.
pub fn batch_modality_loss(p: &Tensor, g: &Tensor, domains: &[Domain], table: &LossTable) -> Result<f64> {
    let losses = sample_losses(p, g, domains, table)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Records [`batch_modality_loss`] on the graph. Returns the loss node and
/// the per-sample loss values.
pub fn batch_modality_loss_node(
    graph: &mut Graph,
    p: Var,
    g: &Tensor,
    domains: &[Domain],
    table: &LossTable,
) -> Result<(Var, Vec<f64>)> {
    let pred = graph.value(p);
    let n = domains.len();
    let mut grad = Vec::with_capacity(pred.len());
    let mut losses = Vec::with_capacity(n);
    for (i, ps, gs) in per_sample(pred, g, domains)? {
        let (loss, sample_grad) = focal_tversky_with_grad(ps, gs, &table.get(domains[i]))?;
        losses.push(loss);
        grad.extend(sample_grad.into_iter().map(|d| d / n as f64));
    }
    let mean = losses.iter().sum::<f64>() / n as f64;
    let node = graph.scalar_fn(p, mean, grad)?;
    Ok((node, losses))
}
