//! Segmentation and domain-regularization objectives.
//!
//! Every loss is built on a [`Graph`] so it differentiates end to end. The
//! `*_value` helpers evaluate the same graph code on plain slices.

use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::Variant;

/// Guard used inside logarithms and denominators.
pub const EPSILON: f64 = 1e-7;

/// Which auxiliary loss drives the regularization head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegKind {
    Pc,
    Rand,
    Du,
    None,
}

impl From<Variant> for RegKind {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Pc => RegKind::Pc,
            Variant::Rand => RegKind::Rand,
            Variant::Du => RegKind::Du,
            Variant::Bm | Variant::Bdm => RegKind::None,
        }
    }
}

impl FromStr for RegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NONE" => Ok(RegKind::None),
            other => Variant::from_str(other).map(RegKind::from),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: RegKind,
    pub lambda: f64,
    pub epsilon: f64,
    pub rng_seed: u64,
    /// Minimize |corr| instead of corr for the Pearson variant.
    pub pearson_abs: bool,
}

impl LossConfig {
    pub fn new(variant: RegKind, lambda: f64) -> Result<Self> {
        let cfg = LossConfig {
            variant,
            lambda,
            epsilon: EPSILON,
            rng_seed: 0,
            pearson_abs: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration with the grid-searched weight for `variant` (0 for baselines).
    pub fn tuned(variant: Variant) -> Self {
        LossConfig::new(variant.into(), variant.tuned_lambda().unwrap_or(0.0))
            .expect("tuned weights lie in [0, 1]")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Target distribution over domains for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTarget {
    h: Vec<f64>,
}

impl DomainTarget {
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::invalid(format!("domain index {index} out of range for {n} domains")));
        }
        let mut h = vec![0.0; n];
        h[index] = 1.0;
        Ok(DomainTarget { h })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("uniform target over zero domains"));
        }
        Ok(DomainTarget {
            h: vec![1.0 / n as f64; n],
        })
    }

    /// One-hot target at an index drawn uniformly from all `n` domains.
    pub fn random(n: usize, rng: &mut impl Rng) -> Result<(Self, usize)> {
        if n == 0 {
            return Err(Error::invalid("random target over zero domains"));
        }
        let j = rng.random_range(0..n);
        Ok((Self::one_hot(n, j)?, j))
    }

    pub fn values(&self) -> &[f64] {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

fn expect_same(g: &Graph<impl Real>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// `1 - 2 Σ s g / (Σ s² + Σ g² + ε)`.
pub fn soft_dice<T: Real>(g: &mut Graph<T>, s: Var, gt: Var, eps: f64) -> Result<Var> {
    expect_same(g, "soft_dice", s, gt)?;
    let sg = g.mul(s, gt)?;
    let inter = g.sum(sg);
    let ss = g.mul(s, s)?;
    let ss = g.sum(ss);
    let gg = g.mul(gt, gt)?;
    let gg = g.sum(gg);
    let den = g.add(ss, gg)?;
    let den = g.offset(den, eps);
    let ratio = g.div(inter, den)?;
    let ratio = g.scale(ratio, -2.0);
    Ok(g.offset(ratio, 1.0))
}

/// Pearson correlation between predicted domain probabilities and a target,
/// with `ε` added to each variance under the square root.
pub fn pearson_loss<T: Real>(
    g: &mut Graph<T>,
    c: Var,
    h: &DomainTarget,
    eps: f64,
    absolute: bool,
) -> Result<Var> {
    let n = g.value(c).numel();
    if n != h.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson_loss",
            left: g.shape(c).to_vec(),
            right: vec![h.len()],
        });
    }
    if n < 2 {
        return Err(Error::Domain {
            op: "pearson_loss",
            detail: format!("correlation undefined for {n} domain(s)"),
        });
    }
    let h_mean = h.values().iter().sum::<f64>() / n as f64;
    let h_centered: Vec<f64> = h.values().iter().map(|v| v - h_mean).collect();
    let h_var: f64 = h_centered.iter().map(|v| v * v).sum();

    let c_mean = g.mean(c);
    let cc = g.sub(c, c_mean)?;
    let hc = g.constant(Tensor::from_f64(g.shape(c).to_vec(), &h_centered)?);
    let prod = g.mul(cc, hc)?;
    let num = g.sum(prod);
    let sq = g.mul(cc, cc)?;
    let c_var = g.sum(sq);
    let c_var = g.offset(c_var, eps);
    let c_sd = g.sqrt(c_var)?;
    let den = g.scale(c_sd, (h_var + eps).sqrt());
    let r = g.div(num, den)?;
    Ok(if absolute { g.abs(r) } else { r })
}

/// `-Σ h_j log(clamp(c_j, ε, 1))`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, c: Var, h: &DomainTarget, eps: f64) -> Result<Var> {
    let n = g.value(c).numel();
    if n != h.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: g.shape(c).to_vec(),
            right: vec![h.len()],
        });
    }
    let cl = g.clamp(c, eps, 1.0);
    let lg = g.log(cl)?;
    let hv = g.constant(Tensor::from_f64(g.shape(c).to_vec(), h.values())?);
    let p = g.mul(lg, hv)?;
    let s = g.sum(p);
    Ok(g.neg(s))
}

/// Cross-entropy against a one-hot target at a fresh uniform draw over all
/// domains. Returns the loss and the drawn index.
pub fn randomized_ce_loss<T: Real>(
    g: &mut Graph<T>,
    c: Var,
    rng: &mut impl Rng,
    eps: f64,
) -> Result<(Var, usize)> {
    let n = g.value(c).numel();
    let (_, j) = DomainTarget::random(n, rng)?;
    let cl = g.clamp(c, eps, 1.0);
    let lg = g.log(cl)?;
    let pick = g.select(lg, j)?;
    Ok((g.neg(pick), j))
}

/// Cross-entropy against the uniform distribution: `-(1/n) Σ log c_j`.
pub fn discrete_uniform_loss<T: Real>(g: &mut Graph<T>, c: Var, eps: f64) -> Result<Var> {
    let cl = g.clamp(c, eps, 1.0);
    let lg = g.log(cl)?;
    let m = g.mean(lg);
    Ok(g.neg(m))
}

/// Regularization term for one sample whose true domain is `domain`.
pub fn regularization_loss<T: Real>(
    g: &mut Graph<T>,
    c: Var,
    domain: usize,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<Option<Var>> {
    let n = g.value(c).numel();
    Ok(match cfg.variant {
        RegKind::Pc => {
            let h = DomainTarget::one_hot(n, domain)?;
            Some(pearson_loss(g, c, &h, cfg.epsilon, cfg.pearson_abs)?)
        }
        RegKind::Rand => Some(randomized_ce_loss(g, c, rng, cfg.epsilon)?.0),
        RegKind::Du => Some(discrete_uniform_loss(g, c, cfg.epsilon)?),
        RegKind::None => None,
    })
}

/// `l_seg + λ l_reg`, or `l_seg` alone when no regularizer is configured.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    l_seg: Var,
    l_reg: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    match (cfg.variant, l_reg) {
        (RegKind::None, _) => Ok(l_seg),
        (_, Some(r)) => {
            let w = g.scale(r, cfg.lambda);
            g.add(l_seg, w)
        }
        (v, None) => Err(Error::invalid(format!(
            "variant {v:?} needs a regularization term"
        ))),
    }
}

fn eval1(values: &[f64], f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_vec(values.to_vec()));
    let out = f(&mut g, c)?;
    Ok(g.value(out).item())
}

pub fn soft_dice_value(s: &[f64], gt: &[f64], eps: f64) -> Result<f64> {
    if s.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_dice",
            left: vec![s.len()],
            right: vec![gt.len()],
        });
    }
    let mut g = Graph::new();
    let sv = g.constant(Tensor::from_vec(s.to_vec()));
    let gv = g.constant(Tensor::from_vec(gt.to_vec()));
    let l = soft_dice(&mut g, sv, gv, eps)?;
    Ok(g.value(l).item())
}

pub fn pearson_value(c: &[f64], h: &DomainTarget, eps: f64) -> Result<f64> {
    eval1(c, |g, v| pearson_loss(g, v, h, eps, false))
}

pub fn cross_entropy_value(c: &[f64], h: &DomainTarget, eps: f64) -> Result<f64> {
    eval1(c, |g, v| cross_entropy(g, v, h, eps))
}

pub fn discrete_uniform_value(c: &[f64], eps: f64) -> Result<f64> {
    eval1(c, |g, v| discrete_uniform_loss(g, v, eps))
}

pub fn combined_value(l_seg: f64, l_reg: Option<f64>, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::scalar(l_seg));
    let r = l_reg.map(|r| g.constant(Tensor::scalar(r)));
    let out = combined_loss(&mut g, s, r, cfg)?;
    Ok(g.value(out).item())
}
