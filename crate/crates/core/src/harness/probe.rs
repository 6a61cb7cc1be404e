//! Site-classification probe on frozen encoder latents.
//!
//! Lower held-out accuracy means the latents carry less site information.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::adam::{adam_step, AdamConfig, AdamState};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::networks::{latent_vector, ModelBundle, NamedParam};
use crate::patchflow::{crop_volume, extract_grid};
use crate::rng::seeded;
use crate::synthdata::VolumeSample;

const SPLIT_STREAM: u64 = 0x7370_6c74;
const INIT_STREAM: u64 = 0x7072_6f62;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub seed: u64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub train_frac: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            seed: 0,
            hidden: 32,
            epochs: 300,
            lr: 1e-2,
            train_frac: 0.8,
        }
    }
}

/// One latent vector per grid patch, labeled with the subject's site.
pub fn latent_features(
    model: &ModelBundle<f32>,
    subjects: &[&VolumeSample],
    extent: usize,
    overlap: f64,
) -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for s in subjects {
        for origin in extract_grid(s.dims(), extent, overlap)? {
            let patch = crop_volume(&s.volume, origin, extent)?;
            feats.push(latent_vector(model, &patch)?.iter().map(|&v| v as f64).collect());
            labels.push(s.site_id);
        }
    }
    Ok((feats, labels))
}

struct Mlp {
    w1: NamedParam<f64>,
    b1: NamedParam<f64>,
    w2: NamedParam<f64>,
    b2: NamedParam<f64>,
    p: usize,
    h: usize,
    k: usize,
}

impl Mlp {
    fn new(p: usize, h: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, &[INIT_STREAM]);
        let mut dense = |name: &str, rows: usize, cols: usize| -> Result<(NamedParam<f64>, NamedParam<f64>)> {
            let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
            let w = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Ok((
                NamedParam {
                    name: format!("probe.{name}.w"),
                    value: Tensor::new(vec![rows, cols], w)?,
                },
                NamedParam {
                    name: format!("probe.{name}.b"),
                    value: Tensor::zeros(vec![rows]),
                },
            ))
        };
        let (w1, b1) = dense("fc0", h, p)?;
        let (w2, b2) = dense("fc1", k, h)?;
        Ok(Mlp { w1, b1, w2, b2, p, h, k })
    }

    /// Hidden activations and class probabilities.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = (self.w1.value.data(), self.b1.value.data(), self.w2.value.data(), self.b2.value.data());
        let hid: Vec<f64> = (0..self.h)
            .map(|j| {
                let z = b1[j] + (0..self.p).map(|i| w1[j * self.p + i] * x[i]).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        let logits: Vec<f64> = (0..self.k)
            .map(|c| b2[c] + (0..self.h).map(|j| w2[c * self.h + j] * hid[j]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        (hid, e.into_iter().map(|v| v / z).collect())
    }

    /// Mean cross-entropy gradients over a batch.
    fn gradients(&self, xs: &[&[f64]], ys: &[usize]) -> Vec<Vec<f64>> {
        let (p, h, k) = (self.p, self.h, self.k);
        let mut g = vec![vec![0.0; h * p], vec![0.0; h], vec![0.0; k * h], vec![0.0; k]];
        let w2 = self.w2.value.data();
        let n = xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let (hid, prob) = self.forward(x);
            let dlogit: Vec<f64> = (0..k).map(|c| (prob[c] - f64::from(u8::from(c == y))) / n).collect();
            for c in 0..k {
                g[3][c] += dlogit[c];
                for j in 0..h {
                    g[2][c * h + j] += dlogit[c] * hid[j];
                }
            }
            for j in 0..h {
                if hid[j] <= 0.0 {
                    continue;
                }
                let dh: f64 = (0..k).map(|c| dlogit[c] * w2[c * h + j]).sum();
                g[1][j] += dh;
                for i in 0..p {
                    g[0][j * p + i] += dh * x[i];
                }
            }
        }
        g
    }

    fn predict(&self, x: &[f64]) -> usize {
        let (_, prob) = self.forward(x);
        let mut best = 0;
        for c in 1..prob.len() {
            if prob[c] > prob[best] {
                best = c;
            }
        }
        best
    }
}

/// Trains a fresh two-layer probe on a seeded split and returns held-out
/// accuracy. Features are z-scored with training-split statistics.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[u32], cfg: &ProbeConfig) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::invalid("probe needs one label per non-empty feature set"));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid(format!(
            "probe needs at least 2 sites, got {}",
            classes.len()
        )));
    }
    let p = features[0].len();
    if p == 0 || features.iter().any(|f| f.len() != p) {
        return Err(Error::invalid("probe features must share a non-zero length"));
    }
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("probe needs at least 2 samples"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(cfg.seed, &[SPLIT_STREAM]));
    let n_train = ((n as f64 * cfg.train_frac).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let mut mean = vec![0.0; p];
    let mut sd = vec![0.0; p];
    for &i in train_idx {
        for d in 0..p {
            mean[d] += features[i][d] / n_train as f64;
        }
    }
    for &i in train_idx {
        for d in 0..p {
            sd[d] += (features[i][d] - mean[d]).powi(2) / n_train as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| (0..p).map(|d| (f[d] - mean[d]) / sd[d]).collect())
        .collect();
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label collected above"))
        .collect();

    let mut mlp = Mlp::new(p, cfg.hidden, classes.len(), cfg.seed)?;
    let xs: Vec<&[f64]> = train_idx.iter().map(|&i| z[i].as_slice()).collect();
    let ys: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
    let mut state = AdamState::new();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    for _ in 0..cfg.epochs {
        let grads = mlp.gradients(&xs, &ys);
        let Mlp { w1, b1, w2, b2, .. } = &mut mlp;
        adam_step(&mut [w1, b1, w2, b2], &grads, &mut state, &adam)?;
    }
    let correct = test_idx.iter().filter(|&&i| mlp.predict(&z[i]) == y[i]).count();
    Ok(correct as f64 / test_idx.len() as f64)
}

/// Probe accuracy on the latents of `subjects` under a frozen encoder.
pub fn probe_domain_accuracy(
    model: &ModelBundle<f32>,
    subjects: &[&VolumeSample],
    extent: usize,
    overlap: f64,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let mut sites: Vec<u32> = subjects.iter().map(|s| s.site_id).collect();
    sites.sort_unstable();
    sites.dedup();
    if sites.len() < 2 {
        return Err(Error::invalid("probe needs subjects from at least 2 sites"));
    }
    let (feats, labels) = latent_features(model, subjects, extent, overlap)?;
    probe_accuracy(&feats, &labels, cfg)
}
