use rand::Rng;

use super::{Bound, LatentMode, ModelBundle, Variant};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SessionRng;

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, at: 0 }
    }

    fn pair(&mut self) -> (Var, Var) {
        let p = (self.vars[self.at], self.vars[self.at + 1]);
        self.at += 2;
        p
    }
}

fn conv_relu<T: Real>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.conv3d(x, w, b, 1, 1)?;
    Ok(g.relu(y))
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut SessionRng) -> Result<Var> {
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

pub struct Encoded {
    pub bottleneck: Var,
    /// Pre-pool output of every down-sampling stage, shallowest first.
    pub skips: Vec<Var>,
}

/// Runs the encoder. Dropout is applied only when `dropout_rng` is given and
/// the bundle is a BDM with a positive rate.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    model: &ModelBundle<T>,
    bound: &Bound,
    patch: Var,
    mut dropout_rng: Option<&mut SessionRng>,
) -> Result<Encoded> {
    let spec = &model.spec;
    let shape = g.shape(patch).to_vec();
    let unit = 1usize << spec.stages;
    if shape.len() != 4 || shape[0] != spec.in_channels || shape[1..].iter().any(|&e| e % unit != 0) {
        return Err(Error::shape(
            "encode",
            format!(
                "patch {shape:?} must be [{}, d, d, d] with d divisible by {unit}",
                spec.in_channels
            ),
        ));
    }
    let drop = model.variant == Variant::Bdm && spec.dropout_rate > 0.0;
    let mut cur = Cursor::new(&bound.encoder);
    let mut skips = Vec::with_capacity(spec.stages);
    let mut x = patch;
    for s in 0..spec.stages {
        x = conv_relu(g, x, cur.pair())?;
        x = conv_relu(g, x, cur.pair())?;
        if s + 2 > spec.stages {
            if let (true, Some(rng)) = (drop, dropout_rng.as_deref_mut()) {
                x = dropout(g, x, spec.dropout_rate, rng)?;
            }
        }
        skips.push(x);
        x = g.maxpool3d(x, 2, 2)?;
    }
    x = conv_relu(g, x, cur.pair())?;
    x = conv_relu(g, x, cur.pair())?;
    if let (true, Some(rng)) = (drop, dropout_rng) {
        x = dropout(g, x, spec.dropout_rate, rng)?;
    }
    Ok(Encoded { bottleneck: x, skips })
}

/// Latent vector of the bottleneck.
pub fn to_latent<T: Real>(g: &mut Graph<T>, model: &ModelBundle<T>, bottleneck: Var) -> Result<Var> {
    match model.spec.latent {
        LatentMode::AvgPool => g.spatial_mean(bottleneck),
        LatentMode::Flatten => {
            let n = g.value(bottleneck).numel();
            if n != model.spec.latent_dim() {
                return Err(Error::shape(
                    "to_latent",
                    format!("flattened bottleneck has {n} values, head expects {}", model.spec.latent_dim()),
                ));
            }
            g.reshape(bottleneck, vec![n])
        }
    }
}

/// Decoder with skip concatenation; returns per-voxel class probabilities.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    model: &ModelBundle<T>,
    bound: &Bound,
    bottleneck: Var,
    skips: &[Var],
) -> Result<Var> {
    let spec = &model.spec;
    if skips.len() != spec.stages {
        return Err(Error::shape(
            "decode",
            format!("expected {} skips, got {}", spec.stages, skips.len()),
        ));
    }
    let mut cur = Cursor::new(&bound.decoder);
    let mut x = bottleneck;
    for s in (0..spec.stages).rev() {
        let (w, b) = cur.pair();
        x = g.conv_transpose3d(x, w, b, 2)?;
        x = g.concat(x, skips[s])?;
        x = conv_relu(g, x, cur.pair())?;
        x = conv_relu(g, x, cur.pair())?;
    }
    let (w, b) = cur.pair();
    let logits = g.conv3d(x, w, b, 1, 0)?;
    g.softmax(logits, 0)
}

/// Domain probabilities from a latent vector.
pub fn regularize_head<T: Real>(
    g: &mut Graph<T>,
    model: &ModelBundle<T>,
    bound: &Bound,
    latent: Var,
) -> Result<Var> {
    if !model.variant.has_head() {
        return Err(Error::HeadAbsent);
    }
    let vars = bound.head.as_deref().ok_or(Error::HeadAbsent)?;
    let mut cur = Cursor::new(vars);
    let (w, b) = cur.pair();
    let h = g.dense(latent, w, b)?;
    let h = g.relu(h);
    let (w, b) = cur.pair();
    let h = g.dense(h, w, b)?;
    let h = g.relu(h);
    let (w, b) = cur.pair();
    let logits = g.dense(h, w, b)?;
    g.softmax(logits, 0)
}

pub struct Forward {
    /// `[seg_classes, d, d, d]` probabilities.
    pub seg: Var,
    /// Domain probabilities; absent for the baselines.
    pub domain: Option<Var>,
    pub latent: Var,
}

/// Training-mode forward pass through all components.
pub fn forward_train<T: Real>(
    g: &mut Graph<T>,
    model: &ModelBundle<T>,
    bound: &Bound,
    patch: Var,
    dropout_rng: Option<&mut SessionRng>,
) -> Result<Forward> {
    let enc = encode(g, model, bound, patch, dropout_rng)?;
    let latent = to_latent(g, model, enc.bottleneck)?;
    let seg = decode(g, model, bound, enc.bottleneck, &enc.skips)?;
    let domain = if model.variant.has_head() {
        Some(regularize_head(g, model, bound, latent)?)
    } else {
        None
    };
    Ok(Forward { seg, domain, latent })
}

/// Inference: lesion-class probability volume `[d, d, d]`. Dropout is off
/// and the regularization head is not evaluated.
pub fn predict_lesion<T: Real>(model: &ModelBundle<T>, patch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let x = g.constant(patch.clone());
    let enc = encode(&mut g, model, &bound, x, None)?;
    let seg = decode(&mut g, model, &bound, enc.bottleneck, &enc.skips)?;
    let lesion = g.select(seg, 1)?;
    Ok(g.value(lesion).clone())
}

/// Inference-mode latent vector of one patch.
pub fn latent_vector<T: Real>(model: &ModelBundle<T>, patch: &Tensor<T>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let x = g.constant(patch.clone());
    let enc = encode(&mut g, model, &bound, x, None)?;
    let r = to_latent(&mut g, model, enc.bottleneck)?;
    Ok(g.value(r).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, ArchSpec};
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn spec(d: usize, stages: usize) -> ArchSpec {
        ArchSpec {
            base_channels: 2,
            stages,
            patch_extent: d,
            n_domains: 4,
            reg_hidden: (5, 3),
            ..ArchSpec::default()
        }
    }

    fn random_patch(c: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seeded(seed, &[]);
        let n = c * d * d * d;
        Tensor::new(vec![c, d, d, d], (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn shapes_round_trip_and_bottleneck_extent() {
        for (d, stages) in [(16, 3), (32, 4)] {
            let m = build_model::<f64>(&spec(d, stages), Variant::Du, 1, 0.2).unwrap();
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let x = g.constant(random_patch(4, d, 2));
            let enc = encode(&mut g, &m, &b, x, None).unwrap();
            assert_eq!(g.shape(enc.bottleneck), &[2 << stages, d >> stages, d >> stages, d >> stages]);
            assert_eq!(enc.skips.len(), stages);
            for (s, &sk) in enc.skips.iter().enumerate() {
                assert_eq!(g.shape(sk)[1], d >> s);
            }
            let out = forward_train(&mut g, &m, &b, x, None).unwrap();
            assert_eq!(g.shape(out.seg), &[2, d, d, d]);
            let probs = g.value(out.seg).data();
            let per = d * d * d;
            for i in 0..per {
                assert!((probs[i] + probs[per + i] - 1.0).abs() < 1e-6);
            }
            let c = g.value(out.domain.unwrap()).data();
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let m = build_model::<f32>(&spec(32, 4), Variant::Bm, 1, 0.2).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let x = g.constant(random_patch(4, 32, 2).cast());
        let enc = encode(&mut g, &m, &b, x, None).unwrap();
        assert_eq!(g.shape(enc.bottleneck)[1], 2);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = build_model::<f64>(&spec(8, 2), Variant::Pc, 0, 0.0).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let zero = g.constant(Tensor::zeros(vec![4, 8, 8, 8]));
        let enc = encode(&mut g, &m, &b, zero, None).unwrap();
        assert!(g.value(enc.bottleneck).data().iter().all(|&v| v == 0.0));

        let x = g.constant(random_patch(4, 8, 5));
        let out = forward_train(&mut g, &m, &b, x, None).unwrap();
        assert!(g.value(out.seg).data().iter().all(|&v| v == 0.5));
        assert!(g.value(out.domain.unwrap()).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn latent_pool_values() {
        let m = build_model::<f64>(&spec(8, 2), Variant::Pc, 0, 0.1).unwrap();
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(vec![2, 1, 1, 2], vec![3.0, 3.0, 0.0, 4.0]).unwrap());
        let r = to_latent(&mut g, &m, c).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 2.0]);
    }

    #[test]
    fn head_absent_for_baselines() {
        let m = build_model::<f64>(&spec(8, 2), Variant::Bm, 0, 0.1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let r = g.constant(Tensor::zeros(vec![8]));
        let err = regularize_head(&mut g, &m, &b, r).unwrap_err();
        assert_eq!(err.to_string(), "regularization head absent");
        let x = g.constant(random_patch(4, 8, 1));
        assert!(forward_train(&mut g, &m, &b, x, None).unwrap().domain.is_none());
    }

    #[test]
    fn bdm_dropout_only_in_training_mode() {
        let mut s = spec(8, 2);
        let bm = build_model::<f64>(&s, Variant::Bm, 4, 0.3).unwrap();
        let patch = random_patch(4, 8, 9);
        let mut bdm0 = bm.clone();
        bdm0.variant = Variant::Bdm;
        let mut rng = seeded(1, &[]);
        let run = |m: &ModelBundle<f64>, rng: Option<&mut SessionRng>| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let x = g.constant(patch.clone());
            let out = forward_train(&mut g, m, &b, x, rng).unwrap();
            g.value(out.seg).clone()
        };
        // rate 0 is a no-op
        assert_eq!(run(&bm, None), run(&bdm0, Some(&mut rng)));

        s.dropout_rate = 0.5;
        let mut bdm = bm.clone();
        bdm.variant = Variant::Bdm;
        bdm.spec = s;
        assert_ne!(run(&bdm, Some(&mut rng)), run(&bm, None));
        assert_eq!(predict_lesion(&bdm, &patch).unwrap(), predict_lesion(&bm, &patch).unwrap());
        assert_eq!(
            run(&bdm, None).data()[512..],
            predict_lesion(&bdm, &patch).unwrap().data()[..]
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let m = build_model::<f32>(&spec(16, 3), Variant::Rand, 8, 0.2).unwrap();
        let p = random_patch(4, 16, 3).cast::<f32>();
        assert_eq!(predict_lesion(&m, &p).unwrap(), predict_lesion(&m, &p).unwrap());
    }

    #[test]
    fn head_output_sensitive_to_latent() {
        let m = build_model::<f64>(&spec(8, 2), Variant::Pc, 2, 0.5).unwrap();
        let r0: Vec<f64> = (0..8).map(|i| 0.3 + 0.1 * i as f64).collect();
        let head = |r: &[f64]| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let rv = g.constant(Tensor::from_vec(r.to_vec()));
            let c = regularize_head(&mut g, &m, &b, rv).unwrap();
            g.value(c).data()[0]
        };
        let base = head(&r0);
        let h = 1e-5;
        let sens: f64 = (0..8)
            .map(|j| {
                let mut rp = r0.clone();
                rp[j] += h;
                ((head(&rp) - base) / h).abs()
            })
            .sum();
        assert!(sens > 0.0);
    }
}
