//! Full finite-difference suite: every primitive plus the end-to-end
//! objective on a toy model small enough to sweep every parameter.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::gradcheck::{check_gradients, grad_check, CheckReport, Primitive};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::losses::{combined_loss, regularization_loss, soft_dice, LossConfig};
use crate::networks::{build_model, forward_train, ArchSpec, Bound, Variant};
use crate::rng::seeded;

pub const SUITE_TOL: f64 = 1e-4;

/// At most 500 parameters for every variant.
pub fn toy_spec() -> ArchSpec {
    ArchSpec {
        base_channels: 1,
        stages: 1,
        patch_extent: 8,
        n_domains: 2,
        reg_hidden: (4, 3),
        ..ArchSpec::default()
    }
}

/// Gradient check of the combined objective w.r.t. every model parameter.
pub fn end_to_end_check(variant: Variant, seed: u64, tol: f64) -> Result<CheckReport> {
    let mut spec = toy_spec();
    if variant == Variant::Bdm {
        spec.dropout_rate = 0.5;
    }
    let model = build_model::<f64>(&spec, variant, seed, 0.5)?;
    let mut rng = seeded(seed, &[0x7465_7374]);
    let d = spec.patch_extent;
    let patch = Tensor::new(
        vec![spec.in_channels, d, d, d],
        (0..spec.in_channels * d * d * d).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;
    let gt = Tensor::new(vec![d, d, d], (0..d * d * d).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect())?;
    let loss_cfg = LossConfig::tuned(variant);

    let inputs: Vec<Tensor<f64>> = model
        .components()
        .into_iter()
        .flat_map(|(_, set)| set.params.iter().map(|p| p.value.clone()))
        .collect();
    let (ne, nd) = (model.encoder.len(), model.decoder.len());
    check_gradients(
        &format!("end_to_end[{variant}]"),
        &inputs,
        |g, v| {
            let bound = Bound {
                encoder: v[..ne].to_vec(),
                decoder: v[ne..ne + nd].to_vec(),
                head: model.head.as_ref().map(|_| v[ne + nd..].to_vec()),
            };
            let x = g.constant(patch.clone());
            let mut drop = seeded(seed, &[0x6472_6f70]);
            let fwd = forward_train(g, &model, &bound, x, Some(&mut drop))?;
            let lesion = g.select(fwd.seg, 1)?;
            let target = g.constant(gt.clone());
            let l_seg = soft_dice(g, lesion, target, loss_cfg.epsilon)?;
            let mut reg_rng = seeded(seed, &[0x7261_6e64]);
            let l_reg = match fwd.domain {
                Some(c) => regularization_loss(g, c, 1, &loss_cfg, &mut reg_rng)?,
                None => None,
            };
            combined_loss(g, l_seg, l_reg, &loss_cfg)
        },
        tol,
    )
}

pub fn gradcheck_suite(seed: u64, tol: f64) -> Result<Vec<CheckReport>> {
    let mut out = Primitive::ALL
        .iter()
        .map(|&k| grad_check(k, seed, tol))
        .collect::<Result<Vec<_>>>()?;
    for v in Variant::ALL {
        out.push(end_to_end_check(v, seed, tol)?);
    }
    Ok(out)
}
