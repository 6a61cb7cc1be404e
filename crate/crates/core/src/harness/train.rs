use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::evaluate::{mean_dsc, EvalSettings};
use super::folds::FoldPlan;
use super::TrainConfig;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, regularization_loss, soft_dice, LossConfig};
use crate::networks::{build_model_with, forward_train, ModelBundle, NamedParam, Variant};
use crate::patchflow::{check_extent, extract_grid, extract_patches, filter_lesion_patches};
use crate::rng::{seeded, SessionRng};
use crate::synthdata::{Dataset, VolumeSample};

const BATCH_STREAM: u64 = 0x6261_7463;
const RAND_STREAM: u64 = 0x7261_6e64;
const DROPOUT_STREAM: u64 = 0x6472_6f70;
const INIT_STREAM: u64 = 0x696e_6974;

/// Maps training site ids to head class indices (sorted by site id).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainMap {
    sites: Vec<u32>,
}

impl DomainMap {
    pub fn from_samples(samples: &[&VolumeSample]) -> Self {
        let mut sites: Vec<u32> = samples.iter().map(|s| s.site_id).collect();
        sites.sort_unstable();
        sites.dedup();
        DomainMap { sites }
    }

    pub fn index(&self, site: u32) -> Option<usize> {
        self.sites.binary_search(&site).ok()
    }

    pub fn sites(&self) -> &[u32] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

struct PoolPatch {
    data: Tensor<f32>,
    target: Tensor<f32>,
    domain: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub seg: f64,
    /// Zero for variants without a regularizer.
    pub reg: f64,
}

/// One training session: model, optimizer state, patch pool and streams.
pub struct Trainer {
    cfg: TrainConfig,
    loss: LossConfig,
    adam: AdamConfig,
    pub model: ModelBundle<f32>,
    state: AdamState,
    pool: Vec<PoolPatch>,
    domains: DomainMap,
    batch_rng: SessionRng,
    reg_rng: SessionRng,
    drop_rng: SessionRng,
    pub steps_done: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, train: &[&VolumeSample]) -> Result<Self> {
        cfg.validate()?;
        check_extent(cfg.patch_extent, cfg.stages)?;
        let domains = DomainMap::from_samples(train);
        if cfg.variant.has_head() && domains.len() < 2 {
            return Err(Error::invalid(format!(
                "variant {} needs at least 2 training sites, got {}",
                cfg.variant,
                domains.len()
            )));
        }
        let mut pool = Vec::new();
        for s in train {
            let grid = extract_grid(s.dims(), cfg.patch_extent, cfg.overlap)?;
            let domain = domains.index(s.site_id).expect("site registered above");
            for r in filter_lesion_patches(extract_patches(s, &grid, cfg.patch_extent)?) {
                let target = Tensor::new(
                    vec![cfg.patch_extent; 3],
                    r.mask_patch.data().iter().map(|&v| v as f32).collect(),
                )?;
                pool.push(PoolPatch {
                    data: r.data,
                    target,
                    domain,
                });
            }
        }
        if pool.is_empty() {
            return Err(Error::invalid(
                "no training patch contains a lesion voxel; regenerate the cohort with more or larger lesions",
            ));
        }
        let model = build_model_with(
            &cfg.arch(domains.len().max(1)),
            cfg.variant,
            crate::rng::derive(cfg.seed, &[INIT_STREAM]),
            cfg.init,
        )?;
        let mut loss = LossConfig::new(cfg.variant.into(), cfg.lambda)?;
        loss.pearson_abs = cfg.pearson_abs;
        loss.rng_seed = cfg.seed;
        Ok(Trainer {
            loss,
            adam: AdamConfig {
                lr: cfg.lr,
                beta1: cfg.adam_betas.0,
                beta2: cfg.adam_betas.1,
                eps: cfg.adam_eps,
            },
            model,
            state: AdamState::new(),
            pool,
            domains,
            batch_rng: seeded(cfg.seed, &[BATCH_STREAM]),
            reg_rng: seeded(cfg.seed, &[RAND_STREAM]),
            drop_rng: seeded(cfg.seed, &[DROPOUT_STREAM]),
            steps_done: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn domains(&self) -> &DomainMap {
        &self.domains
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One minibatch step of the combined objective.
    pub fn step(&mut self) -> Result<StepLosses> {
        let b = self.cfg.batch_size;
        let picks: Vec<usize> = (0..b).map(|_| self.batch_rng.random_range(0..self.pool.len())).collect();
        let mut grads: Vec<Vec<f32>> = Vec::new();
        let mut sums = [0.0f64; 3];
        for &i in &picks {
            let p = &self.pool[i];
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, true);
            let x = g.constant(p.data.clone());
            let drop = (self.cfg.variant == Variant::Bdm).then_some(&mut self.drop_rng);
            let fwd = forward_train(&mut g, &self.model, &bound, x, drop)?;
            let lesion = g.select(fwd.seg, 1)?;
            let gt = g.constant(p.target.clone());
            let l_seg = soft_dice(&mut g, lesion, gt, self.loss.epsilon)?;
            let l_reg = match fwd.domain {
                Some(c) => regularization_loss(&mut g, c, p.domain, &self.loss, &mut self.reg_rng)?,
                None => None,
            };
            let total = combined_loss(&mut g, l_seg, l_reg, &self.loss)?;
            let t = g.value(total).item() as f64;
            if !t.is_finite() {
                return Err(Error::NonFiniteGradient(format!(
                    "combined loss is {t} at step {}",
                    self.steps_done
                )));
            }
            sums[0] += t;
            sums[1] += g.value(l_seg).item() as f64;
            sums[2] += l_reg.map_or(0.0, |r| g.value(r).item() as f64);
            let scaled = g.scale(total, 1.0 / b as f64);
            let mut gr = g.backward(scaled)?;
            let vars: Vec<_> = bound.all().collect();
            if grads.is_empty() {
                grads = vars
                    .iter()
                    .map(|&v| gr.take(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
                    .collect();
            } else {
                for (acc, &v) in grads.iter_mut().zip(&vars) {
                    if let Some(d) = gr.get(v) {
                        acc.iter_mut().zip(d).for_each(|(a, x)| *a += x);
                    }
                }
            }
        }
        let mut params: Vec<&mut NamedParam<f32>> = self
            .model
            .components_mut()
            .into_iter()
            .flat_map(|set| set.params.iter_mut())
            .collect();
        adam_step(&mut params, &grads, &mut self.state, &self.adam)?;
        self.steps_done += 1;
        let n = b as f64;
        Ok(StepLosses {
            total: sums[0] / n,
            seg: sums[1] / n,
            reg: sums[2] / n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub losses: StepLosses,
    pub elapsed_ms: u128,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_dsc: f64,
    pub elapsed_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` means the final ones.
    pub best_epoch: Option<usize>,
    /// Site ids in head class order.
    pub domain_sites: Vec<u32>,
}

impl TrainHistory {
    /// `step,loss_total,loss_seg,loss_reg`.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,loss_total,loss_seg,loss_reg\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{:.8},{:.8},{:.8}", r.step, r.losses.total, r.losses.seg, r.losses.reg);
        }
        s
    }

    /// `epoch,val_dsc`.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,val_dsc\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{}", r.epoch, crate::metrics::fmt_metric(r.val_dsc));
        }
        s
    }

    /// Validation DSC of the kept parameters.
    pub fn selected_val_dsc(&self) -> f64 {
        self.best_epoch
            .and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
            .map_or(f64::NAN, |r| r.val_dsc)
    }
}

pub(crate) fn lookup<'a>(dataset: &'a Dataset, ids: &[u32]) -> Result<Vec<&'a VolumeSample>> {
    ids.iter()
        .map(|&id| {
            dataset
                .get(id)
                .ok_or_else(|| Error::invalid(format!("subject {id} is not in the dataset")))
        })
        .collect()
}

/// Trains on the fold's training subjects, monitoring validation DSC after
/// every epoch and keeping the best epoch's parameters. The returned model
/// still carries its head, flagged inactive.
pub fn train_model(cfg: &TrainConfig, fold: &FoldPlan, dataset: &Dataset) -> Result<(ModelBundle<f32>, TrainHistory)> {
    let train = lookup(dataset, &fold.train_ids)?;
    let val = lookup(dataset, &fold.val_ids)?;
    let mut trainer = Trainer::new(cfg, &train)?;
    let settings = EvalSettings::from(cfg);
    let start = Instant::now();
    let mut history = TrainHistory {
        domain_sites: trainer.domains().sites().to_vec(),
        ..TrainHistory::default()
    };
    let mut best: Option<(f64, usize, ModelBundle<f32>)> = None;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let losses = trainer.step()?;
            history.steps.push(StepRecord {
                step: trainer.steps_done,
                losses,
                elapsed_ms: start.elapsed().as_millis(),
            });
        }
        let val_dsc = if val.is_empty() {
            f64::NAN
        } else {
            mean_dsc(&trainer.model, &val, &settings)?
        };
        history.epochs.push(EpochRecord {
            epoch,
            val_dsc,
            elapsed_ms: start.elapsed().as_millis(),
        });
        if best.as_ref().is_none_or(|(d, _, _)| val_dsc > *d) && !val_dsc.is_nan() {
            best = Some((val_dsc, epoch, trainer.model.clone()));
        }
    }
    let mut model = match best {
        Some((_, epoch, m)) => {
            history.best_epoch = Some(epoch);
            m
        }
        None => trainer.model,
    };
    model.head_active = false;
    Ok((model, history))
}

/// Trains one model per weight and returns the one with the best
/// validation DSC (ties go to the smaller weight) plus every score.
pub fn grid_search_lambda(
    cfg: &TrainConfig,
    values: &[f64],
    fold: &FoldPlan,
    dataset: &Dataset,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if values.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("lambda {v} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best = (sorted[0], f64::NEG_INFINITY);
    for &lambda in &sorted {
        let run = TrainConfig { lambda, ..cfg.clone() };
        let (_, hist) = train_model(&run, fold, dataset)?;
        let score = hist.selected_val_dsc();
        scores.push((lambda, score));
        if score > best.1 {
            best = (lambda, score);
        }
    }
    Ok((best.0, scores))
}
