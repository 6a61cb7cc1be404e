//! Encoder, decoder and regularization head.
//!
//! The encoder has `stages` down-sampling stages (two 3³ convolutions with
//! ReLU, then 2³ max-pooling; channels double per stage) followed by a
//! bottom block. The decoder mirrors it with stride-2 transposed
//! convolutions and skip concatenation, ending in a 1³ convolution and a
//! per-voxel softmax. The head is a three-layer perceptron with softmax over
//! the training sites, fed by the latent vector.

mod forward;
mod io;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub use forward::{
    decode, encode, forward_train, latent_vector, predict_lesion, regularize_head, to_latent,
    Encoded, Forward,
};
pub use io::{read_params, write_params, MODEL_MAGIC};

/// Method variant under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Pearson-correlation regularization.
    Pc,
    /// Randomized cross-entropy regularization.
    Rand,
    /// Discrete-uniform cross-entropy regularization.
    Du,
    /// Backbone only.
    Bm,
    /// Backbone with dropout.
    Bdm,
}

impl Variant {
    /// Table order: the three regularized variants, then the baselines.
    pub const ALL: [Variant; 5] = [Variant::Pc, Variant::Rand, Variant::Du, Variant::Bm, Variant::Bdm];

    pub fn has_head(self) -> bool {
        matches!(self, Variant::Pc | Variant::Rand | Variant::Du)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Pc => "PC",
            Variant::Rand => "RAND",
            Variant::Du => "DU",
            Variant::Bm => "BM",
            Variant::Bdm => "BDM",
        }
    }

    /// Regularization weight found by grid search for each regularized variant.
    pub fn tuned_lambda(self) -> Option<f64> {
        match self {
            Variant::Pc => Some(0.2),
            Variant::Du => Some(0.3),
            Variant::Rand => Some(0.1),
            Variant::Bm | Variant::Bdm => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PC" => Ok(Variant::Pc),
            "RAND" => Ok(Variant::Rand),
            "DU" => Ok(Variant::Du),
            "BM" => Ok(Variant::Bm),
            "BDM" => Ok(Variant::Bdm),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}` (expected BM, BDM, PC, RAND or DU)"
            ))),
        }
    }
}

/// How the bottleneck map becomes the head's input vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// Global average pool per channel.
    AvgPool,
    /// Row-major flattening of the whole bottleneck.
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub seg_classes: usize,
    pub n_domains: usize,
    pub reg_hidden: (usize, usize),
    pub dropout_rate: f64,
    pub patch_extent: usize,
    pub latent: LatentMode,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            in_channels: 4,
            base_channels: 8,
            stages: 4,
            seg_classes: 2,
            n_domains: 2,
            reg_hidden: (64, 32),
            dropout_rate: 0.0,
            patch_extent: 64,
            latent: LatentMode::AvgPool,
        }
    }
}

impl ArchSpec {
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.stages)
    }

    pub fn bottleneck_extent(&self) -> usize {
        self.patch_extent >> self.stages
    }

    /// Length `p` of the latent vector.
    pub fn latent_dim(&self) -> usize {
        match self.latent {
            LatentMode::AvgPool => self.bottleneck_channels(),
            LatentMode::Flatten => self.bottleneck_channels() * self.bottleneck_extent().pow(3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::invalid("stages must be >= 1"));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.seg_classes < 2 {
            return Err(Error::invalid(
                "in_channels and base_channels must be >= 1, seg_classes >= 2",
            ));
        }
        if self.n_domains == 0 || self.reg_hidden.0 == 0 || self.reg_hidden.1 == 0 {
            return Err(Error::invalid("n_domains and head widths must be >= 1"));
        }
        let unit = 1usize << self.stages;
        if self.patch_extent == 0 || self.patch_extent % unit != 0 {
            return Err(Error::invalid(format!(
                "patch extent {} not divisible by 2^{} = {unit}",
                self.patch_extent, self.stages
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered parameter list of one network component.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    pub params: Vec<NamedParam<T>>,
}

impl<T: Real> ParamSet<T> {
    fn push(&mut self, name: String, value: Tensor<T>) {
        self.params.push(NamedParam { name, value });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect()
    }
}

/// Parameters of all three components plus the architecture they realize.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub spec: ArchSpec,
    pub variant: Variant,
    pub encoder: ParamSet<T>,
    pub decoder: ParamSet<T>,
    pub head: Option<ParamSet<T>>,
    /// Cleared once training finishes: the head is kept but unused at inference.
    pub head_active: bool,
}

/// Graph handles for every parameter of a bundle, in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub head: Option<Vec<Var>>,
}

impl Bound {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(self.head.iter().flatten())
            .copied()
    }
}

/// Component tags used in parameter streams and file names.
pub const COMPONENTS: [&str; 3] = ["E", "D", "R"];

impl<T: Real> ModelBundle<T> {
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            encoder: self.encoder.bind(g, trainable),
            decoder: self.decoder.bind(g, trainable),
            head: self.head.as_ref().map(|h| h.bind(g, trainable)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.count() + self.decoder.count() + self.head.as_ref().map_or(0, |h| h.count())
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.all_finite()
            && self.decoder.all_finite()
            && self.head.as_ref().is_none_or(|h| h.all_finite())
    }

    /// Parameter sets tagged `E`, `D`, `R`.
    pub fn components(&self) -> Vec<(&'static str, &ParamSet<T>)> {
        let mut out = vec![(COMPONENTS[0], &self.encoder), (COMPONENTS[1], &self.decoder)];
        if let Some(h) = &self.head {
            out.push((COMPONENTS[2], h));
        }
        out
    }

    pub fn components_mut(&mut self) -> Vec<&mut ParamSet<T>> {
        let mut out = vec![&mut self.encoder, &mut self.decoder];
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            spec: self.spec.clone(),
            variant: self.variant,
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            head: self.head.as_ref().map(|h| h.cast()),
            head_active: self.head_active,
        }
    }
}

fn gaussian<T: Real>(rng: &mut impl Rng, shape: Vec<usize>, sigma: f64) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = if sigma == 0.0 {
        vec![T::zero(); n]
    } else {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::invalid(format!("init_sigma {sigma}: {e}")))?;
        (0..n).map(|_| T::of(normal.sample(rng))).collect()
    };
    Tensor::new(shape, data)
}

/// Standard deviation rule for the Gaussian weight draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// One standard deviation for every weight.
    Fixed(f64),
    /// `sqrt(2 / fan_in)` per layer.
    He,
}

impl Init {
    pub fn sigma(self, fan_in: usize) -> f64 {
        match self {
            Init::Fixed(s) => s,
            Init::He => (2.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Fixed(s) => write!(f, "{s}"),
            Init::He => f.write_str("he"),
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("he") {
            return Ok(Init::He);
        }
        s.parse()
            .map(Init::Fixed)
            .map_err(|_| Error::invalid(format!("init: expected \"he\" or a number, got {s:?}")))
    }
}

/// Builds a model with weights drawn from `Normal(0, init_sigma²)` and zero
/// biases. Each component draws from its own stream, so a model without a
/// head shares encoder and decoder weights with one that has it.
pub fn build_model<T: Real>(
    spec: &ArchSpec,
    variant: Variant,
    seed: u64,
    init_sigma: f64,
) -> Result<ModelBundle<T>> {
    build_model_with(spec, variant, seed, Init::Fixed(init_sigma))
}

/// As [`build_model`] with a per-layer standard deviation rule.
pub fn build_model_with<T: Real>(spec: &ArchSpec, variant: Variant, seed: u64, init: Init) -> Result<ModelBundle<T>> {
    spec.validate()?;
    if let Init::Fixed(sigma) = init {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("init_sigma {sigma} must be finite and >= 0")));
        }
    }
    if variant != Variant::Bdm && spec.dropout_rate != 0.0 {
        return Err(Error::invalid(format!(
            "dropout_rate must be 0 for variant {variant}"
        )));
    }
    let k = 3;
    let conv = |set: &mut ParamSet<T>, rng: &mut _, name: String, shape: Vec<usize>| -> Result<()> {
        let (out, fan_in) = (shape[0], shape[1..].iter().product());
        set.push(format!("{name}.w"), gaussian(rng, shape, init.sigma(fan_in))?);
        set.push(format!("{name}.b"), Tensor::zeros(vec![out]));
        Ok(())
    };

    let mut rng = seeded(seed, &[0x45]);
    let mut encoder = ParamSet::default();
    let mut cin = spec.in_channels;
    for s in 0..=spec.stages {
        let c = spec.channels(s);
        let tag = if s == spec.stages { "bottom".to_string() } else { format!("enc{s}") };
        conv(&mut encoder, &mut rng, format!("{tag}.conv1"), vec![c, cin, k, k, k])?;
        conv(&mut encoder, &mut rng, format!("{tag}.conv2"), vec![c, c, k, k, k])?;
        cin = c;
    }

    let mut rng = seeded(seed, &[0x44]);
    let mut decoder = ParamSet::default();
    for s in (0..spec.stages).rev() {
        let (c, below) = (spec.channels(s), spec.channels(s + 1));
        // transposed kernels are [C_in, C_out, k, k, k]
        decoder.push(format!("dec{s}.up.w"), gaussian(&mut rng, vec![below, c, 2, 2, 2], init.sigma(below))?);
        decoder.push(format!("dec{s}.up.b"), Tensor::zeros(vec![c]));
        conv(&mut decoder, &mut rng, format!("dec{s}.conv1"), vec![c, 2 * c, k, k, k])?;
        conv(&mut decoder, &mut rng, format!("dec{s}.conv2"), vec![c, c, k, k, k])?;
    }
    conv(
        &mut decoder,
        &mut rng,
        "out".to_string(),
        vec![spec.seg_classes, spec.base_channels, 1, 1, 1],
    )?;

    let head = if variant.has_head() {
        let mut rng = seeded(seed, &[0x52]);
        let mut head = ParamSet::default();
        let widths = [
            spec.latent_dim(),
            spec.reg_hidden.0,
            spec.reg_hidden.1,
            spec.n_domains,
        ];
        for (i, pair) in widths.windows(2).enumerate() {
            head.push(format!("fc{i}.w"), gaussian(&mut rng, vec![pair[1], pair[0]], init.sigma(pair[0]))?);
            head.push(format!("fc{i}.b"), Tensor::zeros(vec![pair[1]]));
        }
        Some(head)
    } else {
        None
    };

    Ok(ModelBundle {
        spec: spec.clone(),
        variant,
        encoder,
        decoder,
        head,
        head_active: variant.has_head(),
    })
}
