//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::seeded;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so components whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub label: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel_err={:.3e} (tol {:.0e}, {} components)",
            self.label,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tol,
            self.checked
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_loss<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares `build`'s analytic gradient against central differences for
/// every component of every input.
pub fn check_gradients<F>(label: &str, inputs: &[Tensor<f64>], build: F, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with(label, inputs, build, tol, |_| {})
}

/// As [`check_gradients`], with a hook that may rewrite the analytic
/// gradients before comparison.
pub fn check_gradients_with<F, H>(
    label: &str,
    inputs: &[Tensor<f64>],
    build: F,
    tol: f64,
    hook: H,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    H: FnOnce(&mut [Vec<f64>]),
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    hook(&mut analytic);

    let mut work = inputs.to_vec();
    let mut max_err = 0.0f64;
    let mut checked = 0;
    for (which, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + FD_STEP;
            let plus = eval_loss(&work, &build)?;
            work[which].data_mut()[i] = orig - FD_STEP;
            let minus = eval_loss(&work, &build)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(a, numeric);
            max_err = if err.is_nan() { f64::INFINITY } else { max_err.max(err) };
            checked += 1;
        }
    }
    Ok(CheckReport {
        label: label.to_string(),
        max_rel_error: max_err,
        checked,
        tol,
        passed: max_err < tol,
    })
}

/// Primitive families covered by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Relu,
    Log,
    Sqrt,
    Sum,
    Mean,
    Conv3d,
    ConvTranspose3d,
    MaxPool3d,
    Dense,
    Softmax,
    SoftmaxCrossEntropy,
    SpatialMean,
    Concat,
}

impl Primitive {
    pub const ALL: [Primitive; 18] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Scale,
        Primitive::Relu,
        Primitive::Log,
        Primitive::Sqrt,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Conv3d,
        Primitive::ConvTranspose3d,
        Primitive::MaxPool3d,
        Primitive::Dense,
        Primitive::Softmax,
        Primitive::SoftmaxCrossEntropy,
        Primitive::SpatialMean,
        Primitive::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale => "scale",
            Primitive::Relu => "relu",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Conv3d => "conv3d",
            Primitive::ConvTranspose3d => "conv_transpose3d",
            Primitive::MaxPool3d => "maxpool3d",
            Primitive::Dense => "dense",
            Primitive::Softmax => "softmax",
            Primitive::SoftmaxCrossEntropy => "softmax+cross_entropy",
            Primitive::SpatialMean => "spatial_mean",
            Primitive::Concat => "concat",
        }
    }

    /// Input shapes used when none are given.
    pub fn default_shapes(self) -> Vec<Vec<usize>> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                vec![vec![2, 3, 4], vec![2, 3, 4]]
            }
            Primitive::Scale | Primitive::Relu | Primitive::Log | Primitive::Sqrt => {
                vec![vec![3, 5]]
            }
            Primitive::Sum | Primitive::Mean => vec![vec![7]],
            Primitive::Conv3d => vec![vec![1, 4, 4, 4], vec![2, 1, 3, 3, 3], vec![2]],
            Primitive::ConvTranspose3d => vec![vec![2, 2, 2, 2], vec![2, 3, 2, 2, 2], vec![3]],
            Primitive::MaxPool3d => vec![vec![1, 4, 4, 4]],
            Primitive::Dense => vec![vec![5], vec![3, 5], vec![3]],
            Primitive::Softmax => vec![vec![3, 2, 2]],
            Primitive::SoftmaxCrossEntropy => vec![vec![4]],
            Primitive::SpatialMean => vec![vec![3, 2, 2, 2]],
            Primitive::Concat => vec![vec![1, 2, 2, 2], vec![2, 2, 2, 2]],
        }
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], positive: bool) -> Result<Tensor<f64>> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if positive {
                rng.random_range(0.5..2.0)
            } else {
                StandardNormal.sample(rng)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Contracts a tensor-valued output against fixed random weights so that
/// every output component contributes to the scalar under test.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn forward(g: &mut Graph<f64>, kind: Primitive, v: &[Var]) -> Result<Var> {
    Ok(match kind {
        Primitive::Add => g.add(v[0], v[1])?,
        Primitive::Sub => g.sub(v[0], v[1])?,
        Primitive::Mul => g.mul(v[0], v[1])?,
        Primitive::Div => g.div(v[0], v[1])?,
        Primitive::Scale => g.scale(v[0], -1.75),
        Primitive::Relu => g.relu(v[0]),
        Primitive::Log => g.log(v[0])?,
        Primitive::Sqrt => g.sqrt(v[0])?,
        Primitive::Sum => g.sum(v[0]),
        Primitive::Mean => g.mean(v[0]),
        Primitive::Conv3d => g.conv3d(v[0], v[1], v[2], 1, 1)?,
        Primitive::ConvTranspose3d => g.conv_transpose3d(v[0], v[1], v[2], 2)?,
        Primitive::MaxPool3d => g.maxpool3d(v[0], 2, 2)?,
        Primitive::Dense => g.dense(v[0], v[1], v[2])?,
        Primitive::Softmax => g.softmax(v[0], 0)?,
        Primitive::SoftmaxCrossEntropy => {
            let p = g.softmax(v[0], 0)?;
            let c = g.clamp(p, 1e-7, 1.0);
            let l = g.log(c)?;
            let t = g.select(l, 1)?;
            g.neg(t)
        }
        Primitive::SpatialMean => g.spatial_mean(v[0])?,
        Primitive::Concat => g.concat(v[0], v[1])?,
    })
}

pub fn grad_check(kind: Primitive, seed: u64, tol: f64) -> Result<CheckReport> {
    grad_check_shapes(kind, &kind.default_shapes(), seed, tol)
}

/// Checks one primitive on seeded random inputs of the given shapes.
pub fn grad_check_shapes(
    kind: Primitive,
    shapes: &[Vec<usize>],
    seed: u64,
    tol: f64,
) -> Result<CheckReport> {
    let mut rng = seeded(seed, &[0x6772_6164]);
    let positive = |i: usize| match kind {
        Primitive::Log | Primitive::Sqrt => true,
        Primitive::Div => i == 1,
        _ => false,
    };
    let inputs = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random_tensor(&mut rng, s, positive(i)))
        .collect::<Result<Vec<_>>>()?;

    // Output shape is needed for the projection weights.
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = forward(&mut g, kind, &vars)?;
        g.shape(out).to_vec()
    };
    let weights = random_tensor(&mut rng, &out_shape, false)?;
    check_gradients(
        kind.name(),
        &inputs,
        move |g, v| {
            let out = forward(g, kind, v)?;
            project(g, out, &weights)
        },
        tol,
    )
}
