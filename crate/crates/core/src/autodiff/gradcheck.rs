//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-4;

const MAX_RESAMPLES: usize = 100;

/// A differentiable computation that can be checked against finite
/// differences.
pub trait CheckableOp {
    fn name(&self) -> &str;

    fn build(&self, g: &mut Graph<f64>, inputs: &[Var]) -> Result<Var>;

    /// Draws one input tensor; uniform in `[-1, 1]` unless overridden.
    fn sample(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).expect("sampled shape")
    }

    /// True when the sampled point sits too close to a kink or a
    /// degenerate configuration for finite differences to be meaningful.
    fn is_degenerate(&self, _inputs: &[Tensor<f64>]) -> bool {
        false
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |g_analytic - g_fd| / max(1, |g_fd|)` over every input element.
    pub max_rel_error: f64,
    /// How many times the inputs were redrawn by the degeneracy guard.
    pub resamples: usize,
}

/// Checks `op` at random inputs of the given shapes.
pub fn grad_check(
    op: &dyn CheckableOp,
    shapes: &[Vec<usize>],
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| op.sample(s, &mut rng)).collect();
    check_from(op, inputs, &mut rng)
}

/// Checks `op` starting from explicit inputs; degenerate inputs are
/// redrawn with the same shapes.
pub fn grad_check_at(
    op: &dyn CheckableOp,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_from(op, inputs, &mut rng)
}

fn check_from(
    op: &dyn CheckableOp,
    mut inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut resamples = 0;
    while op.is_degenerate(&inputs) {
        if resamples == MAX_RESAMPLES {
            return Err(Error::Parameter(format!(
                "{}: no non-degenerate sample after {MAX_RESAMPLES} draws",
                op.name()
            )));
        }
        inputs = inputs
            .iter()
            .map(|t| op.sample(t.shape(), rng))
            .collect();
        resamples += 1;
    }

    // Random projection turns any output into a scalar loss.
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op.build(&mut g, &vars)?;
        let n = g.value(out).len();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(g.shape(out).to_vec(), data)?
    };

    let loss_at = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op.build(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = op.build(&mut g, &vars)?;
    let w = g.constant(probe.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    g.backward(loss)?;

    let mut max_rel_error: f64 = 0.0;
    let mut work = inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad_data(*v)
            .map(|d| d.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = (analytic[j] - fd).abs() / fd.abs().max(1.0);
            max_rel_error = max_rel_error.max(err);
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        resamples,
    })
}

type BuildFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync;
type GuardFn = dyn Fn(&[Tensor<f64>]) -> bool + Send + Sync;

/// A [`CheckableOp`] assembled from closures.
pub struct FnOp {
    name: String,
    build: Box<BuildFn>,
    guard: Option<Box<GuardFn>>,
    positive: bool,
}

impl FnOp {
    pub fn new(
        name: impl Into<String>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            build: Box::new(build),
            guard: None,
            positive: false,
        }
    }

    pub fn with_guard(
        mut self,
        guard: impl Fn(&[Tensor<f64>]) -> bool + Send + Sync + 'static,
    ) -> Self {
        self.guard = Some(Box::new(guard));
        self
    }

    /// Samples inputs from `[0.5, 2]` instead of `[-1, 1]`.
    pub fn positive_inputs(mut self) -> Self {
        self.positive = true;
        self
    }
}

impl CheckableOp for FnOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn build(&self, g: &mut Graph<f64>, inputs: &[Var]) -> Result<Var> {
        (self.build)(g, inputs)
    }

    fn sample(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let (lo, hi) = if self.positive { (0.5, 2.0) } else { (-1.0, 1.0) };
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("sampled shape")
    }

    fn is_degenerate(&self, inputs: &[Tensor<f64>]) -> bool {
        self.guard.as_ref().is_some_and(|g| g(inputs))
    }
}

/// Guard for piecewise-linear activations: any first-input element within
/// `1e-3` of the kink at zero.
pub fn near_kink(inputs: &[Tensor<f64>]) -> bool {
    inputs[0].data().iter().any(|v| v.abs() < 1e-3)
}

/// Guard for normalization: first input (nearly) constant.
pub fn near_constant(inputs: &[Tensor<f64>]) -> bool {
    let d = inputs[0].data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var < 1e-6
}

/// One entry of the standard operator suite: the op and its input shapes.
pub struct SuiteEntry {
    pub op: FnOp,
    pub shapes: Vec<Vec<usize>>,
}

fn entry(op: FnOp, shapes: &[&[usize]]) -> SuiteEntry {
    SuiteEntry {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Every registered forward op, at small random shapes.
pub fn op_suite() -> Vec<SuiteEntry> {
    vec![
        entry(FnOp::new("add", |g, v| g.add(v[0], v[1])), &[&[3, 4], &[3, 4]]),
        entry(FnOp::new("sub", |g, v| g.sub(v[0], v[1])), &[&[3, 4], &[3, 4]]),
        entry(FnOp::new("mul", |g, v| g.mul(v[0], v[1])), &[&[3, 4], &[3, 4]]),
        entry(FnOp::new("scale", |g, v| Ok(g.scale(v[0], -1.7))), &[&[5]]),
        entry(
            FnOp::new("scalar_mul", |g, v| g.scalar_mul(v[0], v[1])),
            &[&[1], &[3, 4]],
        ),
        entry(FnOp::new("matmul", |g, v| g.matmul(v[0], v[1])), &[&[3, 4], &[4, 5]]),
        entry(
            FnOp::new("conv1d", |g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 1, 2)),
            &[&[3, 11], &[4, 3, 3], &[4]],
        ),
        entry(
            FnOp::new("conv1d_pointwise", |g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 0, 1)),
            &[&[3, 7], &[5, 3, 1], &[5]],
        ),
        entry(
            FnOp::new("conv_transpose1d", |g, v| g.conv_transpose1d(v[0], v[1], 2)),
            &[&[3, 5], &[3, 2, 4]],
        ),
        entry(
            FnOp::new("depthwise_conv1d", |g, v| g.depthwise_conv1d(v[0], v[1], 2, 2)),
            &[&[4, 9], &[4, 3]],
        ),
        entry(
            FnOp::new("depthwise_separable_conv1d", |g, v| {
                g.depthwise_separable_conv1d(v[0], v[1], v[2], Some(v[3]), 2, 2)
            }),
            &[&[4, 9], &[4, 3], &[5, 4, 1], &[5]],
        ),
        entry(
            FnOp::new("prelu", |g, v| g.prelu(v[0], v[1])).with_guard(near_kink),
            &[&[3, 6], &[3]],
        ),
        entry(
            FnOp::new("relu", |g, v| Ok(g.relu(v[0]))).with_guard(near_kink),
            &[&[3, 6]],
        ),
        entry(FnOp::new("sigmoid", |g, v| Ok(g.sigmoid(v[0]))), &[&[3, 6]]),
        entry(
            FnOp::new("global_layer_norm", |g, v| g.global_layer_norm(v[0], v[1], v[2]))
                .with_guard(near_constant),
            &[&[3, 6], &[3], &[3]],
        ),
        entry(
            FnOp::new("concat_channels", |g, v| g.concat(&[v[0], v[1]], 0)),
            &[&[2, 3], &[1, 3]],
        ),
        entry(
            FnOp::new("concat_time", |g, v| g.concat(&[v[0], v[1]], 1)),
            &[&[2, 3], &[2, 2]],
        ),
        entry(
            FnOp::new("nearest_upsample_time", |g, v| g.nearest_upsample_time(v[0], 10)),
            &[&[3, 4]],
        ),
        entry(FnOp::new("fit_length_trim", |g, v| g.fit_length(v[0], 4)), &[&[2, 7]]),
        entry(FnOp::new("fit_length_pad", |g, v| g.fit_length(v[0], 9)), &[&[2, 7]]),
        entry(FnOp::new("sum", |g, v| Ok(g.sum(v[0]))), &[&[3, 4]]),
        entry(FnOp::new("mean", |g, v| Ok(g.mean(v[0]))), &[&[3, 4]]),
        entry(FnOp::new("square", |g, v| Ok(g.square(v[0]))), &[&[3, 4]]),
        entry(FnOp::new("log", |g, v| Ok(g.log(v[0]))).positive_inputs(), &[&[3, 4]]),
    ]
}
