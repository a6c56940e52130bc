//! Differentiable primitives.
//!
//! The bilinear sampler is the only image-formation mechanism in the model,
//! so its conventions are fixed here once:
//!
//! * grids are `(batch, height, width, 2)` with `x` (width) first;
//! * coordinates are corner aligned: `-1` is the center of the first pixel,
//!   `+1` the center of the last;
//! * taps outside the image read zero.

mod graph;
pub(crate) mod kernels;

pub use graph::{BnObservation, Gradients, Graph, Var};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-pixel normalized sampling coordinates, layout `(batch, height, width, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerGrid<T = f32>(Tensor<T>);

impl<T: Real> SamplerGrid<T> {
    pub fn new(coords: Tensor<T>) -> Result<Self> {
        if coords.shape()[3] != 2 {
            return Err(Error::Shape(format!(
                "sampler grid needs a trailing dimension of 2, got {:?}",
                coords.shape()
            )));
        }
        Ok(Self(coords))
    }

    /// Converts a `(batch, 2, height, width)` flow head output.
    pub fn from_flow(flow: &Tensor<T>) -> Result<Self> {
        if flow.shape()[1] != 2 {
            return Err(Error::Shape(format!("flow must have 2 channels, got {:?}", flow.shape())));
        }
        Ok(Self(graph::flow_to_grid(flow)))
    }

    /// The grid that maps every output pixel onto the same input pixel.
    pub fn identity(batch: usize, height: usize, width: usize) -> Self {
        let norm = |i: usize, n: usize| {
            if n <= 1 {
                T::zero()
            } else {
                T::lit(2.0 * i as f64 / (n - 1) as f64 - 1.0)
            }
        };
        Self(Tensor::from_fn([batch, height, width, 2], |[_, y, x, k]| {
            if k == 0 {
                norm(x, width)
            } else {
                norm(y, height)
            }
        }))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn to_flow(&self) -> Tensor<T> {
        graph::grid_to_flow(&self.0)
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    /// (height, width) of the output this grid produces.
    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    /// Coordinate (x, y) at output pixel (row, col) of batch item `n`.
    pub fn coord(&self, n: usize, row: usize, col: usize) -> (T, T) {
        (self.0.at([n, row, col, 0]), self.0.at([n, row, col, 1]))
    }
}

/// Samples `input` at the grid coordinates.
pub fn bilinear_sample<T: Real>(input: &Tensor<T>, grid: &SamplerGrid<T>) -> Result<Tensor<T>> {
    if input.batch() != grid.batch() {
        return Err(Error::Precondition(format!(
            "input batch {} differs from grid batch {}",
            input.batch(),
            grid.batch()
        )));
    }
    if !grid.tensor().all_finite() {
        return Err(Error::Precondition("sampler grid contains non-finite values".into()));
    }
    Ok(kernels::bilinear_forward(input, grid.tensor()))
}

/// Doubles both spatial dimensions with corner-aligned bilinear interpolation.
pub fn bilinear_upsample2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::Precondition("upsample needs non-empty spatial dims".into()));
    }
    Ok(kernels::upsample2x_forward(input))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when a gradient or loss was non-finite.
    pub failure: Option<String>,
}

/// Compares analytic gradients of a scalar function against central finite
/// differences.
///
/// `f` builds the function on a fresh graph from leaf vars holding `inputs`.
/// `probes` selects `(input index, element index)` pairs to check; `None`
/// checks every element of every input. The relative error of one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(
    inputs: &[Tensor<f64>],
    probes: Option<&[(usize, usize)]>,
    eps: f64,
    tolerance: f64,
    f: F,
) -> GradCheckReport
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Var,
{
    grad_check_in_mode(true, inputs, probes, eps, tolerance, f)
}

/// [`grad_check`] with an explicit graph mode; `training = false` exercises
/// inference-mode batch norm.
pub fn grad_check_in_mode<F>(
    training: bool,
    inputs: &[Tensor<f64>],
    probes: Option<&[(usize, usize)]>,
    eps: f64,
    tolerance: f64,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new(training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        tolerance,
        passed: false,
        failure: None,
    };
    if !g.scalar(out).is_finite() {
        report.failure = Some("function value is not finite".into());
        return report;
    }
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    if let Some(i) = analytic.iter().position(|t| !t.all_finite()) {
        report.failure = Some(format!("analytic gradient of input {i} is not finite"));
        return report;
    }

    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in probes {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval_scalar(training, &mut f, &work);
        work[i].data_mut()[j] = orig - eps;
        let minus = eval_scalar(training, &mut f, &work);
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            report.failure = Some(format!("numeric gradient of input {i}[{j}] is not finite"));
            return report;
        }
        let a = analytic[i].data()[j];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= tolerance;
    report
}

fn eval_scalar<F>(training: bool, f: &mut F, tensors: &[Tensor<f64>]) -> f64
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new(training);
    let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.scalar(out)
}
