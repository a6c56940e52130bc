use rand::Rng;

use crate::diffops::{BnObservation, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), both in a fixed insertion order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add_param(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push((name, t));
        self.params.len() - 1
    }

    pub fn add_buffer(&mut self, name: String, t: Tensor<T>) -> usize {
        self.buffers.push((name, t));
        self.buffers.len() - 1
    }

    pub fn param(&self, i: usize) -> &Tensor<T> {
        &self.params[i].1
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.params[i].1
    }

    pub fn buffer(&self, i: usize) -> &Tensor<T> {
        &self.buffers[i].1
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Every tensor, parameters first, as (name, tensor).
    pub fn all(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params().chain(self.buffers())
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Places every parameter on the graph; `trainable` decides whether
    /// gradients are collected for them.
    pub fn vars(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Replaces a tensor by name, checking its shape.
    pub fn assign(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .find_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform<T: Real>(rng: &mut impl Rng, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let weight = store.add_param(format!("{name}.weight"), fan_in_uniform(rng, [c_out, c_in, k, k], fan_in));
        let bias = store.add_param(format!("{name}.bias"), fan_in_uniform(rng, [c_out, 1, 1, 1], fan_in));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LinearLayer {
    pub weight: usize,
    pub bias: usize,
}

impl LinearLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, n_in: usize, n_out: usize) -> Self {
        let weight = store.add_param(format!("{name}.weight"), fan_in_uniform(rng, [n_out, n_in, 1, 1], n_in));
        let bias = store.add_param(format!("{name}.bias"), fan_in_uniform(rng, [n_out, 1, 1, 1], n_in));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub(crate) struct BnLayer {
    pub key: String,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BnLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = [channels, 1, 1, 1];
        Self {
            key: name.to_string(),
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(shape, T::one())),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(shape)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(shape)),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(shape, T::one())),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], store: &ParamStore<T>, x: Var) -> Var {
        let mean = store.buffer(self.running_mean).data();
        let var = store.buffer(self.running_var).data();
        g.batch_norm(x, p[self.gamma], p[self.beta], (mean, var), &self.key)
    }

    /// Folds one observation into the running averages.
    pub fn absorb<T: Real>(&self, store: &mut ParamStore<T>, obs: &BnObservation<T>) {
        let m = T::lit(BN_MOMENTUM);
        for (idx, fresh) in [(self.running_mean, &obs.mean), (self.running_var, &obs.var)] {
            let buf = &mut store.buffers[idx].1;
            for (r, &f) in buf.data_mut().iter_mut().zip(fresh) {
                *r = (T::one() - m) * *r + m * f;
            }
        }
    }
}
