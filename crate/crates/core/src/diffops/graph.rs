//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes that do not depend
//! on any gradient-requiring leaf are never visited by [`Graph::backward`], so
//! frozen networks (the identity comparator) cost only their input gradients.

use super::kernels;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch-norm node, keyed by the
/// owning layer so the network can fold them into its running averages.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub key: String,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Upsample2x {
        x: Var,
    },
    AvgPool2x {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    FlowToGrid {
        x: Var,
    },
    BilinearSample {
        input: Var,
        grid: Var,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    DotConst {
        x: Var,
        weights: Tensor<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
    bn_log: Vec<BnObservation<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    /// `training` selects batch statistics in batch-norm nodes.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            bn_log: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that collects gradients (a trainable parameter or a checked input).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn take_bn_log(&mut self) -> Vec<BnObservation<T>> {
        std::mem::take(&mut self.bn_log)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [_, c_in, h, wd] = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(ws[1], c_in, "conv2d input channels");
        assert_eq!(ws[2], ws[3], "conv2d square kernel");
        assert!(h + 2 * pad >= ws[2] && wd + 2 * pad >= ws[3], "conv2d kernel larger than padded input");
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        assert_eq!(self.value(x).item_len(), self.value(w).item_len(), "linear input width");
        let out = kernels::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// Batch normalization over (batch, height, width) per channel.
    ///
    /// In training graphs the batch statistics are used and logged under
    /// `key`; otherwise `running` (mean, variance) is required.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: (&[T], &[T]), key: &str) -> Var {
        let batch_stats = self.training;
        let fwd = kernels::batchnorm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            (!batch_stats).then_some(running),
        );
        if batch_stats {
            let [n, _, h, w] = self.value(x).shape();
            let count = (n * h * w) as f64;
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            self.bn_log.push(BnObservation {
                key: key.to_string(),
                mean: fwd.mean.clone(),
                var: fwd.var.iter().map(|&v| v * T::lit(correction)).collect(),
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            fwd.out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats,
            },
            rg,
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = kernels::upsample2x_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x { x }, rg)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let [_, _, h, w] = self.value(x).shape();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial dims");
        let out = kernels::avgpool2x_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2x { x }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [b, c, h, w] = t.shape();
        let denom = T::from_usize(h * w).unwrap();
        let data = t.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        let out = Tensor::from_vec([b, c, 1, 1], data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool { x }, rg)
    }

    /// Channel concatenation of `a` then `b`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.shape();
        let cb = tb.shape()[1];
        assert_eq!(tb.shape(), [n, cb, h, w], "concat shapes");
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * ca * h * w..(i + 1) * ca * h * w]);
            data.extend_from_slice(&tb.data()[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat { a, b }, rg)
    }

    /// Reorders a 2-channel flow head `(B, 2, H, W)` into a sampler grid `(B, H, W, 2)`.
    pub fn flow_to_grid(&mut self, x: Var) -> Var {
        let out = flow_to_grid(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::FlowToGrid { x }, rg)
    }

    pub fn bilinear_sample(&mut self, input: Var, grid: Var) -> Var {
        let (ti, tg) = (self.value(input), self.value(grid));
        assert_eq!(ti.batch(), tg.batch(), "bilinear_sample batch");
        assert_eq!(tg.shape()[3], 2, "sampler grid last dim");
        let out = kernels::bilinear_forward(ti, tg);
        let rg = self.rg(input) || self.rg(grid);
        self.push(out, Op::BilinearSample { input, grid }, rg)
    }

    /// Mean of |a - b| over all elements, as a scalar node.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mean_abs_diff shapes");
        let n = T::from_usize(ta.len()).unwrap();
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::full([1, 1, 1, 1], s / n), Op::MeanAbsDiff { a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::full([1, 1, 1, 1], s), Op::Sum { x }, rg)
    }

    /// Scalar `sum(x * weights)` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), weights.shape(), "dot_const shapes");
        let s: T = t.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        self.push(Tensor::full([1, 1, 1, 1], s), Op::DotConst { x, weights }, rg)
    }

    /// Mean softmax cross-entropy of `(B, K, 1, 1)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.value(logits);
        let k = t.item_len();
        assert_eq!(labels.len(), t.batch(), "one label per batch item");
        let mut probs = Vec::with_capacity(t.len());
        let mut loss = T::zero();
        for (row, &label) in t.data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            probs.extend(row.iter().map(|&v| (v - m).exp() / z));
            loss += z.ln() + m - row[label];
        }
        let loss = loss / T::from_usize(labels.len()).unwrap();
        let rg = self.rg(logits);
        self.push(
            Tensor::full([1, 1, 1, 1], loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full([1, 1, 1, 1], T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        // Intermediate gradients were consumed above; only leaves remain.
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let need = (self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b)));
                let cg = kernels::conv2d_backward(self.value(x), self.value(w), g, stride, pad, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    let db = db.reshape(self.value(b).shape()).unwrap();
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Linear { x, w, b } => {
                let need = (self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b)));
                let lg = kernels::linear_backward(self.value(x), self.value(w), g, need);
                if let Some(dx) = lg.dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = lg.dw {
                    self.accumulate(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, lg.db) {
                    let db = db.reshape(self.value(b).shape()).unwrap();
                    self.accumulate(grads, b, db);
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(x)
                    .zip_map(g, |v, gv| if v > T::zero() { gv } else { gv * slope })
                    .unwrap();
                self.accumulate(grads, x, dx);
            }
            &Op::Tanh { x } => {
                let dx = node.value.zip_map(g, |y, gv| gv * (T::one() - y * y)).unwrap();
                self.accumulate(grads, x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    shape,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    g.data(),
                    *batch_stats,
                );
                self.accumulate(grads, *x, Tensor::from_vec(shape, dx).unwrap());
                let ps = self.value(*gamma).shape();
                self.accumulate(grads, *gamma, Tensor::from_vec(ps, dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(ps, dbeta).unwrap());
            }
            &Op::Upsample2x { x } => {
                let shape = self.value(x).shape();
                let dx = kernels::upsample2x_backward(shape, g.data());
                self.accumulate(grads, x, Tensor::from_vec(shape, dx).unwrap());
            }
            &Op::AvgPool2x { x } => {
                let shape = self.value(x).shape();
                let dx = kernels::avgpool2x_backward(shape, g.data());
                self.accumulate(grads, x, Tensor::from_vec(shape, dx).unwrap());
            }
            &Op::GlobalAvgPool { x } => {
                let shape = self.value(x).shape();
                let plane = shape[2] * shape[3];
                let denom = T::from_usize(plane).unwrap();
                let mut dx = Vec::with_capacity(plane * g.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / denom, plane));
                }
                self.accumulate(grads, x, Tensor::from_vec(shape, dx).unwrap());
            }
            &Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(a).shape();
                let cb = self.value(b).shape()[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for i in 0..n {
                    let item = &g.data()[i * (la + lb)..(i + 1) * (la + lb)];
                    da.extend_from_slice(&item[..la]);
                    db.extend_from_slice(&item[la..]);
                }
                self.accumulate(grads, a, Tensor::from_vec([n, ca, h, w], da).unwrap());
                self.accumulate(grads, b, Tensor::from_vec([n, cb, h, w], db).unwrap());
            }
            &Op::FlowToGrid { x } => {
                self.accumulate(grads, x, grid_to_flow(g));
            }
            &Op::BilinearSample { input, grid } => {
                let (din, dgrid) = kernels::bilinear_backward(
                    self.value(input),
                    self.value(grid),
                    g.data(),
                    self.rg(input),
                    self.rg(grid),
                );
                if let Some(d) = din {
                    self.accumulate(grads, input, Tensor::from_vec(self.value(input).shape(), d).unwrap());
                }
                if let Some(d) = dgrid {
                    self.accumulate(grads, grid, Tensor::from_vec(self.value(grid).shape(), d).unwrap());
                }
            }
            &Op::MeanAbsDiff { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let scale = g.data()[0] / T::from_usize(ta.len()).unwrap();
                let da = ta
                    .zip_map(tb, |x, y| {
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                if self.rg(b) {
                    self.accumulate(grads, b, da.map(|v| -v));
                }
                self.accumulate(grads, a, da);
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Scale { x, c } => {
                self.accumulate(grads, x, g.map(|v| v * c));
            }
            &Op::Sum { x } => {
                let shape = self.value(x).shape();
                self.accumulate(grads, x, Tensor::full(shape, g.data()[0]));
            }
            Op::DotConst { x, weights } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * gv));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let shape = self.value(*logits).shape();
                let k = shape[1] * shape[2] * shape[3];
                let scale = g.data()[0] / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::from_vec(shape, d).unwrap());
            }
        }
    }
}

pub(crate) fn flow_to_grid<T: Real>(flow: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = flow.shape();
    assert_eq!(c, 2, "flow heads have two channels");
    let fd = flow.data();
    Tensor::from_fn([b, h, w, 2], |[n, y, x, k]| fd[((n * 2 + k) * h + y) * w + x])
}

pub(crate) fn grid_to_flow<T: Real>(grid: &Tensor<T>) -> Tensor<T> {
    let [b, h, w, _] = grid.shape();
    let gd = grid.data();
    Tensor::from_fn([b, 2, h, w], |[n, k, y, x]| gd[((n * h + y) * w + x) * 2 + k])
}
