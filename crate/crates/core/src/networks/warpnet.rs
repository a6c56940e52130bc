//! The encoder-decoder shared by both warp networks.
//!
//! Encoder stage: conv 4x4/2/1, leaky ReLU 0.2, batch norm (all but the
//! first). Decoder stage: conv 3x3/1/1, ReLU, 2x bilinear upsample, batch
//! norm, then (embedding network only, all but the last stage) channel
//! concatenation with the encoder activation of the same resolution. A final
//! 3x3 conv to two channels, plus a fixed identity prior, and a tanh yield
//! the sampling grid. The prior makes an all-zero head output sample a
//! slightly shrunk identity warp; without it a randomly initialized head
//! samples a few arbitrary points and training settles on the background.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetConfig;
use super::params::{BnLayer, ConvLayer, ParamStore};
use crate::diffops::{BnObservation, Graph, Var};
use crate::tensor::{Real, Tensor};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// The fixed pre-tanh prior maps a zero head output to this fraction of the
/// identity grid; below 1 so the prior stays finite at the borders.
pub const PRIOR_SCALE: f64 = 0.95;

/// `atanh(PRIOR_SCALE * identity)` as a `(B, 2, H, W)` flow, x then y.
fn identity_prior<T: Real>(b: usize, h: usize, w: usize) -> Tensor<T> {
    let norm = |i: usize, n: usize| if n <= 1 { 0.0 } else { 2.0 * i as f64 / (n - 1) as f64 - 1.0 };
    Tensor::from_fn([b, 2, h, w], |[_, k, y, x]| {
        let c = if k == 0 { norm(x, w) } else { norm(y, h) };
        T::lit((PRIOR_SCALE * c).atanh())
    })
}

#[derive(Clone, Debug)]
struct EncStage {
    conv: ConvLayer,
    bn: Option<BnLayer>,
}

#[derive(Clone, Debug)]
struct DecStage {
    conv: ConvLayer,
    bn: BnLayer,
    /// Encoder stage concatenated after this decoder stage.
    skip_from: Option<usize>,
}

/// Decoder parameter counts by what the weights read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecoderParamCount {
    /// Weights reading concatenated encoder activations.
    pub skip_inputs: usize,
    /// Weights of the first decoder conv, which reads the bottleneck.
    pub bottleneck_inputs: usize,
    pub rest: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderDecoder<T: Real> {
    pub store: ParamStore<T>,
    enc: Vec<EncStage>,
    dec: Vec<DecStage>,
    head: ConvLayer,
}

impl<T: Real> EncoderDecoder<T> {
    pub fn build(cfg: &NetConfig, prefix: &str, skips: bool, bottleneck: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let n = cfg.n_down();
        let mut enc = Vec::with_capacity(n);
        let mut enc_out = Vec::with_capacity(n);
        let mut c_in = 3;
        for i in 0..n {
            let c_out = if i + 1 == n { bottleneck } else { cfg.channels(i) };
            let name = format!("{prefix}.enc{i}");
            let conv = ConvLayer::new(&mut store, &mut rng, &format!("{name}.conv"), c_in, c_out, 4, 2, 1);
            let bn = (i > 0).then(|| BnLayer::new(&mut store, &format!("{name}.bn"), c_out));
            enc.push(EncStage { conv, bn });
            enc_out.push(c_out);
            c_in = c_out;
        }
        let mut dec = Vec::with_capacity(n);
        for j in 0..n {
            let c_out = if j + 1 < n { cfg.channels(n - 2 - j) } else { cfg.channels(0) };
            let name = format!("{prefix}.dec{j}");
            let conv = ConvLayer::new(&mut store, &mut rng, &format!("{name}.conv"), c_in, c_out, 3, 1, 1);
            let bn = BnLayer::new(&mut store, &format!("{name}.bn"), c_out);
            let skip_from = (skips && j + 1 < n).then(|| n - 2 - j);
            c_in = c_out + skip_from.map_or(0, |s| enc_out[s]);
            dec.push(DecStage { conv, bn, skip_from });
        }
        let head = ConvLayer::new(&mut store, &mut rng, &format!("{prefix}.head"), c_in, 2, 3, 1, 1);
        Self { store, enc, dec, head }
    }

    /// Activations after every encoder stage; the last one is the bottleneck.
    pub fn encode(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Vec<Var> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.enc.len());
        for stage in &self.enc {
            h = stage.conv.forward(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
            if let Some(bn) = &stage.bn {
                h = bn.forward(g, p, &self.store, h);
            }
            outs.push(h);
        }
        outs
    }

    /// Decodes a bottleneck into a `(B, 2, R, R)` tanh flow.
    pub fn decode(&self, g: &mut Graph<T>, p: &[Var], bottleneck: Var, encoder: &[Var]) -> Var {
        let mut h = bottleneck;
        for stage in &self.dec {
            h = stage.conv.forward(g, p, h);
            h = g.relu(h);
            h = g.upsample2x(h);
            h = stage.bn.forward(g, p, &self.store, h);
            if let Some(s) = stage.skip_from {
                h = g.concat(h, encoder[s]);
            }
        }
        let flow = self.head.forward(g, p, h);
        let [b, _, hh, ww] = g.value(flow).shape();
        let prior = g.input(identity_prior(b, hh, ww));
        let flow = g.add(flow, prior);
        g.tanh(flow)
    }

    pub fn absorb(&mut self, observations: &[BnObservation<T>]) {
        let layers: Vec<&BnLayer> = self
            .enc
            .iter()
            .filter_map(|s| s.bn.as_ref())
            .chain(self.dec.iter().map(|s| &s.bn))
            .collect();
        for obs in observations {
            if let Some(layer) = layers.iter().find(|l| l.key == obs.key) {
                layer.absorb(&mut self.store, obs);
            }
        }
    }

    pub fn decoder_param_count(&self) -> DecoderParamCount {
        let mut count = DecoderParamCount::default();
        let mut prev_skip = None;
        let mut layers: Vec<(&ConvLayer, Option<&BnLayer>)> = self.dec.iter().map(|s| (&s.conv, Some(&s.bn))).collect();
        layers.push((&self.head, None));
        for (j, (conv, bn)) in layers.into_iter().enumerate() {
            let w = self.store.param(conv.weight).shape();
            let per_in = w[0] * w[2] * w[3];
            let total = w.iter().product::<usize>();
            let skip = prev_skip.map_or(0, |c: usize| c * per_in);
            let from_bottleneck = if j == 0 { total } else { 0 };
            count.skip_inputs += skip;
            count.bottleneck_inputs += from_bottleneck;
            count.rest += total - skip - from_bottleneck + self.store.param(conv.bias).len();
            if let Some(bn) = bn {
                count.rest += 2 * self.store.param(bn.gamma).len();
            }
            prev_skip = self
                .dec
                .get(j)
                .and_then(|s| s.skip_from)
                .map(|s| self.store.param(self.enc[s].conv.bias).len());
        }
        count
    }

    pub fn cast<U: Real>(&self) -> EncoderDecoder<U> {
        EncoderDecoder {
            store: self.store.cast(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            head: self.head.clone(),
        }
    }
}
