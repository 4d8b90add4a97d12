//! A small multi-label convolutional network with hand-written backprop.
//!
//! Layers: `[conv3x3 -> relu -> maxpool2]*` then a final conv3x3 -> relu,
//! a global max pool and a dense head with one logit per finding.
//! Parameters live in one flat `Vec<f32>` so optimizers and checkpoints
//! stay trivial.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvArch {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub outputs: usize,
}

impl ConvArch {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut c_in = 1;
        for &c in &self.channels {
            n += c * c_in * 9 + c;
            c_in = c;
        }
        n + self.outputs * c_in + self.outputs
    }

    fn validate(&self) {
        assert!(!self.channels.is_empty(), "at least one conv layer");
        let pools = self.channels.len() - 1;
        assert!(
            self.input_size >> pools >= 2 && self.input_size % (1 << pools) == 0,
            "input size {} not divisible through {pools} pools",
            self.input_size
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub arch: ConvArch,
    pub params: Vec<f32>,
}

struct LayerCache {
    input: Vec<f32>,
    pre: Vec<f32>,
    side: usize,
    /// For pooled layers: index into `pre` of each pooled maximum.
    argmax: Vec<usize>,
}

pub struct Cache {
    layers: Vec<LayerCache>,
    features: Vec<f32>,
}

fn conv_forward(input: &[f32], c_in: usize, side: usize, w: &[f32], b: &[f32], c_out: usize) -> Vec<f32> {
    let plane = side * side;
    let mut out = vec![0f32; c_out * plane];
    for co in 0..c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let inp = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    let (y_lo, y_hi) = (1usize.saturating_sub(ky), (side + 1 - ky).min(side));
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (side + 1 - kx).min(side));
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let orow = &mut o[y * side + x_lo..y * side + x_hi];
                        let irow = &inp[iy * side + x_lo + kx - 1..iy * side + x_hi + kx - 1];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

impl ConvNet {
    /// He-initialized network, seeded.
    pub fn new(arch: ConvArch, seed: u64) -> Self {
        arch.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        let mut c_in = 1;
        for &c in &arch.channels {
            let n = Normal::new(0.0f32, (2.0 / (c_in * 9) as f32).sqrt()).expect("finite");
            params.extend((0..c * c_in * 9).map(|_| n.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, c));
            c_in = c;
        }
        let n = Normal::new(0.0f32, (1.0 / c_in as f32).sqrt()).expect("finite");
        params.extend((0..arch.outputs * c_in).map(|_| n.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, arch.outputs));
        debug_assert_eq!(params.len(), arch.param_count());
        ConvNet { arch, params }
    }

    /// Offsets of (weights, bias) per conv layer and for the head.
    fn offsets(&self) -> (Vec<(usize, usize)>, (usize, usize)) {
        let mut out = Vec::new();
        let mut off = 0;
        let mut c_in = 1;
        for &c in &self.arch.channels {
            out.push((off, off + c * c_in * 9));
            off += c * c_in * 9 + c;
            c_in = c;
        }
        (out, (off, off + self.arch.outputs * c_in))
    }

    pub fn forward(&self, image: &[f32]) -> (Vec<f32>, Cache) {
        let side0 = self.arch.input_size;
        assert_eq!(image.len(), side0 * side0, "input size mismatch");
        let (offs, (hw, hb)) = self.offsets();
        let n_layers = self.arch.channels.len();
        let mut x = image.to_vec();
        let mut side = side0;
        let mut c_in = 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, &c_out) in self.arch.channels.iter().enumerate() {
            let (wo, bo) = offs[l];
            let pre = conv_forward(&x, c_in, side, &self.params[wo..bo], &self.params[bo..bo + c_out], c_out);
            let plane = side * side;
            let mut argmax = Vec::new();
            let next = if l + 1 < n_layers {
                let half = side / 2;
                let mut pooled = vec![0f32; c_out * half * half];
                argmax = vec![0usize; c_out * half * half];
                for c in 0..c_out {
                    for py in 0..half {
                        for px in 0..half {
                            let mut best = (c * plane + 2 * py * side + 2 * px, f32::NEG_INFINITY);
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = c * plane + (2 * py + dy) * side + 2 * px + dx;
                                if pre[i] > best.1 {
                                    best = (i, pre[i]);
                                }
                            }
                            let k = (c * half + py) * half + px;
                            pooled[k] = best.1.max(0.0);
                            argmax[k] = best.0;
                        }
                    }
                }
                pooled
            } else {
                Vec::new()
            };
            layers.push(LayerCache {
                input: std::mem::take(&mut x),
                pre,
                side,
                argmax,
            });
            x = next;
            if l + 1 < n_layers {
                side /= 2;
            }
            c_in = c_out;
        }
        // global max pool over the last layer's relu output
        let last = layers.last_mut().expect("nonempty");
        let plane = last.side * last.side;
        let mut features = vec![0f32; c_in];
        last.argmax = vec![0usize; c_in];
        for c in 0..c_in {
            let (mut bi, mut bv) = (c * plane, f32::NEG_INFINITY);
            for i in c * plane..(c + 1) * plane {
                if last.pre[i] > bv {
                    bi = i;
                    bv = last.pre[i];
                }
            }
            features[c] = bv.max(0.0);
            last.argmax[c] = bi;
        }
        let logits = (0..self.arch.outputs)
            .map(|o| {
                self.params[hb + o]
                    + (0..c_in)
                        .map(|k| self.params[hw + o * c_in + k] * features[k])
                        .sum::<f32>()
            })
            .collect();
        (logits, Cache { layers, features })
    }

    pub fn logits(&self, image: &[f32]) -> Vec<f32> {
        self.forward(image).0
    }

    pub fn predict(&self, image: &[f32]) -> Vec<f64> {
        self.logits(image).into_iter().map(|z| sigmoid(z as f64)).collect()
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits).
    pub fn backward(&self, cache: &Cache, dlogits: &[f32], grad: &mut [f32]) {
        let (offs, (hw, hb)) = self.offsets();
        let n_layers = self.arch.channels.len();
        let c_last = *self.arch.channels.last().expect("nonempty");
        let mut dfeat = vec![0f32; c_last];
        for (o, &d) in dlogits.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[hb + o] += d;
            for k in 0..c_last {
                grad[hw + o * c_last + k] += d * cache.features[k];
                dfeat[k] += d * self.params[hw + o * c_last + k];
            }
        }
        // gradient w.r.t. the last layer's pre-activation
        let last = &cache.layers[n_layers - 1];
        let mut dpre = vec![0f32; last.pre.len()];
        for c in 0..c_last {
            let i = last.argmax[c];
            if last.pre[i] > 0.0 {
                dpre[i] = dfeat[c];
            }
        }
        for l in (0..n_layers).rev() {
            let layer = &cache.layers[l];
            let c_out = self.arch.channels[l];
            let c_in = if l == 0 { 1 } else { self.arch.channels[l - 1] };
            let side = layer.side;
            let plane = side * side;
            let (wo, bo) = offs[l];
            let mut dinput = if l > 0 { vec![0f32; c_in * plane] } else { Vec::new() };
            for co in 0..c_out {
                for y in 0..side {
                    for x in 0..side {
                        let d = dpre[co * plane + y * side + x];
                        if d == 0.0 {
                            continue;
                        }
                        grad[bo + co] += d;
                        for ci in 0..c_in {
                            for ky in 0..3 {
                                let iy = y + ky;
                                if iy == 0 || iy > side {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = x + kx;
                                    if ix == 0 || ix > side {
                                        continue;
                                    }
                                    let ii = ci * plane + (iy - 1) * side + ix - 1;
                                    let wi = wo + ((co * c_in + ci) * 3 + ky) * 3 + kx;
                                    grad[wi] += d * layer.input[ii];
                                    if l > 0 {
                                        dinput[ii] += d * self.params[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            // route through the previous layer's maxpool and relu
            let prev = &cache.layers[l - 1];
            let mut dprev = vec![0f32; prev.pre.len()];
            for (k, &d) in dinput.iter().enumerate() {
                let i = prev.argmax[k];
                if d != 0.0 && prev.pre[i] > 0.0 {
                    dprev[i] += d;
                }
            }
            dpre = dprev;
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on logits, summed over unmasked entries.
/// `None` targets are masked: they add nothing to the loss or the gradient.
/// Returns (loss sum, d loss / d logits, unmasked count).
pub fn bce_with_logits(logits: &[f32], targets: &[Option<f32>]) -> (f64, Vec<f32>, usize) {
    assert_eq!(logits.len(), targets.len());
    let mut loss = 0.0;
    let mut count = 0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, t)| match t {
            None => 0.0,
            Some(t) => {
                let (z64, t64) = (z as f64, *t as f64);
                loss += z64.max(0.0) - z64 * t64 + (-z64.abs()).exp().ln_1p();
                count += 1;
                (sigmoid(z64) - t64) as f32
            }
        })
        .collect();
    (loss, grad, count)
}

/// Summed loss and gradient over a batch. The reduction is done in example
/// order so parallel and sequential execution agree bit for bit.
pub fn batch_loss_and_grad(net: &ConvNet, images: &[&[f32]], targets: &[&[Option<f32>]], exec: Exec) -> (f64, Vec<f32>, usize) {
    let idx: Vec<usize> = (0..images.len()).collect();
    let parts = exec.map(&idx, |&i| {
        let (logits, cache) = net.forward(images[i]);
        let (loss, dlogits, count) = bce_with_logits(&logits, targets[i]);
        let mut g = vec![0f32; net.params.len()];
        net.backward(&cache, &dlogits, &mut g);
        (loss, g, count)
    });
    let mut grad = vec![0f32; net.params.len()];
    let (mut loss, mut count) = (0.0, 0);
    for (l, g, c) in parts {
        loss += l;
        count += c;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss, grad, count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}
