//! Conditional VAE over spectrogram frames.
//!
//! Encoder and decoder are frame-wise stacks of gated linear units with the
//! class vector concatenated to the input of every layer. Gradients are
//! hand-written reverse mode; the tests check them against central finite
//! differences.
//!
//! Batches are frame-major: a block of `frames` rows, each `width` wide.

mod latent;
mod train;

pub use latent::{descend_latents, latent_step, source_term, source_term_grad, LatentConfig, LatentGrad, LatentReport};
pub use train::{train_cvae, AdamState, EpochLog, TrainConfig, TrainExample, Trainer};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};

/// Bound on every log-variance the networks emit.
pub const LOGVAR_CLAMP: f64 = 30.0;

/// Offset inside the encoder's log-power features.
const FEATURE_OFFSET: f64 = 1e-6;

/// Fully connected layer, `w` is `outputs × inputs` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let lim = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            w: (0..inputs * outputs).map(|_| rng.gen_range(-lim..lim)).collect(),
            b: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.outputs);
        for r in 0..rows {
            let xr = &x[r * self.inputs..(r + 1) * self.inputs];
            for o in 0..self.outputs {
                let wo = &self.w[o * self.inputs..(o + 1) * self.inputs];
                y.push(self.b[o] + dot(wo, xr));
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns `dL/dx`.
    fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: Option<&mut Dense>) -> Vec<f64> {
        if let Some(g) = grad {
            for r in 0..rows {
                let xr = &x[r * self.inputs..(r + 1) * self.inputs];
                for o in 0..self.outputs {
                    let d = dy[r * self.outputs + o];
                    if d == 0.0 {
                        continue;
                    }
                    g.b[o] += d;
                    for (gw, xi) in g.w[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(xr) {
                        *gw += d * xi;
                    }
                }
            }
        }
        let mut dx = vec![0.0; rows * self.inputs];
        for r in 0..rows {
            let dxr = &mut dx[r * self.inputs..(r + 1) * self.inputs];
            for o in 0..self.outputs {
                let d = dy[r * self.outputs + o];
                if d == 0.0 {
                    continue;
                }
                for (dxi, wi) in dxr.iter_mut().zip(&self.w[o * self.inputs..(o + 1) * self.inputs]) {
                    *dxi += d * wi;
                }
            }
        }
        dx
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stack of GLU layers followed by a linear output layer, conditioned on a
/// vector appended to every layer input.
#[derive(Clone, Debug, PartialEq)]
pub struct GluStack {
    pub cond_dim: usize,
    pub layers: Vec<Dense>,
}

struct StackCache {
    /// Per layer, the concatenated `[h; c]` rows it consumed.
    inputs: Vec<Vec<f64>>,
    /// Per GLU layer, the pre-activation rows.
    pre: Vec<Vec<f64>>,
}

impl GluStack {
    fn new(input: usize, hidden: usize, output: usize, hidden_layers: usize, cond: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = input;
        for _ in 0..hidden_layers {
            layers.push(Dense::glorot(width + cond, 2 * hidden, rng));
            width = hidden;
        }
        layers.push(Dense::glorot(width + cond, output, rng));
        GluStack { cond_dim: cond, layers }
    }

    fn zeros_like(&self) -> Self {
        GluStack {
            cond_dim: self.cond_dim,
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs - self.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn forward(&self, x: &[f64], rows: usize, c: &[f64]) -> (Vec<f64>, StackCache) {
        let last = self.layers.len() - 1;
        let mut cache = StackCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let width = layer.inputs - self.cond_dim;
            let mut input = Vec::with_capacity(rows * layer.inputs);
            for r in 0..rows {
                input.extend_from_slice(&h[r * width..(r + 1) * width]);
                input.extend_from_slice(c);
            }
            let a = layer.forward(&input, rows);
            cache.inputs.push(input);
            if l == last {
                return (a, cache);
            }
            let half = layer.outputs / 2;
            h = Vec::with_capacity(rows * half);
            for r in 0..rows {
                let ar = &a[r * layer.outputs..(r + 1) * layer.outputs];
                for k in 0..half {
                    h.push(ar[k] * sigmoid(ar[half + k]));
                }
            }
            cache.pre.push(a);
        }
        unreachable!("stack has at least one layer")
    }

    /// Returns `(dL/dx, dL/dc)`; parameter gradients accumulate into `grad`.
    fn backward(
        &self,
        cache: &StackCache,
        d_out: &[f64],
        rows: usize,
        mut grad: Option<&mut GluStack>,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut dc = vec![0.0; self.cond_dim];
        let mut d = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = grad.as_deref_mut().map(|g| &mut g.layers[l]);
            let d_in = layer.backward(&cache.inputs[l], &d, rows, g);
            let width = layer.inputs - self.cond_dim;
            let mut dh = Vec::with_capacity(rows * width);
            for r in 0..rows {
                let row = &d_in[r * layer.inputs..(r + 1) * layer.inputs];
                dh.extend_from_slice(&row[..width]);
                for (acc, v) in dc.iter_mut().zip(&row[width..]) {
                    *acc += v;
                }
            }
            if l == 0 {
                return (dh, dc);
            }
            // through the GLU of layer l - 1
            let prev = &self.layers[l - 1];
            let pre = &cache.pre[l - 1];
            let half = prev.outputs / 2;
            d = vec![0.0; rows * prev.outputs];
            for r in 0..rows {
                let ar = &pre[r * prev.outputs..(r + 1) * prev.outputs];
                let dr = &mut d[r * prev.outputs..(r + 1) * prev.outputs];
                for k in 0..half {
                    let s = sigmoid(ar[half + k]);
                    let g = dh[r * half + k];
                    dr[k] = g * s;
                    dr[half + k] = g * ar[k] * s * (1.0 - s);
                }
            }
        }
        unreachable!("stack has at least one layer")
    }
}

/// Encoder and decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeWeights {
    pub spec_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub encoder: GluStack,
    pub decoder: GluStack,
}

/// Network sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvaeShape {
    pub spec_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl CvaeShape {
    pub fn new(spec_dim: usize, num_classes: usize) -> Self {
        CvaeShape {
            spec_dim,
            latent_dim: 16,
            num_classes,
            hidden: 128,
            hidden_layers: 2,
        }
    }
}

impl CvaeWeights {
    pub fn random(shape: CvaeShape, rng: &mut impl Rng) -> Self {
        let CvaeShape {
            spec_dim,
            latent_dim,
            num_classes,
            hidden,
            hidden_layers,
        } = shape;
        CvaeWeights {
            spec_dim,
            latent_dim,
            num_classes,
            hidden,
            encoder: GluStack::new(spec_dim, hidden, 2 * latent_dim, hidden_layers, num_classes, rng),
            decoder: GluStack::new(latent_dim, hidden, spec_dim, hidden_layers, num_classes, rng),
        }
    }

    pub fn shape(&self) -> CvaeShape {
        CvaeShape {
            spec_dim: self.spec_dim,
            latent_dim: self.latent_dim,
            num_classes: self.num_classes,
            hidden: self.hidden,
            hidden_layers: self.decoder.layers.len() - 1,
        }
    }

    pub fn zeros_like(&self) -> Self {
        CvaeWeights {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            ..*self
        }
    }

    /// Parameter tensors in declaration order: encoder layers then decoder
    /// layers, weight before bias.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.encoder.layers.iter().chain(&self.decoder.layers) {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.encoder.layers.iter_mut().chain(self.decoder.layers.iter_mut()) {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    fn tensor_names(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (part, stack) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, l) in stack.layers.iter().enumerate() {
                out.push((format!("{part}.{i}.weight"), vec![l.outputs, l.inputs]));
                out.push((format!("{part}.{i}.bias"), vec![l.outputs]));
            }
        }
        out
    }

    pub fn to_container(&self) -> Container {
        let header = serde_json::json!({
            "shape": self.shape(),
            "encoder_layers": self.encoder.layers.iter().map(|l| [l.inputs, l.outputs]).collect::<Vec<_>>(),
            "decoder_layers": self.decoder.layers.iter().map(|l| [l.inputs, l.outputs]).collect::<Vec<_>>(),
        });
        let tensors = self
            .tensor_names()
            .into_iter()
            .zip(self.params())
            .map(|((name, shape), data)| Tensor::new(name, shape, data.to_vec()))
            .collect();
        Container::new(WEIGHTS_KIND, header, tensors)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(WEIGHTS_KIND)?;
        let shape: CvaeShape = serde_json::from_value(c.header["shape"].clone())
            .map_err(|e| Error::InvalidInput(format!("weight header: {e}")))?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut w = CvaeWeights::random(shape, &mut rng);
        let names = w.tensor_names();
        for ((name, dims), slot) in names.iter().zip(w.params_mut()) {
            let t = c.tensor(name)?;
            if &t.shape != dims {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {name} has shape {:?}, expected {dims:?}",
                    t.shape
                )));
            }
            slot.copy_from_slice(&t.data);
        }
        if !w.is_finite() {
            return Err(Error::InvalidInput("weight file holds non-finite parameters".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        CvaeWeights::from_container(&Container::read(path)?)
    }
}

pub const WEIGHTS_KIND: &str = "cvae-weights";

/// Numerically stable softmax.
pub fn softmax(d: &[f64]) -> Vec<f64> {
    let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = d.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Pulls a gradient with respect to `softmax(d)` back to `d`.
pub fn softmax_backward(c: &[f64], dc: &[f64]) -> Vec<f64> {
    let inner = dot(c, dc);
    c.iter().zip(dc).map(|(ci, gi)| ci * (gi - inner)).collect()
}

/// Log-power encoder features of a frame-major power block.
pub fn encoder_features(power: &[f64]) -> Vec<f64> {
    power.iter().map(|p| (p.max(0.0) + FEATURE_OFFSET).ln()).collect()
}

fn check_class(w: &CvaeWeights, c: &[f64]) -> Result<()> {
    if c.len() != w.num_classes {
        return Err(Error::DimensionMismatch(format!(
            "class vector has {} entries, network expects {}",
            c.len(),
            w.num_classes
        )));
    }
    Ok(())
}

/// Posterior parameters `(mu, logvar)`, each `frames × latent_dim`, for a
/// frame-major power block of `frames × spec_dim`.
pub fn encoder_forward(w: &CvaeWeights, power: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_class(w, c)?;
    if power.len() % w.spec_dim != 0 {
        return Err(Error::DimensionMismatch(format!(
            "power block of {} values is not a multiple of {} bins",
            power.len(),
            w.spec_dim
        )));
    }
    let rows = power.len() / w.spec_dim;
    let (out, _) = w.encoder.forward(&encoder_features(power), rows, c);
    Ok(split_posterior(&out, rows, w.latent_dim))
}

fn split_posterior(out: &[f64], rows: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = Vec::with_capacity(rows * dim);
    let mut lv = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        mu.extend_from_slice(&out[r * 2 * dim..r * 2 * dim + dim]);
        lv.extend(out[r * 2 * dim + dim..(r + 1) * 2 * dim].iter().map(|x| x.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)));
    }
    (mu, lv)
}

/// Decoder variances `σ²_θ`, frame-major `frames × spec_dim`, for latents
/// `z` (`frames × latent_dim`) and class vector `c`.
pub fn decoder_forward(w: &CvaeWeights, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    check_class(w, c)?;
    if z.len() % w.latent_dim != 0 {
        return Err(Error::DimensionMismatch(format!(
            "latent block of {} values is not a multiple of {}",
            z.len(),
            w.latent_dim
        )));
    }
    let rows = z.len() / w.latent_dim;
    let (out, _) = w.decoder.forward(z, rows, c);
    Ok(out.iter().map(|o| o.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP).exp()).collect())
}

/// `mu + exp(logvar / 2) ⊙ ε` with standard normal `ε`.
pub fn reparam_sample(mu: &[f64], logvar: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| {
            let e: f64 = rng.sample(StandardNormal);
            m + (lv / 2.0).exp() * e
        })
        .collect()
}

/// Closed-form `KL[N(mu, e^logvar) ‖ N(0, 1)]`, summed.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Terms of the evidence lower bound for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    /// Single-sample estimate of `E_q[log p(S | z, c)]`.
    pub recon: f64,
    pub kl: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.recon - self.kl
    }
}

/// Complex-Gaussian log-density of power `p` under variance `exp(o)`.
#[inline]
fn lgm_log_density(p: f64, log_v: f64) -> f64 {
    -std::f64::consts::PI.ln() - log_v - p * (-log_v).exp()
}

/// ELBO with explicit reparameterization noise `eps` (`frames × latent_dim`);
/// when `grad` is given, accumulates `d(-ELBO · scale)/dθ` into it.
pub fn elbo_with_noise(
    w: &CvaeWeights,
    power: &[f64],
    c: &[f64],
    eps: &[f64],
    grad: Option<(&mut CvaeWeights, f64)>,
) -> Result<ElboTerms> {
    check_class(w, c)?;
    let rows = power.len() / w.spec_dim;
    let d = w.latent_dim;
    if rows * w.spec_dim != power.len() || eps.len() != rows * d {
        return Err(Error::DimensionMismatch("power block and noise sizes disagree".into()));
    }
    let (enc_out, enc_cache) = w.encoder.forward(&encoder_features(power), rows, c);
    let (mu, lv) = split_posterior(&enc_out, rows, d);
    let z: Vec<f64> = (0..rows * d).map(|i| mu[i] + (lv[i] / 2.0).exp() * eps[i]).collect();
    let (o, dec_cache) = w.decoder.forward(&z, rows, c);
    let mut recon = 0.0;
    for (p, oi) in power.iter().zip(&o) {
        recon += lgm_log_density(*p, oi.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    }
    let kl = kl_divergence(&mu, &lv);
    let terms = ElboTerms { recon, kl };
    if !terms.elbo().is_finite() {
        return Err(Error::TrainingDivergence {
            epoch: 0,
            reason: format!("non-finite ELBO (recon {recon}, kl {kl})"),
        });
    }
    if let Some((g, scale)) = grad {
        // loss = -scale · (recon - kl)
        let d_o: Vec<f64> = power
            .iter()
            .zip(&o)
            .map(|(p, oi)| {
                if oi.abs() > LOGVAR_CLAMP {
                    0.0
                } else {
                    scale * (1.0 - p * (-oi).exp())
                }
            })
            .collect();
        let (dz, _) = w.decoder.backward(&dec_cache, &d_o, rows, Some(&mut g.decoder));
        let mut d_enc = vec![0.0; rows * 2 * d];
        for r in 0..rows {
            for k in 0..d {
                let i = r * d + k;
                let sd = (lv[i] / 2.0).exp();
                d_enc[r * 2 * d + k] = dz[i] + scale * mu[i];
                let raw = enc_out[r * 2 * d + d + k];
                d_enc[r * 2 * d + d + k] = if raw.abs() > LOGVAR_CLAMP {
                    0.0
                } else {
                    dz[i] * eps[i] * 0.5 * sd + scale * 0.5 * (lv[i].exp() - 1.0)
                };
            }
        }
        w.encoder.backward(&enc_cache, &d_enc, rows, Some(&mut g.encoder));
    }
    Ok(terms)
}

/// Single-sample Monte-Carlo ELBO of a frame-major power block.
pub fn elbo(w: &CvaeWeights, power: &[f64], c: &[f64], rng: &mut impl Rng) -> Result<ElboTerms> {
    let rows = power.len() / w.spec_dim.max(1);
    let eps: Vec<f64> = (0..rows * w.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    elbo_with_noise(w, power, c, &eps, None)
}

/// Row-major transpose of a `rows × cols` block.
pub fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_shape() -> CvaeShape {
        CvaeShape {
            spec_dim: 4,
            latent_dim: 2,
            num_classes: 2,
            hidden: 3,
            hidden_layers: 2,
        }
    }

    pub(crate) fn tiny_net(seed: u64) -> CvaeWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = CvaeWeights::random(tiny_shape(), &mut rng);
        for p in w.params_mut() {
            for x in p.iter_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
        w
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Direct per-frame loops, independent of the batched layer code.
    fn reference_stack(stack: &GluStack, x: &[f64], c: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = stack.layers.len() - 1;
        for (l, layer) in stack.layers.iter().enumerate() {
            let mut input = h.clone();
            input.extend_from_slice(c);
            let mut a = vec![0.0; layer.outputs];
            for o in 0..layer.outputs {
                a[o] = layer.b[o];
                for i in 0..layer.inputs {
                    a[o] += layer.w[o * layer.inputs + i] * input[i];
                }
            }
            if l == last {
                return a;
            }
            let half = layer.outputs / 2;
            h = (0..half).map(|k| a[k] / (1.0 + (-a[half + k]).exp())).collect();
        }
        unreachable!()
    }

    #[test]
    fn zero_network_is_constant() {
        let mut w = tiny_net(1);
        for p in w.params_mut() {
            p.fill(0.0);
        }
        let bias = 0.7;
        let last = w.encoder.layers.len() - 1;
        w.encoder.layers[last].b.fill(bias);
        let dl = w.decoder.layers.len() - 1;
        w.decoder.layers[dl].b.fill(45.0);
        let power = vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.1, 9.0, 1.0];
        let (mu, lv) = encoder_forward(&w, &power, &[1.0, 0.0]).unwrap();
        assert!(mu.iter().chain(&lv).all(|&x| x == bias));
        let s = decoder_forward(&w, &[0.3, -0.2, 1.0, 2.0], &[0.5, 0.5]).unwrap();
        assert!(s.iter().all(|&x| x == LOGVAR_CLAMP.exp()));
    }

    #[test]
    fn frame_wise_outputs() {
        let w = tiny_net(2);
        let frame = [0.5, 1.5, 0.2, 3.0];
        let power: Vec<f64> = frame.iter().chain(&frame).copied().collect();
        let (mu, lv) = encoder_forward(&w, &power, &[0.0, 1.0]).unwrap();
        assert_eq!(mu[..2], mu[2..]);
        assert_eq!(lv[..2], lv[2..]);
    }

    #[test]
    fn forward_matches_reference_loops() {
        let w = tiny_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = [0.3, 0.7];
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = decoder_forward(&w, &z, &c).unwrap();
        for r in 0..3 {
            let o = reference_stack(&w.decoder, &z[r * 2..r * 2 + 2], &c);
            for f in 0..4 {
                assert!((s[r * 4 + f] - o[f].exp()).abs() < 1e-12 * s[r * 4 + f]);
            }
        }
        let power: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (mu, lv) = encoder_forward(&w, &power, &c).unwrap();
        for r in 0..3 {
            let feats = encoder_features(&power[r * 4..r * 4 + 4]);
            let o = reference_stack(&w.encoder, &feats, &c);
            for k in 0..2 {
                assert!((mu[r * 2 + k] - o[k]).abs() < 1e-12);
                assert!((lv[r * 2 + k] - o[2 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_permutation_symmetry() {
        let w = tiny_net(5);
        let mut swapped = w.clone();
        for l in swapped.decoder.layers.iter_mut() {
            let base = l.inputs - 2;
            for o in 0..l.outputs {
                l.w.swap(o * l.inputs + base, o * l.inputs + base + 1);
            }
        }
        let z = [0.1, -0.4, 0.8, 0.3];
        let a = decoder_forward(&w, &z, &[1.0, 0.0]).unwrap();
        let b = decoder_forward(&swapped, &z, &[0.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_properties() {
        assert_eq!(softmax(&[0.0, 0.0, 0.0, 0.0]), vec![0.25; 4]);
        let a = softmax(&[0.1, -2.0, 3.0]);
        let b = softmax(&[100.1, 98.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let big = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(big.iter().all(|x| x.is_finite()));
        // e / (e + 1) and 1 / (e + 1), exp(-2000) underflows to 0 at double precision
        let e = std::f64::consts::E;
        assert!((big[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((big[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(big[2], 0.0);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(kl_divergence(&[1.0], &[0.0]), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            assert!(kl_divergence(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn reparam_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = reparam_sample(&[1.5, -2.0], &[-LOGVAR_CLAMP * 2.0, -LOGVAR_CLAMP * 2.0], &mut rng);
        assert!((z[0] - 1.5).abs() < 1e-12 && (z[1] + 2.0).abs() < 1e-12);
        let a = reparam_sample(&[0.0; 5], &[0.0; 5], &mut ChaCha8Rng::seed_from_u64(8));
        let b = reparam_sample(&[0.0; 5], &[0.0; 5], &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        let n = 100_000;
        let mu = 0.7;
        let lv = 0.4f64;
        let z = reparam_sample(&vec![mu; n], &vec![lv; n], &mut rng);
        let mean = z.iter().sum::<f64>() / n as f64;
        let sigma = (lv / 2.0).exp();
        assert!((mean - mu).abs() <= 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn elbo_terms_match_independent_recomputation() {
        let w = tiny_net(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let power: Vec<f64> = (0..12).map(|_| rng.gen_range(0.01..3.0)).collect();
        let eps: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let c = [1.0, 0.0];
        let t = elbo_with_noise(&w, &power, &c, &eps, None).unwrap();
        let (mu, lv) = encoder_forward(&w, &power, &c).unwrap();
        let z: Vec<f64> = (0..6).map(|i| mu[i] + (lv[i] / 2.0).exp() * eps[i]).collect();
        let v = decoder_forward(&w, &z, &c).unwrap();
        let recon: f64 = power
            .iter()
            .zip(&v)
            .map(|(p, v)| -std::f64::consts::PI.ln() - v.ln() - p / v)
            .sum();
        let kl: f64 = (0..6)
            .map(|i| 0.5 * (mu[i] * mu[i] + lv[i].exp() - 1.0 - lv[i]))
            .sum();
        assert!((t.recon - recon).abs() < 1e-10);
        assert!((t.kl - kl).abs() < 1e-12);
    }

    /// Central finite-difference check of every parameter of the ELBO loss.
    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let w = tiny_net(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let power: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..3.0)).collect();
        let eps: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let c = [0.0, 1.0];
        let mut grad = w.zeros_like();
        elbo_with_noise(&w, &power, &c, &eps, Some((&mut grad, 1.0))).unwrap();
        let loss = |w: &CvaeWeights| -elbo_with_noise(w, &power, &c, &eps, None).unwrap().elbo();
        let analytic: Vec<f64> = grad.params().concat();
        let mut probe = w.clone();
        let mut idx = 0;
        let mut worst: f64 = 0.0;
        for t in 0..probe.params().len() {
            for i in 0..probe.params()[t].len() {
                let x0 = probe.params()[t][i];
                let h = 1e-5 * x0.abs().max(1.0);
                probe.params_mut()[t][i] = x0 + h;
                let up = loss(&probe);
                probe.params_mut()[t][i] = x0 - h;
                let down = loss(&probe);
                probe.params_mut()[t][i] = x0;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max(rel_err(analytic[idx], fd));
                idx += 1;
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn kl_gradient_zero_at_prior() {
        // d KL / d mu = mu
        let mut w = tiny_net(13);
        for p in w.params_mut() {
            p.fill(0.0);
        }
        let mut grad = w.zeros_like();
        let power = vec![1.0; 4];
        let eps = vec![0.0; 2];
        elbo_with_noise(&w, &power, &[1.0, 0.0], &eps, Some((&mut grad, 1.0))).unwrap();
        let last = grad.encoder.layers.len() - 1;
        assert!(grad.encoder.layers[last].b.iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn weights_round_trip_through_container() {
        let w = tiny_net(14);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        w.save(&p).unwrap();
        assert_eq!(CvaeWeights::load(&p).unwrap(), w);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let shape = CvaeShape::new(8, 3);
        let a = CvaeWeights::random(shape, &mut ChaCha8Rng::seed_from_u64(3));
        let b = CvaeWeights::random(shape, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.latent_dim, 16);
        assert_eq!(a.hidden, 128);
    }
}
