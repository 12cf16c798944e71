//! Inference-time updates of the decoder inputs `(z_j, d_j)`.
//!
//! With the auxiliary variables frozen, the majorizer's source-`j` term is
//! `Σ_{f,n} [a(f,n) / v(f,n) + v(f,n) b(f,n)]` with `v = g σ²_θ(z, softmax(d))`.
//! Plain gradient steps on it are guarded by backtracking so the term never
//! increases.

use serde::{Deserialize, Serialize};

use super::{softmax, softmax_backward, CvaeWeights, GluStack, LOGVAR_CLAMP};
use crate::error::{Error, Result};
use crate::source_models::VaeSourceParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    /// Gradient steps per solver iteration.
    pub steps: usize,
    pub learning_rate: f64,
    /// Step halvings tried before a step is skipped.
    pub max_halvings: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            steps: 10,
            learning_rate: 5e-4,
            max_halvings: 10,
        }
    }
}

/// Value and gradients of the source term.
#[derive(Clone, Debug)]
pub struct LatentGrad {
    pub value: f64,
    /// `frames × latent_dim`.
    pub dz: Vec<f64>,
    pub dd: Vec<f64>,
    /// Decoder parameter gradients, when requested.
    pub decoder: Option<GluStack>,
}

fn check(w: &CvaeWeights, p: &VaeSourceParams, a: &[f64], b: &[f64]) -> Result<usize> {
    let frames = p.z.len() / w.latent_dim;
    let cells = frames * w.spec_dim;
    if frames * w.latent_dim != p.z.len() || a.len() != cells || b.len() != cells {
        return Err(Error::DimensionMismatch(format!(
            "latents for {frames} frames need {cells} coefficients, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if p.d.len() != w.num_classes {
        return Err(Error::DimensionMismatch("class logits do not match the decoder".into()));
    }
    Ok(frames)
}

/// Source term with coefficient blocks `a`, `b` laid out `bins × frames`.
pub fn source_term(w: &CvaeWeights, p: &VaeSourceParams, a: &[f64], b: &[f64]) -> Result<f64> {
    let frames = check(w, p, a, b)?;
    let c = softmax(&p.d);
    let (o, _) = w.decoder.forward(&p.z, frames, &c);
    let mut value = 0.0;
    for n in 0..frames {
        for f in 0..w.spec_dim {
            let v = p.g * o[n * w.spec_dim + f].clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP).exp();
            let i = f * frames + n;
            value += a[i] / v + v * b[i];
        }
    }
    Ok(value)
}

/// Source term and its gradients with respect to `z`, `d` and optionally the
/// decoder parameters.
pub fn source_term_grad(
    w: &CvaeWeights,
    p: &VaeSourceParams,
    a: &[f64],
    b: &[f64],
    with_params: bool,
) -> Result<LatentGrad> {
    let frames = check(w, p, a, b)?;
    let c = softmax(&p.d);
    let (o, cache) = w.decoder.forward(&p.z, frames, &c);
    let mut value = 0.0;
    let mut d_o = vec![0.0; o.len()];
    for n in 0..frames {
        for f in 0..w.spec_dim {
            let k = n * w.spec_dim + f;
            let v = p.g * o[k].clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP).exp();
            let i = f * frames + n;
            value += a[i] / v + v * b[i];
            if o[k].abs() <= LOGVAR_CLAMP {
                d_o[k] = v * b[i] - a[i] / v;
            }
        }
    }
    let mut pg = with_params.then(|| w.decoder.zeros_like());
    let (dz, dc) = w.decoder.backward(&cache, &d_o, frames, pg.as_mut());
    Ok(LatentGrad {
        value,
        dz,
        dd: softmax_backward(&c, &dc),
        decoder: pg,
    })
}

/// One plain gradient step on `(z, d)`.
pub fn latent_step(p: &VaeSourceParams, dz: &[f64], dd: &[f64], lr: f64) -> VaeSourceParams {
    VaeSourceParams {
        z: p.z.iter().zip(dz).map(|(z, g)| z - lr * g).collect(),
        d: p.d.iter().zip(dd).map(|(d, g)| d - lr * g).collect(),
        g: p.g,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatentReport {
    pub initial: f64,
    pub last: f64,
    pub accepted: usize,
    pub halvings: usize,
    pub skipped: usize,
}

/// Runs `cfg.steps` backtracked gradient steps on the source term.
pub fn descend_latents(
    w: &CvaeWeights,
    p: &mut VaeSourceParams,
    a: &[f64],
    b: &[f64],
    cfg: &LatentConfig,
) -> Result<LatentReport> {
    let mut report = LatentReport::default();
    for step in 0..cfg.steps {
        let grad = source_term_grad(w, p, a, b, false)?;
        if !grad.value.is_finite() {
            return Err(Error::Divergence {
                f: 0,
                n: 0,
                reason: "non-finite latent objective".into(),
            });
        }
        if step == 0 {
            report.initial = grad.value;
            report.last = grad.value;
        }
        if grad.dz.iter().chain(&grad.dd).all(|g| *g == 0.0) {
            break;
        }
        let mut lr = cfg.learning_rate;
        let mut accepted = false;
        for _ in 0..=cfg.max_halvings {
            let cand = latent_step(p, &grad.dz, &grad.dd, lr);
            let value = source_term(w, &cand, a, b)?;
            if value <= grad.value {
                *p = cand;
                report.last = value;
                accepted = true;
                break;
            }
            lr *= 0.5;
            report.halvings += 1;
        }
        if accepted {
            report.accepted += 1;
        } else {
            // the gradient does not change until the coefficients do
            report.skipped += 1;
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tests::tiny_net;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64) -> (CvaeWeights, VaeSourceParams, Vec<f64>, Vec<f64>) {
        let w = tiny_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let frames = 3;
        let p = VaeSourceParams {
            z: (0..frames * w.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            d: (0..w.num_classes).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            g: 1.3,
        };
        let a = (0..frames * w.spec_dim).map(|_| rng.gen_range(0.1..2.0)).collect();
        let b = (0..frames * w.spec_dim).map(|_| rng.gen_range(0.1..2.0)).collect();
        (w, p, a, b)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (w, p, a, b) = instance(21);
        let grad = source_term_grad(&w, &p, &a, &b, true).unwrap();
        let h = 1e-5;
        for i in 0..p.z.len() {
            let mut up = p.clone();
            up.z[i] += h;
            let mut dn = p.clone();
            dn.z[i] -= h;
            let fd = (source_term(&w, &up, &a, &b).unwrap() - source_term(&w, &dn, &a, &b).unwrap()) / (2.0 * h);
            assert!(rel_err(grad.dz[i], fd) <= 1e-4, "z[{i}]: {} vs {fd}", grad.dz[i]);
        }
        for i in 0..p.d.len() {
            let mut up = p.clone();
            up.d[i] += h;
            let mut dn = p.clone();
            dn.d[i] -= h;
            let fd = (source_term(&w, &up, &a, &b).unwrap() - source_term(&w, &dn, &a, &b).unwrap()) / (2.0 * h);
            assert!(rel_err(grad.dd[i], fd) <= 1e-4, "d[{i}]: {} vs {fd}", grad.dd[i]);
        }
        let pg = grad.decoder.unwrap();
        let mut probe = w.clone();
        for (l, layer) in pg.layers.iter().enumerate() {
            for i in 0..layer.w.len() {
                let x0 = probe.decoder.layers[l].w[i];
                let hh = 1e-5 * x0.abs().max(1.0);
                probe.decoder.layers[l].w[i] = x0 + hh;
                let up = source_term(&probe, &p, &a, &b).unwrap();
                probe.decoder.layers[l].w[i] = x0 - hh;
                let dn = source_term(&probe, &p, &a, &b).unwrap();
                probe.decoder.layers[l].w[i] = x0;
                assert!(rel_err(layer.w[i], (up - dn) / (2.0 * hh)) <= 1e-4);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = VaeSourceParams {
            z: vec![0.5, -0.5],
            d: vec![1.0, 2.0],
            g: 2.0,
        };
        assert_eq!(latent_step(&p, &[0.0, 0.0], &[0.0, 0.0], 0.1), p);
    }

    #[test]
    fn gradient_steps_solve_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let curv: Vec<f64> = (0..4).map(|_| rng.gen_range(1.0..5.0)).collect();
        let target: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut p = VaeSourceParams {
            z: vec![0.0; 2],
            d: vec![0.0; 2],
            g: 1.0,
        };
        for _ in 0..500 {
            let dz: Vec<f64> = (0..2).map(|i| curv[i] * (p.z[i] - target[i])).collect();
            let dd: Vec<f64> = (0..2).map(|i| curv[2 + i] * (p.d[i] - target[2 + i])).collect();
            p = latent_step(&p, &dz, &dd, 0.1);
        }
        for i in 0..2 {
            assert!((p.z[i] - target[i]).abs() < 1e-6);
            assert!((p.d[i] - target[2 + i]).abs() < 1e-6);
        }
    }

    #[test]
    fn backtracking_never_increases_objective() {
        for seed in 0..5 {
            let (w, mut p, a, b) = instance(seed);
            let cfg = LatentConfig {
                steps: 30,
                learning_rate: 0.5,
                max_halvings: 10,
            };
            let mut prev = source_term(&w, &p, &a, &b).unwrap();
            for _ in 0..5 {
                let r = descend_latents(&w, &mut p, &a, &b, &cfg).unwrap();
                assert!(r.last <= r.initial);
                let now = source_term(&w, &p, &a, &b).unwrap();
                assert!(now <= prev);
                prev = now;
            }
        }
    }
}
