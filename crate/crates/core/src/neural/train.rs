use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{elbo_with_noise, CvaeWeights, ElboTerms};
use crate::container::{Container, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Examples per Adam step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// One labelled power-spectrogram block, frame-major `frames × bins`,
/// scaled to unit mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub bins: usize,
    pub frames: usize,
    pub power: Vec<f64>,
    pub class: usize,
}

impl TrainExample {
    /// Builds an example from a bin-major `bins × frames` power block.
    pub fn from_bin_major(power: &[f64], bins: usize, frames: usize, class: usize) -> Result<Self> {
        if power.len() != bins * frames || frames == 0 {
            return Err(Error::DimensionMismatch(format!(
                "power block of {} values is not {bins}x{frames}",
                power.len()
            )));
        }
        if power.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("power spectrogram must be finite and nonnegative".into()));
        }
        let mean = power.iter().sum::<f64>() / power.len() as f64;
        if !(mean > 0.0) {
            return Err(Error::InvalidInput("power spectrogram is all zero".into()));
        }
        let mut out = super::transpose(power, bins, frames);
        for p in out.iter_mut() {
            *p /= mean;
        }
        Ok(TrainExample {
            bins,
            frames,
            power: out,
            class,
        })
    }

    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let mut c = vec![0.0; classes];
        c[self.class] = 1.0;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: usize) -> Self {
        AdamState {
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut CvaeWeights, grad: &CvaeWeights, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut i = 0;
        for (p, g) in w.params_mut().into_iter().zip(grad.params()) {
            for (x, gx) in p.iter_mut().zip(g) {
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * gx;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * gx * gx;
                *x -= cfg.learning_rate * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.epsilon);
                i += 1;
            }
        }
    }
}

/// Mean per-bin ELBO terms over one epoch, measured before each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Resumable Adam training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub weights: CvaeWeights,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub log: Vec<EpochLog>,
}

pub const TRAIN_STATE_KIND: &str = "cvae-train-state";

impl Trainer {
    pub fn new(weights: CvaeWeights, config: TrainConfig) -> Self {
        let n = weights.num_params();
        Trainer {
            weights,
            adam: AdamState::new(n),
            epoch: 0,
            config,
            log: Vec::new(),
        }
    }

    fn noise(&self, example: usize, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(((self.epoch as u64) << 32) | example as u64);
        (0..len).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::MAX - self.epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Runs one epoch. On divergence the trainer keeps the state it had
    /// before the epoch started.
    pub fn run_epoch(&mut self, data: &[TrainExample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let classes = self.weights.num_classes;
        if let Some(bad) = data.iter().find(|e| e.class >= classes || e.bins != self.weights.spec_dim) {
            return Err(Error::InvalidInput(format!(
                "example with class {} and {} bins does not fit a {classes}-class, {}-bin network",
                bad.class, bad.bins, self.weights.spec_dim
            )));
        }
        let mut next = self.clone();
        let order = self.order(data.len());
        let (mut sum_elbo, mut sum_recon, mut sum_kl) = (0.0, 0.0, 0.0);
        for batch in order.chunks(self.config.batch_size.max(1)) {
            let w = &next.weights;
            let results: Vec<Result<(ElboTerms, CvaeWeights, f64)>> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &data[i];
                    let cells = (ex.bins * ex.frames) as f64;
                    let eps = self.noise(i, ex.frames * w.latent_dim);
                    let mut g = w.zeros_like();
                    let scale = 1.0 / (cells * batch.len() as f64);
                    let terms = elbo_with_noise(w, &ex.power, &ex.one_hot(classes), &eps, Some((&mut g, scale)))?;
                    Ok((terms, g, cells))
                })
                .collect();
            let mut total = w.zeros_like();
            for r in results {
                let (terms, g, cells) = r.map_err(|e| Error::TrainingDivergence {
                    epoch: self.epoch,
                    reason: e.to_string(),
                })?;
                sum_elbo += terms.elbo() / cells;
                sum_recon += terms.recon / cells;
                sum_kl += terms.kl / cells;
                for (acc, x) in total.params_mut().into_iter().zip(g.params()) {
                    for (a, b) in acc.iter_mut().zip(x) {
                        *a += b;
                    }
                }
            }
            let cfg = next.config;
            next.adam.step(&mut next.weights, &total, &cfg);
            if !next.weights.is_finite() {
                return Err(Error::TrainingDivergence {
                    epoch: self.epoch,
                    reason: "non-finite parameters after update".into(),
                });
            }
        }
        let m = data.len() as f64;
        let log = EpochLog {
            epoch: self.epoch,
            elbo: sum_elbo / m,
            recon: sum_recon / m,
            kl: sum_kl / m,
        };
        next.epoch += 1;
        next.log.push(log);
        *self = next;
        Ok(log)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self, data: &[TrainExample]) -> Result<()> {
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(data)?;
            log::debug!("epoch {} elbo/bin {:.5}", log.epoch, log.elbo);
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.weights.to_container();
        c.kind = TRAIN_STATE_KIND.to_string();
        c.header["epoch"] = self.epoch.into();
        c.header["adam_t"] = self.adam.t.into();
        c.header["config"] = serde_json::to_value(self.config).expect("config serializes");
        let n = self.adam.m.len();
        c.tensors.push(Tensor::new("adam.m", vec![n], self.adam.m.clone()));
        c.tensors.push(Tensor::new("adam.v", vec![n], self.adam.v.clone()));
        let log: Vec<f64> = self
            .log
            .iter()
            .flat_map(|l| [l.epoch as f64, l.elbo, l.recon, l.kl])
            .collect();
        c.tensors.push(Tensor::new("log", vec![self.log.len(), 4], log));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(TRAIN_STATE_KIND)?;
        let mut as_weights = c.clone();
        as_weights.kind = super::WEIGHTS_KIND.to_string();
        let weights = CvaeWeights::from_container(&as_weights)?;
        let bad = |what: &str| Error::InvalidInput(format!("training state header lacks {what}"));
        let epoch = c.header["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize;
        let t = c.header["adam_t"].as_u64().ok_or_else(|| bad("adam_t"))?;
        let config = serde_json::from_value(c.header["config"].clone()).map_err(|_| bad("config"))?;
        let log = c
            .tensor("log")?
            .data
            .chunks_exact(4)
            .map(|r| EpochLog {
                epoch: r[0] as usize,
                elbo: r[1],
                recon: r[2],
                kl: r[3],
            })
            .collect();
        let m = c.tensor("adam.m")?.data.clone();
        let v = c.tensor("adam.v")?.data.clone();
        if m.len() != weights.num_params() || v.len() != m.len() {
            return Err(Error::DimensionMismatch("optimizer state does not match the weights".into()));
        }
        Ok(Trainer {
            weights,
            adam: AdamState { m, v, t },
            epoch,
            config,
            log,
        })
    }
}

/// Trains `init` on `data` for `config.epochs` epochs.
pub fn train_cvae(data: &[TrainExample], config: TrainConfig, init: CvaeWeights) -> Result<(CvaeWeights, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(init, config);
    trainer.run(data)?;
    Ok((trainer.weights, trainer.log))
}
