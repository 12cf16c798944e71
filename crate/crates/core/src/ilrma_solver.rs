//! Determined separation with demixing matrices: `y(f,n) = W(f)ᴴ x(f,n)`,
//! where column `j` of `W(f)` is the demixing filter `w_j(f)` of source `j`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::mnmf_solver::{Block, MixtureObservation, NmfKind, SolverTrace, SourceModel, CHECKPOINT_KIND};
use crate::signal_io::Spectrogram;
use crate::source_models::{NmfPerSource, NmfShared, SolverStats, VarianceField};
use crate::tensorlab::{CMat, CVec, C64};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Loading tried when `Wᴴ V_j` is singular, relative to `tr V_j / I`.
const IP_RETRY_LOADING: f64 = 1e-9;

/// `W(f)` per frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationMatrices {
    pub bins: usize,
    pub channels: usize,
    w: Vec<CMat>,
}

impl SeparationMatrices {
    pub fn identity(bins: usize, channels: usize) -> Self {
        SeparationMatrices {
            bins,
            channels,
            w: vec![CMat::identity(channels); bins],
        }
    }

    pub fn from_matrices(w: Vec<CMat>) -> Result<Self> {
        let channels = w.first().map_or(0, |m| m.dim());
        if channels == 0 || w.iter().any(|m| m.dim() != channels) {
            return Err(Error::DimensionMismatch("demixing matrices must share one nonzero size".into()));
        }
        Ok(SeparationMatrices {
            bins: w.len(),
            channels,
            w,
        })
    }

    pub fn get(&self, f: usize) -> &CMat {
        &self.w[f]
    }

    pub fn set(&mut self, f: usize, m: CMat) {
        self.w[f] = m;
    }

    /// `y_j(f,n) = w_j(f)ᴴ x(f,n)` for every source.
    pub fn separate(&self, obs: &MixtureObservation) -> Result<Vec<Spectrogram>> {
        check(obs, self)?;
        let mut out = vec![Spectrogram::zeros(obs.bins, obs.frames, 1); self.channels];
        for f in 0..obs.bins {
            let wh = self.w[f].adjoint();
            for n in 0..obs.frames {
                let y = wh.mul_vec(obs.x(f, n));
                for (j, s) in out.iter_mut().enumerate() {
                    s.set(f, n, 0, y[j]);
                }
            }
        }
        Ok(out)
    }
}

fn check(obs: &MixtureObservation, w: &SeparationMatrices) -> Result<()> {
    if w.bins != obs.bins || w.channels != obs.channels {
        return Err(Error::DimensionMismatch(format!(
            "demixing model is {} bins x {} channels, mixture is {} x {}",
            w.bins, w.channels, obs.bins, obs.channels
        )));
    }
    Ok(())
}

fn check_variance(obs: &MixtureObservation, v: &VarianceField) -> Result<()> {
    if v.sources != obs.channels || v.bins != obs.bins || v.frames != obs.frames {
        return Err(Error::DimensionMismatch(format!(
            "variance field is {}x{}x{}, expected {}x{}x{}",
            v.sources, v.bins, v.frames, obs.channels, obs.bins, obs.frames
        )));
    }
    Ok(())
}

/// `−2N Σ_f log|det W(f)| + Σ_{f,n,j} [log v_j + |w_jᴴ x|² / v_j] + F N I log π`.
pub fn neg_log_likelihood_det(obs: &MixtureObservation, w: &SeparationMatrices, v: &VarianceField) -> Result<f64> {
    check(obs, w)?;
    check_variance(obs, v)?;
    let per_bin: Vec<Result<f64>> = (0..obs.bins)
        .into_par_iter()
        .map(|f| {
            let det = w.w[f].det().norm();
            if !(det > 0.0) || !det.is_finite() {
                return Err(Error::IllConditioned {
                    bin: Some(f),
                    reason: "demixing matrix is singular".into(),
                });
            }
            let wh = w.w[f].adjoint();
            let mut total = -2.0 * obs.frames as f64 * det.ln();
            for n in 0..obs.frames {
                let y = wh.mul_vec(obs.x(f, n));
                for j in 0..obs.channels {
                    let vj = v.get(j, f, n);
                    total += vj.ln() + y[j].norm_sqr() / vj + LN_PI;
                }
            }
            Ok(total)
        })
        .collect();
    per_bin.into_iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpOutcome {
    Updated,
    /// `Wᴴ V_j` was singular and the update used a loaded `V_j`.
    Loaded,
    Skipped,
}

fn weighted_covariance(obs: &MixtureObservation, v: &VarianceField, j: usize, f: usize) -> CMat {
    let mut cov = CMat::zeros(obs.channels);
    for n in 0..obs.frames {
        cov.add_scaled(1.0 / v.get(j, f, n), &obs.outer(f, n));
    }
    cov.scale(1.0 / obs.frames as f64).hermitian_part()
}

fn ip_column(w: &CMat, cov: &CMat, j: usize) -> Option<CVec> {
    let dim = w.dim();
    let a = w.adjoint() * *cov;
    let col = a.solve(&CVec::basis(dim, j))?;
    let q = cov.quad_form(&col).re;
    if !(q > 0.0) || !q.is_finite() {
        return None;
    }
    let out = col.scale(C64::new(1.0 / q.sqrt(), 0.0));
    out.as_slice().iter().all(|z| z.re.is_finite() && z.im.is_finite()).then_some(out)
}

/// Iterative-projection update of `w_j(f)`:
/// `V_j = (1/N) Σ_n x xᴴ / v_j`, `w_j ← (Wᴴ V_j)⁻¹ e_j`, `w_j ← w_j / sqrt(w_jᴴ V_j w_j)`.
pub fn ip_update(obs: &MixtureObservation, w: &mut SeparationMatrices, v: &VarianceField, j: usize, f: usize) -> Result<IpOutcome> {
    check(obs, w)?;
    check_variance(obs, v)?;
    let cov = weighted_covariance(obs, v, j, f);
    Ok(ip_bin(&mut w.w[f], &cov, j))
}

fn ip_bin(wf: &mut CMat, cov: &CMat, j: usize) -> IpOutcome {
    if let Some(col) = ip_column(wf, cov, j) {
        wf.set_column(j, &col);
        return IpOutcome::Updated;
    }
    let dim = cov.dim();
    let load = IP_RETRY_LOADING * (cov.trace().re / dim as f64).abs().max(f64::MIN_POSITIVE);
    let mut loaded = *cov;
    loaded.add_scaled(load, &CMat::identity(dim));
    match ip_column(wf, &loaded, j) {
        Some(col) => {
            wf.set_column(j, &col);
            IpOutcome::Loaded
        }
        None => IpOutcome::Skipped,
    }
}

/// Scales each separated source by the reference-channel entry of `W(f)⁻ᴴ`,
/// the minimal-distortion image of `y_j` on that channel.
pub fn project_back(y: &[Spectrogram], w: &SeparationMatrices, reference: usize) -> Result<Vec<Spectrogram>> {
    if y.len() != w.channels || reference >= w.channels {
        return Err(Error::DimensionMismatch(format!(
            "{} separated signals and reference {reference} for a {}-channel model",
            y.len(),
            w.channels
        )));
    }
    if y.iter().any(|s| s.bins != w.bins || s.channels != 1 || s.frames != y[0].frames) {
        return Err(Error::DimensionMismatch("separated signals must be single-channel and match W".into()));
    }
    let mut out = y.to_vec();
    for f in 0..w.bins {
        let a = w.w[f].adjoint().inverse().ok_or_else(|| Error::IllConditioned {
            bin: Some(f),
            reason: "demixing matrix is singular".into(),
        })?;
        for (j, s) in out.iter_mut().enumerate() {
            let gain = a[(reference, j)];
            for n in 0..s.frames {
                let z = s.get(f, n, 0);
                s.set(f, n, 0, z * gain);
            }
        }
    }
    Ok(out)
}

/// Multichannel images `W⁻ᴴ[:, j] y_j`; they sum to the mixture.
pub fn source_images(obs: &MixtureObservation, w: &SeparationMatrices) -> Result<Vec<Spectrogram>> {
    let y = w.separate(obs)?;
    let dim = obs.channels;
    let mut out = vec![Spectrogram::zeros(obs.bins, obs.frames, dim); dim];
    for f in 0..obs.bins {
        let a = w.w[f].adjoint().inverse().ok_or_else(|| Error::IllConditioned {
            bin: Some(f),
            reason: "demixing matrix is singular".into(),
        })?;
        for (j, img) in out.iter_mut().enumerate() {
            let col = a.column(j);
            for n in 0..obs.frames {
                img.set_vector(f, n, &col.scale(y[j].get(f, n, 0)));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlrmaConfig {
    pub kind: NmfKind,
    /// Bases per source. The shared dictionary holds `sources × bases`.
    pub bases: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IlrmaConfig {
    fn default() -> Self {
        IlrmaConfig {
            kind: NmfKind::Nmf1,
            bases: 4,
            iterations: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IlrmaFit {
    pub kind: NmfKind,
    pub demixing: SeparationMatrices,
    pub model: SourceModel,
    pub trace: SolverTrace,
    /// IP updates that needed loading or were skipped.
    pub loaded_updates: usize,
    pub skipped_updates: usize,
}

impl IlrmaFit {
    pub fn to_container(&self) -> Container {
        let dim = self.demixing.channels;
        let mut data = Vec::with_capacity(self.demixing.bins * dim * dim * 2);
        for m in &self.demixing.w {
            for a in 0..dim {
                for b in 0..dim {
                    data.push(m[(a, b)].re);
                    data.push(m[(a, b)].im);
                }
            }
        }
        let v = self.model.variance_field();
        let tensors = vec![
            Tensor::new("demixing", vec![self.demixing.bins, dim, dim, 2], data),
            Tensor::new("variance", vec![v.sources, v.bins, v.frames], v.values().to_vec()),
        ];
        let header = serde_json::json!({
            "method": "ilrma",
            "sources": dim,
            "bins": self.demixing.bins,
            "channels": dim,
            "frames": v.frames,
            "trace": self.trace,
        });
        Container::new(CHECKPOINT_KIND, header, tensors)
    }
}

/// Source-model statistics for `|y|²` under variance `v`:
/// `num = |y|² / v²`, `den = 1 / v`.
fn power_stats(y: &[Spectrogram], v: &VarianceField) -> Result<SolverStats> {
    let mut num = v.clone();
    let mut den = v.clone();
    for (j, s) in y.iter().enumerate() {
        let (a, b) = (num.source_mut(j), den.source_mut(j));
        for f in 0..s.bins {
            for n in 0..s.frames {
                let i = f * s.frames + n;
                let vv = b[i];
                a[i] = s.get(f, n, 0).norm_sqr() / (vv * vv);
                b[i] = 1.0 / vv;
            }
        }
    }
    for x in num.values().iter().chain(den.values()) {
        if !x.is_finite() {
            return Err(Error::Divergence {
                f: 0,
                n: 0,
                reason: "non-finite source statistic".into(),
            });
        }
    }
    Ok(SolverStats { num, den })
}

/// Fits ILRMA from identity demixing matrices. Requires as many sources as channels.
pub fn fit_ilrma(obs: &MixtureObservation, config: &IlrmaConfig) -> Result<IlrmaFit> {
    fit_ilrma_with(obs, config, |_, _| Ok(()))
}

/// [`fit_ilrma`] with a callback on the state after every iteration.
pub fn fit_ilrma_with(
    obs: &MixtureObservation,
    config: &IlrmaConfig,
    mut on_iteration: impl FnMut(usize, &IlrmaFit) -> Result<()>,
) -> Result<IlrmaFit> {
    if config.bases == 0 {
        return Err(Error::InvalidInput("bases must be positive".into()));
    }
    let (nb, nf, nj) = (obs.bins, obs.frames, obs.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match config.kind {
        NmfKind::Nmf1 => SourceModel::PerSource(NmfPerSource::random(&vec![config.bases; nj], nb, nf, &mut rng)),
        NmfKind::Nmf2 => {
            let mut m = NmfShared::random(nj, nj * config.bases, nb, nf, &mut rng);
            m.random_indicators(&mut rng);
            SourceModel::Shared(m)
        }
    };
    let mut power = 0.0;
    for f in 0..nb {
        for n in 0..nf {
            power += obs.x(f, n).norm_sqr();
        }
    }
    let v0 = model.variance_field();
    let level = power / (nb * nf * nj) as f64 / (v0.values().iter().sum::<f64>() / v0.values().len() as f64);
    if level.is_finite() && level > 0.0 {
        match &mut model {
            SourceModel::PerSource(m) => (0..nj).for_each(|j| m.scale_source(j, level)),
            SourceModel::Shared(m) => m.u.iter_mut().for_each(|u| *u *= level),
        }
    }
    let mut fit = IlrmaFit {
        kind: config.kind,
        demixing: SeparationMatrices::identity(nb, nj),
        model,
        trace: SolverTrace::default(),
        loaded_updates: 0,
        skipped_updates: 0,
    };
    fit.trace.initial_nll = neg_log_likelihood_det(obs, &fit.demixing, &fit.model.variance_field())?;
    for it in 0..config.iterations {
        ilrma_iteration(obs, &mut fit, it).map_err(|e| match e {
            Error::DimensionMismatch(_) | Error::InvalidInput(_) => e,
            other => Error::SolverAborted {
                iteration: it,
                reason: other.to_string(),
                nll_trace: fit.trace.nll_sequence(),
            },
        })?;
        on_iteration(it, &fit)?;
    }
    Ok(fit)
}

fn push(trace: &mut SolverTrace, it: usize, block: Block, nll: f64, t: Instant) {
    trace.blocks.push(crate::mnmf_solver::BlockRecord {
        iteration: it,
        block,
        nll,
        majorizer: None,
        seconds: t.elapsed().as_secs_f64(),
    });
}

fn ilrma_iteration(obs: &MixtureObservation, fit: &mut IlrmaFit, it: usize) -> Result<()> {
    let y = fit.demixing.separate(obs)?;
    let blocks: &[Block] = match fit.model {
        SourceModel::PerSource(_) => &[Block::Templates, Block::Activations],
        SourceModel::Shared(_) => &[Block::Templates, Block::Activations, Block::Indicators],
    };
    for &block in blocks {
        let t = Instant::now();
        let stats = power_stats(&y, &fit.model.variance_field())?;
        match (&mut fit.model, block) {
            (SourceModel::PerSource(m), Block::Templates) => m.update_h(&stats)?,
            (SourceModel::PerSource(m), Block::Activations) => m.update_u(&stats)?,
            (SourceModel::Shared(m), Block::Templates) => m.update_h(&stats)?,
            (SourceModel::Shared(m), Block::Activations) => m.update_u(&stats)?,
            (SourceModel::Shared(m), Block::Indicators) => m.update_b(&stats)?,
            _ => unreachable!("block schedule"),
        }
        let nll = neg_log_likelihood_det(obs, &fit.demixing, &fit.model.variance_field())?;
        push(&mut fit.trace, it, block, nll, t);
    }

    let t = Instant::now();
    let v = fit.model.variance_field();
    let outcomes: Vec<Vec<IpOutcome>> = fit
        .demixing
        .w
        .par_iter_mut()
        .enumerate()
        .map(|(f, wf)| {
            (0..obs.channels)
                .map(|j| ip_bin(wf, &weighted_covariance(obs, &v, j, f), j))
                .collect()
        })
        .collect();
    for o in outcomes.iter().flatten() {
        match o {
            IpOutcome::Loaded => fit.loaded_updates += 1,
            IpOutcome::Skipped => fit.skipped_updates += 1,
            IpOutcome::Updated => {}
        }
    }
    let nll = neg_log_likelihood_det(obs, &fit.demixing, &v)?;
    push(&mut fit.trace, it, Block::Spatial, nll, t);

    normalize_ilrma(obs, fit)?;
    if !fit.model.variance_field().all_positive() {
        return Err(Error::Divergence {
            f: 0,
            n: 0,
            reason: "variance field is not strictly positive".into(),
        });
    }
    Ok(())
}

/// Exact rescalings of `(w_j, v_j)` pairs: `w_j → w_j / λ` with `v_j → v_j / λ²`
/// leaves the likelihood unchanged.
fn normalize_ilrma(obs: &MixtureObservation, fit: &mut IlrmaFit) -> Result<()> {
    let nj = obs.channels;
    let lambdas: Vec<f64> = match &mut fit.model {
        SourceModel::PerSource(m) => {
            let y = fit.demixing.separate(obs)?;
            let lambdas: Vec<f64> = y
                .iter()
                .map(|s| (s.power(0).iter().sum::<f64>() / (s.bins * s.frames) as f64).sqrt())
                .collect();
            for (j, l) in lambdas.iter().enumerate() {
                if *l > 0.0 && l.is_finite() {
                    m.scale_source(j, 1.0 / (l * l));
                }
            }
            m.normalize_templates();
            lambdas
        }
        SourceModel::Shared(m) => {
            let sums = m.normalize_indicators();
            m.normalize_templates();
            sums.iter().map(|s| s.sqrt()).collect()
        }
    };
    for f in 0..obs.bins {
        let mut wf = fit.demixing.w[f];
        for (j, l) in lambdas.iter().enumerate().take(nj) {
            if *l > 0.0 && l.is_finite() {
                let col = wf.column(j).scale(C64::new(1.0 / l, 0.0));
                wf.set_column(j, &col);
            }
        }
        fit.demixing.w[f] = wf;
    }
    Ok(())
}
