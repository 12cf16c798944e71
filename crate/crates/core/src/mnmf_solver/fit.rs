use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_stats, update_spatial, update_spatial_fixed_trace, wiener_power, MixtureObservation, SpatialModel};
use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::neural::{descend_latents, encoder_forward, transpose, CvaeWeights, LatentConfig, LatentReport};
use crate::source_models::{update_g, variance_vae, NmfPerSource, NmfShared, SolverStats, VaeSourceParams, VarianceField};
use crate::tensorlab::{CMat, HermitianMatrix, C64};

pub const CHECKPOINT_KIND: &str = "lgmsep-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmfKind {
    /// One dictionary per source.
    Nmf1,
    /// One dictionary shared through indicator weights `b_{j,k}`.
    Nmf2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnmfConfig {
    pub kind: NmfKind,
    pub sources: usize,
    /// Bases per source. The shared dictionary holds `sources × bases`.
    pub bases: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for MnmfConfig {
    fn default() -> Self {
        MnmfConfig {
            kind: NmfKind::Nmf2,
            sources: 3,
            bases: 8,
            iterations: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Spatial,
    Templates,
    Activations,
    Indicators,
    Latents,
    Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub iteration: usize,
    pub block: Block,
    /// Exact negative log-likelihood after the block.
    pub nll: f64,
    /// Majorizer at the block's frozen auxiliary variables, after the update.
    pub majorizer: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub initial_nll: f64,
    pub blocks: Vec<BlockRecord>,
    /// Frequencies skipped by spatial updates, summed over iterations.
    pub skipped_bins: usize,
}

impl SolverTrace {
    /// Initial value followed by the value after every block.
    pub fn nll_sequence(&self) -> Vec<f64> {
        std::iter::once(self.initial_nll).chain(self.blocks.iter().map(|b| b.nll)).collect()
    }

    /// Value at the end of each iteration, starting with the initial value.
    pub fn iteration_nll(&self) -> Vec<f64> {
        let mut out = vec![self.initial_nll];
        for w in self.blocks.windows(2) {
            if w[0].iteration != w[1].iteration {
                out.push(w[0].nll);
            }
        }
        if let Some(last) = self.blocks.last() {
            out.push(last.nll);
        }
        out
    }

    /// Largest `(L_k − L_{k−1}) / |L_{k−1}|` over consecutive blocks.
    pub fn max_relative_increase(&self) -> f64 {
        self.nll_sequence()
            .windows(2)
            .map(|w| (w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_nll(&self) -> f64 {
        self.blocks.last().map_or(self.initial_nll, |b| b.nll)
    }

    fn push(&mut self, iteration: usize, block: Block, nll: f64, majorizer: Option<f64>, started: Instant) {
        self.blocks.push(BlockRecord {
            iteration,
            block,
            nll,
            majorizer,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SourceModel {
    PerSource(NmfPerSource),
    Shared(NmfShared),
}

impl SourceModel {
    pub fn variance_field(&self) -> VarianceField {
        match self {
            SourceModel::PerSource(m) => m.variance_field(),
            SourceModel::Shared(m) => m.variance_field(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MnmfFit {
    pub kind: NmfKind,
    pub spatial: SpatialModel,
    pub model: SourceModel,
    pub trace: SolverTrace,
}

impl MnmfFit {
    pub fn variance_field(&self) -> VarianceField {
        self.model.variance_field()
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            spatial: self.spatial.clone(),
            variance: self.variance_field(),
        }
    }

    pub fn to_container(&self) -> Container {
        let method = match self.kind {
            NmfKind::Nmf1 => "mnmf1",
            NmfKind::Nmf2 => "mnmf2",
        };
        let mut tensors = vec![];
        match &self.model {
            SourceModel::PerSource(m) => {
                for j in 0..m.sources() {
                    let k = m.bases(j);
                    tensors.push(Tensor::new(format!("h.{j}"), vec![k, m.bins], m.h[j].clone()));
                    tensors.push(Tensor::new(format!("u.{j}"), vec![k, m.frames], m.u[j].clone()));
                }
            }
            SourceModel::Shared(m) => {
                tensors.push(Tensor::new("b", vec![m.sources, m.bases], m.b.clone()));
                tensors.push(Tensor::new("h", vec![m.bases, m.bins], m.h.clone()));
                tensors.push(Tensor::new("u", vec![m.bases, m.frames], m.u.clone()));
            }
        }
        checkpoint(method, &self.spatial, &self.variance_field(), &self.trace, tensors)
    }
}

/// Starting point for [`fit_gmvae`].
#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub spatial: SpatialModel,
    pub variance: VarianceField,
}

impl WarmStart {
    /// Reads the spatial model and variance field of any solver checkpoint.
    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let s = c.tensor("spatial")?;
        let v = c.tensor("variance")?;
        if s.shape.len() != 5 || s.shape[4] != 2 || s.shape[2] != s.shape[3] || v.shape.len() != 3 {
            return Err(Error::InvalidInput("checkpoint tensors have unexpected shapes".into()));
        }
        let (nj, nb, dim) = (s.shape[0], s.shape[1], s.shape[2]);
        if v.shape[0] != nj || v.shape[1] != nb || dim == 0 || dim > crate::tensorlab::MAX_DIM {
            return Err(Error::InvalidInput("checkpoint spatial and variance shapes disagree".into()));
        }
        let mut mats = Vec::with_capacity(nj * nb);
        for chunk in s.data.chunks_exact(dim * dim * 2) {
            let m = CMat::from_fn(dim, |a, b| {
                let i = (a * dim + b) * 2;
                C64::new(chunk[i], chunk[i + 1])
            });
            mats.push(HermitianMatrix::new(m)?);
        }
        let spatial = SpatialModel::from_matrices(nj, nb, mats)?;
        let frames = v.shape[2];
        let per_source = v.data.chunks_exact(nb * frames).map(|c| c.to_vec()).collect();
        let variance = VarianceField::from_sources(nb, frames, per_source)?;
        if !spatial.is_valid() || !variance.all_positive() {
            return Err(Error::InvalidInput("checkpoint holds an invalid model".into()));
        }
        Ok(WarmStart { spatial, variance })
    }
}

fn checkpoint(method: &str, r: &SpatialModel, v: &VarianceField, trace: &SolverTrace, mut extra: Vec<Tensor>) -> Container {
    let dim = r.channels;
    let mut data = Vec::with_capacity(r.sources * r.bins * dim * dim * 2);
    for m in r.matrices() {
        for a in 0..dim {
            for b in 0..dim {
                let z = m.as_cmat()[(a, b)];
                data.push(z.re);
                data.push(z.im);
            }
        }
    }
    let mut tensors = vec![
        Tensor::new("spatial", vec![r.sources, r.bins, dim, dim, 2], data),
        Tensor::new("variance", vec![v.sources, v.bins, v.frames], v.values().to_vec()),
    ];
    tensors.append(&mut extra);
    let header = serde_json::json!({
        "method": method,
        "sources": r.sources,
        "bins": r.bins,
        "channels": dim,
        "frames": v.frames,
        "trace": trace,
    });
    Container::new(CHECKPOINT_KIND, header, tensors)
}

fn abort(iteration: usize, trace: &SolverTrace, e: Error) -> Error {
    match e {
        Error::DimensionMismatch(_) | Error::InvalidInput(_) | Error::SolverAborted { .. } => e,
        other => Error::SolverAborted {
            iteration,
            reason: other.to_string(),
            nll_trace: trace.nll_sequence(),
        },
    }
}

fn check_model(r: &SpatialModel, v: &VarianceField) -> Result<()> {
    if !r.is_valid() {
        return Err(Error::Divergence {
            f: 0,
            n: 0,
            reason: "spatial covariance left the PSD cone".into(),
        });
    }
    if !v.all_positive() {
        return Err(Error::Divergence {
            f: 0,
            n: 0,
            reason: "variance field is not strictly positive".into(),
        });
    }
    Ok(())
}

/// Majorizer after a source-model update, relative to its value `before`
/// at the frozen auxiliary variables: only the `Σ [A/v + v B]` terms move.
fn majorizer_after(before: f64, stats: &SolverStats, old: &VarianceField, new: &VarianceField) -> f64 {
    let mut delta = 0.0;
    for (((&vo, &vn), &a), &b) in old
        .values()
        .iter()
        .zip(new.values())
        .zip(stats.num.values())
        .zip(stats.den.values())
    {
        let aa = vo * vo * a;
        delta += aa / vn + vn * b - (aa / vo + vo * b);
    }
    before + delta
}

fn mixture_power(obs: &MixtureObservation) -> f64 {
    let mut total = 0.0;
    for f in 0..obs.bins {
        for n in 0..obs.frames {
            total += obs.x(f, n).norm_sqr();
        }
    }
    total / (obs.bins * obs.frames * obs.channels) as f64
}

/// Fits MNMF with per-source (`nmf1`) or shared (`nmf2`) dictionaries.
///
/// Each iteration runs the spatial update followed by the template,
/// activation and (for `nmf2`) indicator updates, each against freshly
/// refreshed auxiliary variables, then fixes the scale ambiguities without
/// changing the likelihood.
pub fn fit_mnmf(obs: &MixtureObservation, config: &MnmfConfig) -> Result<MnmfFit> {
    fit_mnmf_with(obs, config, |_, _| Ok(()))
}

/// [`fit_mnmf`] with a callback on the state after every iteration; an
/// error from the callback stops the fit.
pub fn fit_mnmf_with(
    obs: &MixtureObservation,
    config: &MnmfConfig,
    mut on_iteration: impl FnMut(usize, &MnmfFit) -> Result<()>,
) -> Result<MnmfFit> {
    if config.sources == 0 || config.bases == 0 {
        return Err(Error::InvalidInput("sources and bases must be positive".into()));
    }
    let (nb, nf, nj) = (obs.bins, obs.frames, config.sources);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match config.kind {
        NmfKind::Nmf1 => SourceModel::PerSource(NmfPerSource::random(&vec![config.bases; nj], nb, nf, &mut rng)),
        NmfKind::Nmf2 => {
            let mut m = NmfShared::random(nj, nj * config.bases, nb, nf, &mut rng);
            m.random_indicators(&mut rng);
            SourceModel::Shared(m)
        }
    };
    // start near the mixture's level so the first updates are not spent on scale
    let v0 = model.variance_field();
    let level = mixture_power(obs) / (nj as f64 * v0.values().iter().sum::<f64>() / v0.values().len() as f64);
    if level.is_finite() && level > 0.0 {
        match &mut model {
            SourceModel::PerSource(m) => (0..nj).for_each(|j| m.scale_source(j, level)),
            SourceModel::Shared(m) => m.u.iter_mut().for_each(|u| *u *= level),
        }
    }
    let spatial = SpatialModel::identity(nj, nb, obs.channels);
    let mut fit = MnmfFit {
        kind: config.kind,
        spatial,
        model,
        trace: SolverTrace::default(),
    };
    fit.trace.initial_nll = super::neg_log_likelihood(obs, &fit.spatial, &fit.model.variance_field())?;
    for it in 0..config.iterations {
        mnmf_iteration(obs, &mut fit, it).map_err(|e| abort(it, &fit.trace, e))?;
        on_iteration(it, &fit)?;
    }
    Ok(fit)
}

fn mnmf_iteration(obs: &MixtureObservation, fit: &mut MnmfFit, it: usize) -> Result<()> {
    let t = Instant::now();
    let v = fit.model.variance_field();
    let up = update_spatial(obs, &fit.spatial, &v)?;
    fit.trace.skipped_bins += up.skipped.len();
    fit.spatial = up.model;
    let (mut stats, mut nll) = compute_stats(obs, &fit.spatial, &v)?;
    fit.trace.push(it, Block::Spatial, nll, None, t);

    let blocks: &[Block] = match fit.model {
        SourceModel::PerSource(_) => &[Block::Templates, Block::Activations],
        SourceModel::Shared(_) => &[Block::Templates, Block::Activations, Block::Indicators],
    };
    for &block in blocks {
        let t = Instant::now();
        let old = fit.model.variance_field();
        match (&mut fit.model, block) {
            (SourceModel::PerSource(m), Block::Templates) => m.update_h(&stats)?,
            (SourceModel::PerSource(m), Block::Activations) => m.update_u(&stats)?,
            (SourceModel::Shared(m), Block::Templates) => m.update_h(&stats)?,
            (SourceModel::Shared(m), Block::Activations) => m.update_u(&stats)?,
            (SourceModel::Shared(m), Block::Indicators) => m.update_b(&stats)?,
            _ => unreachable!("block schedule"),
        }
        let new = fit.model.variance_field();
        check_model(&fit.spatial, &new)?;
        let maj = majorizer_after(nll, &stats, &old, &new);
        (stats, nll) = compute_stats(obs, &fit.spatial, &new)?;
        fit.trace.push(it, block, nll, Some(maj), t);
    }

    normalize_mnmf(fit);
    check_model(&fit.spatial, &fit.model.variance_field())
}

/// Exact rescalings: `v_j R_j` is unchanged by every step.
fn normalize_mnmf(fit: &mut MnmfFit) {
    let r = &mut fit.spatial;
    match &mut fit.model {
        SourceModel::PerSource(m) => {
            for j in 0..r.sources {
                let traces: Vec<f64> = (0..r.bins).map(|f| r.get(j, f).trace()).collect();
                for (f, &tr) in traces.iter().enumerate() {
                    let scaled = r.get(j, f).scale(1.0 / tr);
                    r.set(j, f, scaled);
                }
                m.scale_source_bins(j, &traces);
            }
            m.normalize_templates();
        }
        SourceModel::Shared(m) => {
            let sums = m.normalize_indicators();
            for (j, s) in sums.iter().enumerate() {
                for f in 0..r.bins {
                    let scaled = r.get(j, f).scale(*s);
                    r.set(j, f, scaled);
                }
            }
            m.normalize_templates();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmvaeConfig {
    pub iterations: usize,
    /// MNMF2 iterations run when no warm start is supplied.
    pub warm_start_iterations: usize,
    pub sources: usize,
    /// Bases per source of the warm-start MNMF2.
    pub bases: usize,
    pub latent: LatentConfig,
    /// Keep each `tr R_j(f)` fixed in the spatial update, leaving the
    /// spectral envelope to the decoder.
    pub fix_spatial_trace: bool,
    pub seed: u64,
}

impl Default for GmvaeConfig {
    fn default() -> Self {
        GmvaeConfig {
            iterations: 100,
            warm_start_iterations: 200,
            sources: 3,
            bases: 8,
            latent: LatentConfig::default(),
            fix_spatial_trace: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmvaeFit {
    pub spatial: SpatialModel,
    pub sources: Vec<VaeSourceParams>,
    pub trace: SolverTrace,
    /// Per iteration and source, the latent descent summary.
    pub latent_reports: Vec<Vec<LatentReport>>,
}

impl GmvaeFit {
    pub fn variance_field(&self, weights: &CvaeWeights) -> Result<VarianceField> {
        vae_field(&self.sources, weights, self.spatial.bins)
    }

    /// `softmax(d_j)` per source.
    pub fn class_probs(&self) -> Vec<Vec<f64>> {
        self.sources.iter().map(|p| p.class_probs()).collect()
    }

    pub fn to_container(&self, weights: &CvaeWeights) -> Result<Container> {
        let d = weights.latent_dim;
        let mut tensors = Vec::new();
        for (j, p) in self.sources.iter().enumerate() {
            tensors.push(Tensor::new(format!("z.{j}"), vec![p.z.len() / d, d], p.z.clone()));
            tensors.push(Tensor::new(format!("d.{j}"), vec![p.d.len()], p.d.clone()));
        }
        let g = self.sources.iter().map(|p| p.g).collect::<Vec<_>>();
        tensors.push(Tensor::new("g", vec![g.len()], g));
        Ok(checkpoint(
            "gmvae",
            &self.spatial,
            &self.variance_field(weights)?,
            &self.trace,
            tensors,
        ))
    }
}

fn vae_field(sources: &[VaeSourceParams], weights: &CvaeWeights, bins: usize) -> Result<VarianceField> {
    let frames = sources.first().map_or(0, |p| p.frames(weights.latent_dim));
    let per_source = sources
        .par_iter()
        .map(|p| variance_vae(p, weights))
        .collect::<Result<Vec<_>>>()?;
    VarianceField::from_sources(bins, frames, per_source)
}

/// Fits the VAE source model, starting from `warm` or from a fresh MNMF2
/// run of `config.warm_start_iterations` iterations.
///
/// Each iteration updates the spatial covariances, then runs backtracked
/// gradient steps on every source's latents and class logits, then updates
/// the global scales, and finally moves the mean spatial trace into `g_j`.
pub fn fit_gmvae(
    obs: &MixtureObservation,
    weights: &CvaeWeights,
    config: &GmvaeConfig,
    warm: Option<WarmStart>,
) -> Result<GmvaeFit> {
    fit_gmvae_with(obs, weights, config, warm, |_, _| Ok(()))
}

/// [`fit_gmvae`] with a callback on the state after every iteration.
pub fn fit_gmvae_with(
    obs: &MixtureObservation,
    weights: &CvaeWeights,
    config: &GmvaeConfig,
    warm: Option<WarmStart>,
    mut on_iteration: impl FnMut(usize, &GmvaeFit) -> Result<()>,
) -> Result<GmvaeFit> {
    if weights.spec_dim != obs.bins {
        return Err(Error::DimensionMismatch(format!(
            "decoder models {} bins, mixture has {}",
            weights.spec_dim, obs.bins
        )));
    }
    let warm = match warm {
        Some(w) => w,
        None => fit_mnmf(
            obs,
            &MnmfConfig {
                kind: NmfKind::Nmf2,
                sources: config.sources,
                bases: config.bases,
                iterations: config.warm_start_iterations,
                seed: config.seed,
            },
        )?
        .warm_start(),
    };
    if warm.variance.bins != obs.bins || warm.variance.frames != obs.frames {
        return Err(Error::DimensionMismatch("warm start does not match the mixture".into()));
    }
    let nj = warm.spatial.sources;
    let (nb, nf) = (obs.bins, obs.frames);

    // latents from the encoder applied to the warm-start Wiener power
    let power = wiener_power(obs, &warm.spatial, &warm.variance)?;
    let uniform = vec![1.0 / weights.num_classes as f64; weights.num_classes];
    let mut spatial = warm.spatial.clone();
    let mut sources = Vec::with_capacity(nj);
    for j in 0..nj {
        let p = power.source(j);
        let mean = (p.iter().sum::<f64>() / p.len() as f64).max(f64::MIN_POSITIVE);
        let normalized: Vec<f64> = p.iter().map(|x| x / mean).collect();
        let (mu, _) = encoder_forward(weights, &transpose(&normalized, nb, nf), &uniform)?;
        // unit mean eigenvalue, per frequency when the trace stays fixed
        let mean_eig = spatial.mean_trace(j) / obs.channels as f64;
        let mut target = 0.0;
        for f in 0..nb {
            let t = if config.fix_spatial_trace {
                spatial.get(j, f).trace() / obs.channels as f64
            } else {
                mean_eig
            };
            let scaled = spatial.get(j, f).scale(1.0 / t);
            spatial.set(j, f, scaled);
            target += warm.variance.source(j)[f * nf..(f + 1) * nf].iter().sum::<f64>() * t;
        }
        let mut params = VaeSourceParams {
            z: mu,
            d: vec![0.0; weights.num_classes],
            g: 1.0,
        };
        let sigma2 = variance_vae(&params, weights)?;
        params.g = target / sigma2.iter().sum::<f64>();
        sources.push(params);
    }
    let mut v = vae_field(&sources, weights, nb)?;
    let (stats, _) = compute_stats(obs, &spatial, &v)?;
    update_scales(&mut sources, &v, &stats)?;
    v = vae_field(&sources, weights, nb)?;

    let mut fit = GmvaeFit {
        spatial,
        sources,
        trace: SolverTrace::default(),
        latent_reports: Vec::new(),
    };
    fit.trace.initial_nll = super::neg_log_likelihood(obs, &fit.spatial, &v)?;
    for it in 0..config.iterations {
        v = gmvae_iteration(obs, weights, config, &mut fit, v, it).map_err(|e| abort(it, &fit.trace, e))?;
        on_iteration(it, &fit)?;
    }
    Ok(fit)
}

fn update_scales(sources: &mut [VaeSourceParams], v: &VarianceField, stats: &SolverStats) -> Result<()> {
    for (j, p) in sources.iter_mut().enumerate() {
        let sigma2: Vec<f64> = v.source(j).iter().map(|x| x / p.g).collect();
        p.g = update_g(p.g, &sigma2, stats.num.source(j), stats.den.source(j))?;
    }
    Ok(())
}

fn gmvae_iteration(
    obs: &MixtureObservation,
    weights: &CvaeWeights,
    config: &GmvaeConfig,
    fit: &mut GmvaeFit,
    v: VarianceField,
    it: usize,
) -> Result<VarianceField> {
    let t = Instant::now();
    let up = if config.fix_spatial_trace {
        update_spatial_fixed_trace(obs, &fit.spatial, &v)?
    } else {
        update_spatial(obs, &fit.spatial, &v)?
    };
    fit.trace.skipped_bins += up.skipped.len();
    fit.spatial = up.model;
    let (stats, nll) = compute_stats(obs, &fit.spatial, &v)?;
    fit.trace.push(it, Block::Spatial, nll, None, t);

    let t = Instant::now();
    let reports = fit
        .sources
        .par_iter_mut()
        .enumerate()
        .map(|(j, p)| {
            let a: Vec<f64> = v
                .source(j)
                .iter()
                .zip(stats.num.source(j))
                .map(|(v, num)| v * v * num)
                .collect();
            descend_latents(weights, p, &a, stats.den.source(j), &config.latent)
        })
        .collect::<Result<Vec<_>>>()?;
    let maj = nll + reports.iter().map(|r| r.last - r.initial).sum::<f64>();
    let v = vae_field(&fit.sources, weights, obs.bins)?;
    check_model(&fit.spatial, &v)?;
    let (stats, nll) = compute_stats(obs, &fit.spatial, &v)?;
    fit.trace.push(it, Block::Latents, nll, Some(maj), t);
    fit.latent_reports.push(reports);

    let t = Instant::now();
    update_scales(&mut fit.sources, &v, &stats)?;
    let new = vae_field(&fit.sources, weights, obs.bins)?;
    check_model(&fit.spatial, &new)?;
    let maj = majorizer_after(nll, &stats, &v, &new);

    // move the mean spatial trace into g_j; v_j R_j is unchanged
    for j in 0..fit.spatial.sources {
        let s = fit.spatial.mean_trace(j) / obs.channels as f64;
        for f in 0..fit.spatial.bins {
            let scaled = fit.spatial.get(j, f).scale(1.0 / s);
            fit.spatial.set(j, f, scaled);
        }
        fit.sources[j].g *= s;
    }
    let new = vae_field(&fit.sources, weights, obs.bins)?;
    let nll = super::neg_log_likelihood(obs, &fit.spatial, &new)?;
    fit.trace.push(it, Block::Scale, nll, Some(maj), t);
    Ok(new)
}
