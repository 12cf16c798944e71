//! Majorization-minimization under the local Gaussian model.
//!
//! The mixture at bin `(f, n)` is zero-mean complex Gaussian with covariance
//! `X̂(f,n) = Σ_j v_j(f,n) R_j(f)`. Every routine here evaluates quantities
//! one frequency at a time, in parallel over `f`, and reduces the per-bin
//! results in frequency order so that results do not depend on scheduling.

mod fit;

pub use fit::{
    fit_gmvae, fit_gmvae_with, fit_mnmf, fit_mnmf_with, Block, BlockRecord, GmvaeConfig, GmvaeFit, MnmfConfig, MnmfFit, NmfKind, SolverTrace,
    SourceModel, WarmStart, CHECKPOINT_KIND,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::signal_io::Spectrogram;
use crate::source_models::{SolverStats, VarianceField};
use crate::tensorlab::{
    default_loading, regularize_psd, solve_riccati, solve_riccati_fixed_trace, trace_prod_unchecked, CMat, CVec, HermitianMatrix, MAX_DIM,
};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Relative Riccati residual above which a frequency is left unchanged.
pub const RICCATI_TOL: f64 = 1e-6;

/// Observed mixture `x(f,n)` with channel vectors stored `f`-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureObservation {
    pub bins: usize,
    pub frames: usize,
    pub channels: usize,
    x: Vec<CVec>,
}

impl MixtureObservation {
    pub fn from_spectrogram(s: &Spectrogram) -> Result<Self> {
        if s.channels == 0 || s.channels > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "{} channels; between 1 and {MAX_DIM} are supported",
                s.channels
            )));
        }
        if s.bins == 0 || s.frames == 0 {
            return Err(Error::InvalidInput("empty spectrogram".into()));
        }
        if s.values().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("mixture contains non-finite values".into()));
        }
        let mut x = Vec::with_capacity(s.bins * s.frames);
        for f in 0..s.bins {
            for n in 0..s.frames {
                x.push(s.vector(f, n));
            }
        }
        Ok(MixtureObservation {
            bins: s.bins,
            frames: s.frames,
            channels: s.channels,
            x,
        })
    }

    #[inline]
    pub fn x(&self, f: usize, n: usize) -> &CVec {
        &self.x[f * self.frames + n]
    }

    /// `X(f,n) = x xᴴ`.
    pub fn outer(&self, f: usize, n: usize) -> CMat {
        self.x(f, n).outer()
    }

    fn row(&self, f: usize) -> &[CVec] {
        &self.x[f * self.frames..(f + 1) * self.frames]
    }
}

/// Spatial covariances `R_j(f)`, indexed `j`-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialModel {
    pub sources: usize,
    pub bins: usize,
    pub channels: usize,
    r: Vec<HermitianMatrix>,
}

impl SpatialModel {
    pub fn identity(sources: usize, bins: usize, channels: usize) -> Self {
        SpatialModel {
            sources,
            bins,
            channels,
            r: vec![HermitianMatrix::identity(channels); sources * bins],
        }
    }

    pub fn from_matrices(sources: usize, bins: usize, r: Vec<HermitianMatrix>) -> Result<Self> {
        if r.len() != sources * bins || r.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariances for {sources} sources and {bins} bins",
                r.len()
            )));
        }
        let channels = r[0].dim();
        if r.iter().any(|m| m.dim() != channels) {
            return Err(Error::DimensionMismatch("covariances of mixed dimension".into()));
        }
        Ok(SpatialModel {
            sources,
            bins,
            channels,
            r,
        })
    }

    #[inline]
    pub fn get(&self, j: usize, f: usize) -> &HermitianMatrix {
        &self.r[j * self.bins + f]
    }

    pub fn set(&mut self, j: usize, f: usize, m: HermitianMatrix) {
        self.r[j * self.bins + f] = m;
    }

    pub fn matrices(&self) -> &[HermitianMatrix] {
        &self.r
    }

    /// True when every covariance is finite and positive semidefinite.
    pub fn is_valid(&self) -> bool {
        self.r.iter().all(|m| m.as_cmat().is_finite() && m.is_psd())
    }

    /// Mean of `tr R_j(f)` over frequency.
    pub fn mean_trace(&self, j: usize) -> f64 {
        (0..self.bins).map(|f| self.get(j, f).trace()).sum::<f64>() / self.bins as f64
    }

    fn column(&self, f: usize) -> Vec<CMat> {
        (0..self.sources).map(|j| *self.get(j, f).as_cmat()).collect()
    }
}

fn check_shapes(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField) -> Result<()> {
    if r.bins != obs.bins || r.channels != obs.channels {
        return Err(Error::DimensionMismatch(format!(
            "spatial model is {} bins x {} channels, mixture is {} x {}",
            r.bins, r.channels, obs.bins, obs.channels
        )));
    }
    if v.sources != r.sources || v.bins != obs.bins || v.frames != obs.frames {
        return Err(Error::DimensionMismatch(format!(
            "variance field is {}x{}x{}, expected {}x{}x{}",
            v.sources, v.bins, v.frames, r.sources, obs.bins, obs.frames
        )));
    }
    Ok(())
}

fn model_cov(rs: &[CMat], v: &VarianceField, f: usize, n: usize, dim: usize) -> CMat {
    let mut m = CMat::zeros(dim);
    for (j, r) in rs.iter().enumerate() {
        m.add_scaled(v.get(j, f, n), r);
    }
    m
}

fn inverse_at(m: &CMat, f: usize, n: usize) -> Result<(CMat, f64)> {
    m.hpd_inverse_logdet().ok_or_else(|| Error::IllConditioned {
        bin: Some(f),
        reason: format!("model covariance is not positive definite at frame {n}"),
    })
}

struct BinStats {
    nll: f64,
    /// `sources × frames`.
    num: Vec<f64>,
    den: Vec<f64>,
}

fn bin_stats(obs: &MixtureObservation, rs: &[CMat], v: &VarianceField, f: usize, with_stats: bool) -> Result<BinStats> {
    let (nf, dim) = (obs.frames, obs.channels);
    let cells = if with_stats { rs.len() * nf } else { 0 };
    let mut out = BinStats {
        nll: 0.0,
        num: vec![0.0; cells],
        den: vec![0.0; cells],
    };
    for (n, x) in obs.row(f).iter().enumerate() {
        let (inv, logdet) = inverse_at(&model_cov(rs, v, f, n, dim), f, n)?;
        let y = inv.mul_vec(x);
        out.nll += x.dot(&y).re + logdet + dim as f64 * LN_PI;
        if with_stats {
            for (j, r) in rs.iter().enumerate() {
                out.num[j * nf + n] = r.quad_form(&y).re;
                out.den[j * nf + n] = trace_prod_unchecked(&inv, r).re;
            }
        }
    }
    if !out.nll.is_finite() {
        return Err(Error::Divergence {
            f,
            n: 0,
            reason: "non-finite likelihood".into(),
        });
    }
    Ok(out)
}

/// Exact negative log-likelihood
/// `Σ_{f,n} [xᴴ X̂⁻¹ x + log det X̂ + I log π]`.
pub fn neg_log_likelihood(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField) -> Result<f64> {
    check_shapes(obs, r, v)?;
    let per_bin: Vec<Result<f64>> = (0..obs.bins)
        .into_par_iter()
        .map(|f| bin_stats(obs, &r.column(f), v, f, false).map(|b| b.nll))
        .collect();
    per_bin.into_iter().sum()
}

/// Trace statistics for the source-model updates, and the exact NLL at the
/// current parameters.
pub fn compute_stats(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField) -> Result<(SolverStats, f64)> {
    check_shapes(obs, r, v)?;
    let per_bin: Vec<Result<BinStats>> = (0..obs.bins)
        .into_par_iter()
        .map(|f| bin_stats(obs, &r.column(f), v, f, true))
        .collect();
    let (nb, nf) = (obs.bins, obs.frames);
    let mut num = VarianceField::filled(r.sources, nb, nf, 0.0);
    let mut den = num.clone();
    let mut nll = 0.0;
    for (f, b) in per_bin.into_iter().enumerate() {
        let b = b?;
        nll += b.nll;
        for j in 0..r.sources {
            num.source_mut(j)[f * nf..(f + 1) * nf].copy_from_slice(&b.num[j * nf..(j + 1) * nf]);
            den.source_mut(j)[f * nf..(f + 1) * nf].copy_from_slice(&b.den[j * nf..(j + 1) * nf]);
        }
    }
    Ok((SolverStats { num, den }, nll))
}

/// Auxiliary variables of the majorizer.
#[derive(Clone, Debug)]
pub struct AuxiliaryVars {
    pub sources: usize,
    pub bins: usize,
    pub frames: usize,
    /// `P_j(f,n)`, indexed `((j·bins + f)·frames + n)`.
    pub p: Vec<CMat>,
    /// `K(f,n)`, indexed `f·frames + n`.
    pub k: Vec<HermitianMatrix>,
}

impl AuxiliaryVars {
    pub fn p(&self, j: usize, f: usize, n: usize) -> &CMat {
        &self.p[(j * self.bins + f) * self.frames + n]
    }

    pub fn k(&self, f: usize, n: usize) -> &HermitianMatrix {
        &self.k[f * self.frames + n]
    }

    /// Largest entry of `|Σ_j P_j − I|` over all bins.
    pub fn partition_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for f in 0..self.bins {
            for n in 0..self.frames {
                let dim = self.k(f, n).dim();
                let mut s = CMat::identity(dim).scale(-1.0);
                for j in 0..self.sources {
                    s.add_scaled(1.0, self.p(j, f, n));
                }
                worst = worst.max(s.max_abs());
            }
        }
        worst
    }
}

/// Auxiliary values at which the majorizer touches the likelihood:
/// `P_j = v_j R_j X̂⁻¹` and `K = X̂`.
pub fn refresh_aux(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField) -> Result<AuxiliaryVars> {
    check_shapes(obs, r, v)?;
    let (nb, nf, nj, dim) = (obs.bins, obs.frames, r.sources, obs.channels);
    let per_bin: Vec<Result<(Vec<CMat>, Vec<HermitianMatrix>)>> = (0..nb)
        .into_par_iter()
        .map(|f| {
            let rs = r.column(f);
            let mut p = vec![CMat::zeros(dim); nj * nf];
            let mut k = Vec::with_capacity(nf);
            for n in 0..nf {
                let cov = model_cov(&rs, v, f, n, dim);
                let (inv, _) = inverse_at(&cov, f, n)?;
                for (j, rj) in rs.iter().enumerate() {
                    p[j * nf + n] = (*rj * inv).scale(v.get(j, f, n));
                }
                k.push(HermitianMatrix::from_hermitian_part(&cov));
            }
            Ok((p, k))
        })
        .collect();
    let mut p = vec![CMat::zeros(dim); nj * nb * nf];
    let mut k = Vec::with_capacity(nb * nf);
    for (f, res) in per_bin.into_iter().enumerate() {
        let (pf, kf) = res?;
        for j in 0..nj {
            p[(j * nb + f) * nf..(j * nb + f + 1) * nf].copy_from_slice(&pf[j * nf..(j + 1) * nf]);
        }
        k.extend(kf);
    }
    Ok(AuxiliaryVars {
        sources: nj,
        bins: nb,
        frames: nf,
        p,
        k,
    })
}

/// Upper bound on [`neg_log_likelihood`] for auxiliary variables with
/// `Σ_j P_j = I` and `K` positive definite:
///
/// `Σ_{f,n} { Σ_j [xᴴ P_jᴴ R_j⁻¹ P_j x / v_j + v_j tr(K⁻¹ R_j)] + log det K − I + I log π }`.
///
/// It equals the likelihood at the values returned by [`refresh_aux`].
pub fn majorizer(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField, aux: &AuxiliaryVars) -> Result<f64> {
    check_shapes(obs, r, v)?;
    if aux.sources != r.sources || aux.bins != obs.bins || aux.frames != obs.frames {
        return Err(Error::DimensionMismatch("auxiliary variables do not match the model".into()));
    }
    let dim = obs.channels;
    let per_bin: Vec<Result<f64>> = (0..obs.bins)
        .into_par_iter()
        .map(|f| {
            let mut rinv = Vec::with_capacity(r.sources);
            for j in 0..r.sources {
                let (inv, _) = r.get(j, f).as_cmat().hpd_inverse_logdet().ok_or_else(|| Error::IllConditioned {
                    bin: Some(f),
                    reason: format!("spatial covariance of source {j} is singular"),
                })?;
                rinv.push(inv);
            }
            let mut total = 0.0;
            for (n, x) in obs.row(f).iter().enumerate() {
                let (kinv, klogdet) = inverse_at(aux.k(f, n).as_cmat(), f, n)?;
                total += klogdet - dim as f64 + dim as f64 * LN_PI;
                for j in 0..r.sources {
                    let vj = v.get(j, f, n);
                    let q = aux.p(j, f, n).mul_vec(x);
                    total += rinv[j].quad_form(&q).re / vj;
                    total += vj * trace_prod_unchecked(&kinv, r.get(j, f).as_cmat()).re;
                }
            }
            Ok(total)
        })
        .collect();
    per_bin.into_iter().sum()
}

/// Result of one spatial update.
#[derive(Clone, Debug)]
pub struct SpatialUpdate {
    pub model: SpatialModel,
    /// Frequencies left unchanged because the Riccati solve failed.
    pub skipped: Vec<usize>,
}

/// Riccati update of every `R_j(f)`: solves `R Ψ_j R = Ω_j` with
/// `Ψ_j = Σ_n v_j X̂⁻¹` and `Ω_j = R_j (Σ_n v_j X̂⁻¹ X X̂⁻¹) R_j`, then
/// symmetrizes and loads the diagonal.
pub fn update_spatial(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField) -> Result<SpatialUpdate> {
    spatial_step(obs, r, v, false)
}

/// [`update_spatial`] restricted to covariances with unchanged `tr R_j(f)`:
/// solves `R (Ψ_j + λI) R = Ω_j` with `λ` chosen to keep the trace.
pub fn update_spatial_fixed_trace(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField) -> Result<SpatialUpdate> {
    spatial_step(obs, r, v, true)
}

fn spatial_step(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField, fixed_trace: bool) -> Result<SpatialUpdate> {
    check_shapes(obs, r, v)?;
    let (nj, dim) = (r.sources, obs.channels);
    let per_bin: Vec<Result<Option<Vec<HermitianMatrix>>>> = (0..obs.bins)
        .into_par_iter()
        .map(|f| {
            let rs = r.column(f);
            let mut psi = vec![CMat::zeros(dim); nj];
            let mut phi = vec![CMat::zeros(dim); nj];
            for (n, x) in obs.row(f).iter().enumerate() {
                let (inv, _) = inverse_at(&model_cov(&rs, v, f, n, dim), f, n)?;
                let yy = inv.mul_vec(x).outer();
                for j in 0..nj {
                    let vj = v.get(j, f, n);
                    psi[j].add_scaled(vj, &inv);
                    phi[j].add_scaled(vj, &yy);
                }
            }
            let mut out = Vec::with_capacity(nj);
            for j in 0..nj {
                let psi_j = HermitianMatrix::from_hermitian_part(&psi[j]);
                let omega = HermitianMatrix::from_hermitian_part(&(rs[j] * phi[j] * rs[j]));
                let solved = if fixed_trace {
                    solve_riccati_fixed_trace(&psi_j, &omega, rs[j].trace().re)
                } else {
                    solve_riccati(&psi_j, &omega)
                };
                let solved = match solved {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("spatial update skipped at bin {f}: {e}");
                        return Ok(None);
                    }
                };
                let rr = *solved.as_cmat();
                if !fixed_trace {
                    let residual = (rr * *psi_j.as_cmat() * rr - *omega.as_cmat()).frobenius_norm();
                    let scale = omega.as_cmat().frobenius_norm().max(1.0);
                    if !(residual <= RICCATI_TOL * scale) {
                        log::warn!("spatial update skipped at bin {f}: Riccati residual {residual:.3e}");
                        return Ok(None);
                    }
                }
                out.push(regularize_psd(&rr, default_loading(&solved)));
            }
            Ok(Some(out))
        })
        .collect();
    let mut model = r.clone();
    let mut skipped = Vec::new();
    for (f, res) in per_bin.into_iter().enumerate() {
        match res? {
            Some(ms) => {
                for (j, m) in ms.into_iter().enumerate() {
                    model.set(j, f, m);
                }
            }
            None => skipped.push(f),
        }
    }
    Ok(SpatialUpdate { model, skipped })
}

/// Multichannel Wiener images `ŝ_j = v_j R_j X̂⁻¹ x`.
pub fn reconstruct_sources(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField) -> Result<Vec<Spectrogram>> {
    check_shapes(obs, r, v)?;
    let (nb, nf, nj, dim) = (obs.bins, obs.frames, r.sources, obs.channels);
    let per_bin: Vec<Result<Vec<CVec>>> = (0..nb)
        .into_par_iter()
        .map(|f| {
            let rs = r.column(f);
            let mut out = vec![CVec::zeros(dim); nj * nf];
            for (n, x) in obs.row(f).iter().enumerate() {
                let cov = model_cov(&rs, v, f, n, dim);
                let (inv, _) = inverse_at(&cov, f, n)?;
                let mut y = inv.mul_vec(x);
                // one refinement step so the images still sum to x when cov is ill-conditioned
                let mut res = cov.mul_vec(&y);
                for (r, xi) in res.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *r = xi - *r;
                }
                let dy = inv.mul_vec(&res);
                for (yi, d) in y.as_mut_slice().iter_mut().zip(dy.as_slice()) {
                    *yi += d;
                }
                for (j, rj) in rs.iter().enumerate() {
                    out[j * nf + n] = rj.mul_vec(&y).scale(v.get(j, f, n).into());
                }
            }
            Ok(out)
        })
        .collect();
    let mut images = vec![Spectrogram::zeros(nb, nf, dim); nj];
    for (f, res) in per_bin.into_iter().enumerate() {
        let col = res?;
        for (j, img) in images.iter_mut().enumerate() {
            for n in 0..nf {
                img.set_vector(f, n, &col[j * nf + n]);
            }
        }
    }
    Ok(images)
}

/// Mean per-channel power of each Wiener image, as a variance field.
pub fn wiener_power(obs: &MixtureObservation, r: &SpatialModel, v: &VarianceField) -> Result<VarianceField> {
    let images = reconstruct_sources(obs, r, v)?;
    let (nb, nf) = (obs.bins, obs.frames);
    let per_source = images
        .iter()
        .map(|img| {
            let mut p = vec![0.0; nb * nf];
            for f in 0..nb {
                for n in 0..nf {
                    p[f * nf + n] = img.vector(f, n).norm_sqr() / obs.channels as f64;
                }
            }
            p
        })
        .collect();
    VarianceField::from_sources(nb, nf, per_source)
}
