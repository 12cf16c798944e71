//! Source variance models `v_j(f,n)` and their multiplicative MM updates.
//!
//! Three parameterizations are supported: one NMF per source, a shared NMF
//! dictionary distributed over sources by soft indicators, and the scaled
//! output of a CVAE decoder. The updates consume [`SolverStats`], the two
//! per-bin trace statistics every MM step of the spatial solvers needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{decoder_forward, softmax, transpose, CvaeWeights};

/// Lower clamp applied to every NMF factor and NMF variance.
pub const FLOOR: f64 = 1e-12;

/// Per-source nonnegative field laid out `source × bin × frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceField {
    pub sources: usize,
    pub bins: usize,
    pub frames: usize,
    data: Vec<f64>,
}

impl VarianceField {
    pub fn filled(sources: usize, bins: usize, frames: usize, value: f64) -> Self {
        VarianceField {
            sources,
            bins,
            frames,
            data: vec![value; sources * bins * frames],
        }
    }

    pub fn from_sources(bins: usize, frames: usize, per_source: Vec<Vec<f64>>) -> Result<Self> {
        if per_source.iter().any(|s| s.len() != bins * frames) {
            return Err(Error::DimensionMismatch(format!(
                "every source field must have {bins}x{frames} entries"
            )));
        }
        let sources = per_source.len();
        Ok(VarianceField {
            sources,
            bins,
            frames,
            data: per_source.concat(),
        })
    }

    #[inline]
    pub fn get(&self, j: usize, f: usize, n: usize) -> f64 {
        self.data[(j * self.bins + f) * self.frames + n]
    }

    #[inline]
    pub fn set(&mut self, j: usize, f: usize, n: usize, v: f64) {
        self.data[(j * self.bins + f) * self.frames + n] = v;
    }

    /// The `bins × frames` block of source `j`.
    pub fn source(&self, j: usize) -> &[f64] {
        let len = self.bins * self.frames;
        &self.data[j * len..(j + 1) * len]
    }

    pub fn source_mut(&mut self, j: usize) -> &mut [f64] {
        let len = self.bins * self.frames;
        &mut self.data[j * len..(j + 1) * len]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_positive(&self) -> bool {
        self.data.iter().all(|&v| v > 0.0 && v.is_finite())
    }
}

/// Trace statistics at the current model, per `(j, f, n)`:
/// `num = tr(X̂⁻¹ X X̂⁻¹ R_j)` and `den = tr(X̂⁻¹ R_j)`.
#[derive(Clone, Debug)]
pub struct SolverStats {
    pub num: VarianceField,
    pub den: VarianceField,
}

impl SolverStats {
    fn check_finite(&self) -> Result<()> {
        for j in 0..self.num.sources {
            for f in 0..self.num.bins {
                for n in 0..self.num.frames {
                    let (a, b) = (self.num.get(j, f, n), self.den.get(j, f, n));
                    if !a.is_finite() || !b.is_finite() {
                        return Err(Error::Divergence {
                            f,
                            n,
                            reason: format!("non-finite statistic for source {j}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn mm_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        1.0
    }
}

/// One NMF per source: `v_j(f,n) = Σ_k h_{j,k}(f) u_{j,k}(n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmfPerSource {
    pub bins: usize,
    pub frames: usize,
    /// `h[j]` is `K_j × bins`.
    pub h: Vec<Vec<f64>>,
    /// `u[j]` is `K_j × frames`.
    pub u: Vec<Vec<f64>>,
}

impl NmfPerSource {
    /// Factors drawn uniformly from `[0.1, 1)`.
    pub fn random(bases: &[usize], bins: usize, frames: usize, rng: &mut impl Rng) -> Self {
        let h = bases
            .iter()
            .map(|&k| (0..k * bins).map(|_| rng.gen_range(0.1..1.0)).collect())
            .collect();
        let u = bases
            .iter()
            .map(|&k| (0..k * frames).map(|_| rng.gen_range(0.1..1.0)).collect())
            .collect();
        NmfPerSource { bins, frames, h, u }
    }

    pub fn sources(&self) -> usize {
        self.h.len()
    }

    pub fn bases(&self, j: usize) -> usize {
        self.h[j].len() / self.bins
    }

    pub fn variance(&self, j: usize, f: usize, n: usize) -> f64 {
        let (nb, nf) = (self.bins, self.frames);
        let v: f64 = (0..self.bases(j))
            .map(|k| self.h[j][k * nb + f] * self.u[j][k * nf + n])
            .sum();
        v.max(FLOOR)
    }

    pub fn variance_field(&self) -> VarianceField {
        let mut out = VarianceField::filled(self.sources(), self.bins, self.frames, 0.0);
        for j in 0..self.sources() {
            let field = out.source_mut(j);
            for k in 0..self.bases(j) {
                let h = &self.h[j][k * self.bins..(k + 1) * self.bins];
                let u = &self.u[j][k * self.frames..(k + 1) * self.frames];
                for (f, &hf) in h.iter().enumerate() {
                    for (v, &un) in field[f * self.frames..(f + 1) * self.frames].iter_mut().zip(u) {
                        *v += hf * un;
                    }
                }
            }
            for v in field.iter_mut() {
                *v = v.max(FLOOR);
            }
        }
        out
    }

    /// Multiplicative update of every `h_{j,k}(f)`.
    pub fn update_h(&mut self, stats: &SolverStats) -> Result<()> {
        stats.check_finite()?;
        let (nb, nf) = (self.bins, self.frames);
        for j in 0..self.sources() {
            let (num, den) = (stats.num.source(j), stats.den.source(j));
            for k in 0..self.bases(j) {
                let u = &self.u[j][k * nf..(k + 1) * nf];
                for f in 0..nb {
                    let (a, b) = (&num[f * nf..(f + 1) * nf], &den[f * nf..(f + 1) * nf]);
                    let top: f64 = u.iter().zip(a).map(|(u, a)| u * a).sum();
                    let bot: f64 = u.iter().zip(b).map(|(u, b)| u * b).sum();
                    let h = &mut self.h[j][k * nb + f];
                    *h = (*h * mm_ratio(top, bot)).max(FLOOR);
                }
            }
        }
        Ok(())
    }

    /// Multiplicative update of every `u_{j,k}(n)`.
    pub fn update_u(&mut self, stats: &SolverStats) -> Result<()> {
        stats.check_finite()?;
        let (nb, nf) = (self.bins, self.frames);
        for j in 0..self.sources() {
            let (num, den) = (stats.num.source(j), stats.den.source(j));
            for k in 0..self.bases(j) {
                let mut top = vec![0.0; nf];
                let mut bot = vec![0.0; nf];
                for f in 0..nb {
                    let h = self.h[j][k * nb + f];
                    for n in 0..nf {
                        top[n] += h * num[f * nf + n];
                        bot[n] += h * den[f * nf + n];
                    }
                }
                for n in 0..nf {
                    let u = &mut self.u[j][k * nf + n];
                    *u = (*u * mm_ratio(top[n], bot[n])).max(FLOOR);
                }
            }
        }
        Ok(())
    }

    /// Multiplies every `h_{j,k}(f)` by `scale[f]`, i.e. `v_j(f,·)` by `scale[f]`.
    pub fn scale_source_bins(&mut self, j: usize, scale: &[f64]) {
        let nb = self.bins;
        for k in 0..self.bases(j) {
            for (h, s) in self.h[j][k * nb..(k + 1) * nb].iter_mut().zip(scale) {
                *h = (*h * s).max(FLOOR);
            }
        }
    }

    /// Multiplies `v_j` by `s` through the activations.
    pub fn scale_source(&mut self, j: usize, s: f64) {
        for u in self.u[j].iter_mut() {
            *u = (*u * s).max(FLOOR);
        }
    }

    /// Rescales each template to unit sum over frequency, moving the scale into its activation.
    pub fn normalize_templates(&mut self) {
        let (nb, nf) = (self.bins, self.frames);
        for j in 0..self.sources() {
            for k in 0..self.bases(j) {
                let sum: f64 = self.h[j][k * nb..(k + 1) * nb].iter().sum();
                if !(sum > 0.0) {
                    continue;
                }
                for h in self.h[j][k * nb..(k + 1) * nb].iter_mut() {
                    *h /= sum;
                }
                for u in self.u[j][k * nf..(k + 1) * nf].iter_mut() {
                    *u *= sum;
                }
            }
        }
    }
}

/// Shared dictionary: `v_j(f,n) = Σ_k b_{j,k} h_k(f) u_k(n)` with `Σ_k b_{j,k} = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmfShared {
    pub sources: usize,
    pub bases: usize,
    pub bins: usize,
    pub frames: usize,
    /// `sources × bases`.
    pub b: Vec<f64>,
    /// `bases × bins`.
    pub h: Vec<f64>,
    /// `bases × frames`.
    pub u: Vec<f64>,
}

impl NmfShared {
    /// Uniform indicators `1/K`, factors uniform in `[0.1, 1)`.
    pub fn random(sources: usize, bases: usize, bins: usize, frames: usize, rng: &mut impl Rng) -> Self {
        NmfShared {
            sources,
            bases,
            bins,
            frames,
            b: vec![1.0 / bases as f64; sources * bases],
            h: (0..bases * bins).map(|_| rng.gen_range(0.1..1.0)).collect(),
            u: (0..bases * frames).map(|_| rng.gen_range(0.1..1.0)).collect(),
        }
    }

    /// Random indicators, for breaking the symmetry between sources.
    pub fn random_indicators(&mut self, rng: &mut impl Rng) {
        for b in self.b.iter_mut() {
            *b = rng.gen_range(0.1..1.0);
        }
        self.normalize_indicators();
    }

    pub fn variance(&self, j: usize, f: usize, n: usize) -> f64 {
        let v: f64 = (0..self.bases)
            .map(|k| self.b[j * self.bases + k] * self.h[k * self.bins + f] * self.u[k * self.frames + n])
            .sum();
        v.max(FLOOR)
    }

    pub fn variance_field(&self) -> VarianceField {
        let (nb, nf, nk) = (self.bins, self.frames, self.bases);
        // shared products hu_k(f,n) once, then mix with indicators
        let mut out = VarianceField::filled(self.sources, nb, nf, 0.0);
        for k in 0..nk {
            for f in 0..nb {
                let h = self.h[k * nb + f];
                let u = &self.u[k * nf..(k + 1) * nf];
                for j in 0..self.sources {
                    let bh = self.b[j * nk + k] * h;
                    if bh == 0.0 {
                        continue;
                    }
                    let row = &mut out.source_mut(j)[f * nf..(f + 1) * nf];
                    for (v, &un) in row.iter_mut().zip(u) {
                        *v += bh * un;
                    }
                }
            }
        }
        for j in 0..self.sources {
            for v in out.source_mut(j).iter_mut() {
                *v = v.max(FLOOR);
            }
        }
        out
    }

    pub fn update_b(&mut self, stats: &SolverStats) -> Result<()> {
        stats.check_finite()?;
        let (nb, nf, nk) = (self.bins, self.frames, self.bases);
        let mut new_b = self.b.clone();
        for j in 0..self.sources {
            let (num, den) = (stats.num.source(j), stats.den.source(j));
            for k in 0..nk {
                let u = &self.u[k * nf..(k + 1) * nf];
                let (mut top, mut bot) = (0.0, 0.0);
                for f in 0..nb {
                    let h = self.h[k * nb + f];
                    let (a, b) = (&num[f * nf..(f + 1) * nf], &den[f * nf..(f + 1) * nf]);
                    top += h * u.iter().zip(a).map(|(u, a)| u * a).sum::<f64>();
                    bot += h * u.iter().zip(b).map(|(u, b)| u * b).sum::<f64>();
                }
                let b = &mut new_b[j * nk + k];
                *b = (*b * mm_ratio(top, bot)).max(FLOOR);
            }
        }
        self.b = new_b;
        Ok(())
    }

    pub fn update_h(&mut self, stats: &SolverStats) -> Result<()> {
        stats.check_finite()?;
        let (nb, nf, nk) = (self.bins, self.frames, self.bases);
        for k in 0..nk {
            let u = &self.u[k * nf..(k + 1) * nf];
            for f in 0..nb {
                let (mut top, mut bot) = (0.0, 0.0);
                for j in 0..self.sources {
                    let bjk = self.b[j * nk + k];
                    let a = &stats.num.source(j)[f * nf..(f + 1) * nf];
                    let b = &stats.den.source(j)[f * nf..(f + 1) * nf];
                    top += bjk * u.iter().zip(a).map(|(u, a)| u * a).sum::<f64>();
                    bot += bjk * u.iter().zip(b).map(|(u, b)| u * b).sum::<f64>();
                }
                let h = &mut self.h[k * nb + f];
                *h = (*h * mm_ratio(top, bot)).max(FLOOR);
            }
        }
        Ok(())
    }

    pub fn update_u(&mut self, stats: &SolverStats) -> Result<()> {
        stats.check_finite()?;
        let (nb, nf, nk) = (self.bins, self.frames, self.bases);
        for k in 0..nk {
            let mut top = vec![0.0; nf];
            let mut bot = vec![0.0; nf];
            for j in 0..self.sources {
                let bjk = self.b[j * nk + k];
                let (num, den) = (stats.num.source(j), stats.den.source(j));
                for f in 0..nb {
                    let w = bjk * self.h[k * nb + f];
                    for n in 0..nf {
                        top[n] += w * num[f * nf + n];
                        bot[n] += w * den[f * nf + n];
                    }
                }
            }
            for n in 0..nf {
                let u = &mut self.u[k * nf + n];
                *u = (*u * mm_ratio(top[n], bot[n])).max(FLOOR);
            }
        }
        Ok(())
    }

    /// Normalizes each indicator row to sum 1 and returns the removed row sums.
    ///
    /// `v_j` is divided by the returned factor for source `j`; callers that
    /// must preserve the likelihood multiply the matching spatial covariance
    /// by the same factor.
    pub fn normalize_indicators(&mut self) -> Vec<f64> {
        let nk = self.bases;
        (0..self.sources)
            .map(|j| {
                let row = &mut self.b[j * nk..(j + 1) * nk];
                let sum: f64 = row.iter().sum();
                for b in row.iter_mut() {
                    *b /= sum;
                }
                sum
            })
            .collect()
    }

    /// Rescales each shared template to unit sum over frequency, moving the scale into `u_k`.
    pub fn normalize_templates(&mut self) {
        let (nb, nf) = (self.bins, self.frames);
        for k in 0..self.bases {
            let sum: f64 = self.h[k * nb..(k + 1) * nb].iter().sum();
            if !(sum > 0.0) {
                continue;
            }
            for h in self.h[k * nb..(k + 1) * nb].iter_mut() {
                *h /= sum;
            }
            for u in self.u[k * nf..(k + 1) * nf].iter_mut() {
                *u *= sum;
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.b.chunks(self.bases).map(|r| r.iter().sum()).collect()
    }
}

/// Decoder inputs and global scale of one VAE-modelled source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeSourceParams {
    /// Latent code per frame, `frames × latent_dim`.
    pub z: Vec<f64>,
    /// Class logits; the class vector is `softmax(d)`.
    pub d: Vec<f64>,
    /// Global scale, always positive.
    pub g: f64,
}

impl VaeSourceParams {
    pub fn class_probs(&self) -> Vec<f64> {
        softmax(&self.d)
    }

    pub fn frames(&self, latent_dim: usize) -> usize {
        self.z.len() / latent_dim
    }
}

/// `g_j σ²_θ(f,n; z_j, softmax(d_j))` as a `bins × frames` block.
pub fn variance_vae(p: &VaeSourceParams, decoder: &CvaeWeights) -> Result<Vec<f64>> {
    let sigma2 = decoder_forward(decoder, &p.z, &softmax(&p.d))?;
    let mut v = transpose(&sigma2, p.frames(decoder.latent_dim), decoder.spec_dim);
    for x in v.iter_mut() {
        *x *= p.g;
    }
    Ok(v)
}

/// Multiplicative update of the global scale given the decoder output
/// `sigma2` (`bins × frames`) and the source's trace statistics.
pub fn update_g(g: f64, sigma2: &[f64], num: &[f64], den: &[f64]) -> Result<f64> {
    let top: f64 = sigma2.iter().zip(num).map(|(s, a)| s * a).sum();
    let bot: f64 = sigma2.iter().zip(den).map(|(s, b)| s * b).sum();
    let out = g * mm_ratio(top, bot);
    if !(out > 0.0) || !out.is_finite() {
        return Err(Error::Divergence {
            f: 0,
            n: 0,
            reason: format!("global scale update produced {out}"),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_stats(sources: usize, bins: usize, frames: usize) -> SolverStats {
        SolverStats {
            num: VarianceField::filled(sources, bins, frames, 0.7),
            den: VarianceField::filled(sources, bins, frames, 0.7),
        }
    }

    #[test]
    fn nmf1_variance_examples() {
        let m = NmfPerSource {
            bins: 1,
            frames: 1,
            h: vec![vec![2.0]],
            u: vec![vec![3.0]],
        };
        assert_eq!(m.variance(0, 0, 0), 6.0);
        let zero = NmfPerSource {
            bins: 1,
            frames: 1,
            h: vec![vec![0.0]],
            u: vec![vec![0.0]],
        };
        assert_eq!(zero.variance(0, 0, 0), FLOOR);
        assert_eq!(zero.variance_field().get(0, 0, 0), FLOOR);
    }

    #[test]
    fn nmf1_variance_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = NmfPerSource::random(&[3, 2], 5, 7, &mut rng);
        let field = m.variance_field();
        for j in 0..2 {
            for f in 0..5 {
                for n in 0..7 {
                    let direct: f64 = (0..m.bases(j)).map(|k| m.h[j][k * 5 + f] * m.u[j][k * 7 + n]).sum();
                    assert!((field.get(j, f, n) - direct).abs() < 1e-14);
                    assert!((m.variance(j, f, n) - direct).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn nmf2_variance_examples() {
        let m = NmfShared {
            sources: 1,
            bases: 2,
            bins: 1,
            frames: 1,
            b: vec![1.0, 0.0],
            h: vec![2.0, 5.0],
            u: vec![3.0, 7.0],
        };
        assert_eq!(m.variance(0, 0, 0), 6.0);
        let uniform = NmfShared { b: vec![0.5, 0.5], ..m.clone() };
        assert_eq!(uniform.variance(0, 0, 0), 0.5 * (6.0 + 35.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = NmfShared::random(3, 4, 6, 5, &mut rng);
        let field = m.variance_field();
        for j in 0..3 {
            for f in 0..6 {
                for n in 0..5 {
                    assert!((field.get(j, f, n) - m.variance(j, f, n)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn fixed_point_when_ratio_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = NmfPerSource::random(&[2, 2], 4, 3, &mut rng);
        let before = m.clone();
        let stats = unit_stats(2, 4, 3);
        m.update_h(&stats).unwrap();
        m.update_u(&stats).unwrap();
        assert_eq!(m, before);
        let mut s = NmfShared::random(2, 3, 4, 3, &mut rng);
        let before = s.clone();
        s.update_b(&stats).unwrap();
        s.update_h(&stats).unwrap();
        s.update_u(&stats).unwrap();
        s.normalize_indicators();
        for (a, b) in s.b.iter().zip(&before.b) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s.h, before.h);
    }

    #[test]
    fn scalar_h_update_ratio() {
        // I = J = K = 1: num = x r / x̂², den = r / x̂, so h ← h sqrt(x / x̂)
        let (h, u, r, x) = (2.0, 3.0, 0.5, 5.0);
        let xhat = h * u * r;
        let mut m = NmfPerSource {
            bins: 1,
            frames: 1,
            h: vec![vec![h]],
            u: vec![vec![u]],
        };
        let stats = SolverStats {
            num: VarianceField::filled(1, 1, 1, x * r / (xhat * xhat)),
            den: VarianceField::filled(1, 1, 1, r / xhat),
        };
        m.update_h(&stats).unwrap();
        assert!((m.h[0][0] - h * (x / xhat).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn indicator_normalization() {
        let mut s = NmfShared {
            sources: 1,
            bases: 2,
            bins: 1,
            frames: 1,
            b: vec![0.2, 0.6],
            h: vec![1.0, 1.0],
            u: vec![1.0, 1.0],
        };
        let sums = s.normalize_indicators();
        assert!((sums[0] - 0.8).abs() < 1e-15);
        assert!((s.b[0] - 0.25).abs() < 1e-15 && (s.b[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn template_normalization_preserves_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = NmfShared::random(2, 3, 5, 4, &mut rng);
        let before = m.variance_field();
        m.normalize_templates();
        for (a, b) in m.variance_field().values().iter().zip(before.values()) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
        let mut p = NmfPerSource::random(&[2, 3], 5, 4, &mut rng);
        let before = p.variance_field();
        p.normalize_templates();
        for (a, b) in p.variance_field().values().iter().zip(before.values()) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn nonfinite_statistics_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = NmfPerSource::random(&[1], 2, 2, &mut rng);
        let mut stats = unit_stats(1, 2, 2);
        stats.num.set(0, 1, 0, f64::NAN);
        match m.update_h(&stats) {
            Err(Error::Divergence { f, n, .. }) => assert_eq!((f, n), (1, 0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn g_update_fixed_point_and_scalar() {
        let sigma = vec![1.0, 2.0];
        assert_eq!(update_g(3.0, &sigma, &[0.5, 0.5], &[0.5, 0.5]).unwrap(), 3.0);
        // scalar I = 1: num = x / x̂², den = 1 / x̂ with R = 1, so g ← g sqrt(x / x̂)
        let (g, s, x) = (2.0, 1.5, 12.0);
        let xhat = g * s;
        let out = update_g(g, &[s], &[x / (xhat * xhat)], &[1.0 / xhat]).unwrap();
        assert!((out - g * (x / xhat).sqrt()).abs() < 1e-14);
    }
}
