//! Synthetic mixtures with ground truth.
//!
//! Sources are drawn directly in the STFT domain from the local Gaussian
//! model, `s(f,n) ~ CN(0, v(f,n))`, and mixed per frequency, `x = A(f) s`.
//! The image of source `j` is `a_j(f) s_j(f,n)`, so images add up to the
//! mixture exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{istft, write_wav, SampleFormat, Spectrogram, StftMeta, Waveform, Window};
use crate::source_models::VarianceField;
use crate::tensorlab::{herm_eig, CMat, HermitianMatrix, C64, MAX_DIM};

/// Largest accepted condition number of an instantaneous mixing matrix.
pub const MAX_CONDITION: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingKind {
    /// One complex Gaussian matrix for all frequencies.
    InstantaneousComplex,
    /// `a_ij(f) = exp(−2πi f τ_ij)`.
    AnechoicDelay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub sources: usize,
    pub channels: usize,
    pub kind: MixingKind,
    pub seed: u64,
    /// Per-source gains; empty means all ones.
    #[serde(default)]
    pub gains: Vec<f64>,
    #[serde(default = "default_max_delay_ms")]
    pub max_delay_ms: f64,
}

fn default_max_delay_ms() -> f64 {
    2.0
}

impl MixSpec {
    pub fn new(sources: usize, channels: usize, kind: MixingKind, seed: u64) -> Self {
        MixSpec {
            sources,
            channels,
            kind,
            seed,
            gains: Vec::new(),
            max_delay_ms: default_max_delay_ms(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 || self.channels == 0 {
            return Err(Error::InvalidInput("a mixture needs at least one source and one channel".into()));
        }
        if self.channels > MAX_DIM {
            return Err(Error::InvalidInput(format!("at most {MAX_DIM} channels are supported")));
        }
        if !self.gains.is_empty() && self.gains.len() != self.sources {
            return Err(Error::InvalidInput(format!(
                "{} gains for {} sources",
                self.gains.len(),
                self.sources
            )));
        }
        if self.gains.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidInput("gains must be positive".into()));
        }
        if !(self.max_delay_ms >= 0.0) || !self.max_delay_ms.is_finite() {
            return Err(Error::InvalidInput("maximum delay must be nonnegative".into()));
        }
        Ok(())
    }

    fn gain(&self, j: usize) -> f64 {
        self.gains.get(j).copied().unwrap_or(1.0)
    }
}

/// `A(f)` for every frequency, `channels × sources`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrices {
    pub bins: usize,
    pub channels: usize,
    pub sources: usize,
    /// Delays in seconds for the anechoic model, `channels × sources`.
    pub delays: Option<Vec<f64>>,
    /// Real and imaginary parts, indexed `((f·channels + i)·sources + j)`.
    re: Vec<f64>,
    im: Vec<f64>,
}

impl MixingMatrices {
    pub fn get(&self, f: usize, i: usize, j: usize) -> C64 {
        let k = (f * self.channels + i) * self.sources + j;
        C64::new(self.re[k], self.im[k])
    }

    fn set(&mut self, f: usize, i: usize, j: usize, z: C64) {
        let k = (f * self.channels + i) * self.sources + j;
        self.re[k] = z.re;
        self.im[k] = z.im;
    }

    /// Ratio of the largest to the smallest singular value of `A(f)`.
    pub fn condition_number(&self, f: usize) -> f64 {
        let (ni, nj) = (self.channels, self.sources);
        let small = ni.min(nj);
        if small > MAX_DIM {
            return f64::INFINITY;
        }
        // Gram matrix on the smaller side
        let gram = CMat::from_fn(small, |a, b| {
            let mut acc = C64::new(0.0, 0.0);
            if ni <= nj {
                for j in 0..nj {
                    acc += self.get(f, a, j) * self.get(f, b, j).conj();
                }
            } else {
                for i in 0..ni {
                    acc += self.get(f, i, a).conj() * self.get(f, i, b);
                }
            }
            acc
        });
        let (vals, _) = herm_eig(&HermitianMatrix::from_hermitian_part(&gram));
        let (lo, hi) = (vals[0].max(0.0), vals[small - 1]);
        if lo > 0.0 {
            (hi / lo).sqrt()
        } else {
            f64::INFINITY
        }
    }
}

/// Draws `A(f)` for `bins` one-sided frequencies of a `sample_rate` signal.
///
/// Instantaneous matrices are redrawn until their condition number is at
/// most [`MAX_CONDITION`].
pub fn gen_mixing(spec: &MixSpec, bins: usize, sample_rate: u32) -> Result<MixingMatrices> {
    spec.validate()?;
    if bins == 0 {
        return Err(Error::InvalidInput("no frequency bins".into()));
    }
    let (ni, nj) = (spec.channels, spec.sources);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = MixingMatrices {
        bins,
        channels: ni,
        sources: nj,
        delays: None,
        re: vec![0.0; bins * ni * nj],
        im: vec![0.0; bins * ni * nj],
    };
    match spec.kind {
        MixingKind::InstantaneousComplex => {
            let mut attempts = 0;
            loop {
                attempts += 1;
                let draw: Vec<C64> = (0..ni * nj)
                    .map(|_| {
                        let a: f64 = rng.sample(StandardNormal);
                        let b: f64 = rng.sample(StandardNormal);
                        C64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
                    })
                    .collect();
                for f in 0..bins {
                    for i in 0..ni {
                        for j in 0..nj {
                            out.set(f, i, j, draw[i * nj + j] * spec.gain(j));
                        }
                    }
                }
                if ni.min(nj) == 1 || out.condition_number(0) <= MAX_CONDITION {
                    break;
                }
                if attempts >= 10_000 {
                    return Err(Error::InvalidInput("could not draw a well-conditioned mixing matrix".into()));
                }
            }
        }
        MixingKind::AnechoicDelay => {
            let tau: Vec<f64> = (0..ni * nj)
                .map(|_| rng.gen_range(0.0..=spec.max_delay_ms * 1e-3))
                .collect();
            let nyquist = sample_rate as f64 / 2.0;
            for f in 0..bins {
                let hz = if bins > 1 { nyquist * f as f64 / (bins - 1) as f64 } else { 0.0 };
                for i in 0..ni {
                    for j in 0..nj {
                        let phase = -2.0 * PI * hz * tau[i * nj + j];
                        out.set(f, i, j, C64::from_polar(spec.gain(j), phase));
                    }
                }
            }
            out.delays = Some(tau);
        }
    }
    Ok(out)
}

/// Mixture and per-source images.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub mixture: Spectrogram,
    pub images: Vec<Spectrogram>,
}

/// `x(f,n) = Σ_j a_j(f) s_j(f,n)` from single-channel sources.
pub fn mix(sources: &[Spectrogram], a: &MixingMatrices) -> Result<Mixed> {
    if sources.len() != a.sources {
        return Err(Error::DimensionMismatch(format!(
            "{} sources for a mixing model of {}",
            sources.len(),
            a.sources
        )));
    }
    let (bins, frames) = sources.first().map_or((0, 0), |s| (s.bins, s.frames));
    if sources.iter().any(|s| s.channels != 1 || s.bins != bins || s.frames != frames) || bins != a.bins {
        return Err(Error::DimensionMismatch("sources must be single-channel with matching shapes".into()));
    }
    let mut images = Vec::with_capacity(sources.len());
    for (j, s) in sources.iter().enumerate() {
        let mut img = Spectrogram::zeros(bins, frames, a.channels);
        for f in 0..bins {
            for n in 0..frames {
                let z = s.get(f, n, 0);
                for i in 0..a.channels {
                    img.set(f, n, i, a.get(f, i, j) * z);
                }
            }
        }
        img.meta = s.meta;
        images.push(img);
    }
    let mut mixture = Spectrogram::zeros(bins, frames, a.channels);
    mixture.meta = sources.first().and_then(|s| s.meta);
    for img in &images {
        for (x, y) in mixture.values_mut().iter_mut().zip(img.values()) {
            *x += y;
        }
    }
    Ok(Mixed { mixture, images })
}

/// STFT layout used for synthetic signals.
pub fn synthetic_meta(bins: usize, frames: usize, sample_rate: u32) -> StftMeta {
    let frame_len = 2 * (bins - 1).max(1);
    let hop = frame_len / 2;
    StftMeta {
        frame_len,
        hop,
        window: Window::SqrtHann,
        signal_len: (frames - 1) * hop + frame_len,
        sample_rate,
    }
}

/// Draws `s(f,n) ~ CN(0, v(f,n))`.
pub fn draw_gaussian(v: &[f64], bins: usize, frames: usize, rng: &mut impl Rng) -> Spectrogram {
    let mut s = Spectrogram::zeros(bins, frames, 1);
    for f in 0..bins {
        for n in 0..frames {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            s.set(f, n, 0, C64::new(a, b) * (v[f * frames + n] / 2.0).sqrt());
        }
    }
    s
}

/// Single-channel sources with their true variances.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSources {
    pub spectrograms: Vec<Spectrogram>,
    pub variances: VarianceField,
}

/// Sources whose variances follow random `bases`-term NMF models.
///
/// Templates are sparse in frequency and activations heavy-tailed in time,
/// so the draws look like simple tonal signals rather than white noise.
pub fn synth_nmf_sources(sources: usize, bases: usize, bins: usize, frames: usize, seed: u64) -> Result<SynthSources> {
    if sources == 0 || bases == 0 || bins == 0 || frames == 0 {
        return Err(Error::InvalidInput("empty source specification".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_source = Vec::with_capacity(sources);
    for _ in 0..sources {
        let h: Vec<f64> = (0..bases * bins).map(|_| rng.gen_range(0.0f64..1.0).powi(4) + 1e-3).collect();
        let u: Vec<f64> = (0..bases * frames)
            .map(|_| {
                let e: f64 = rng.sample(Exp1);
                e * e + 1e-3
            })
            .collect();
        let mut v = vec![0.0; bins * frames];
        for k in 0..bases {
            for f in 0..bins {
                for n in 0..frames {
                    v[f * frames + n] += h[k * bins + f] * u[k * frames + n];
                }
            }
        }
        per_source.push(v);
    }
    let variances = VarianceField::from_sources(bins, frames, per_source)?;
    let spectrograms = (0..sources)
        .map(|j| draw_gaussian(variances.source(j), bins, frames, &mut rng))
        .collect();
    Ok(SynthSources {
        spectrograms,
        variances,
    })
}

/// A family of synthetic spectra used as a source class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpectralClass {
    /// Harmonic notes with fundamentals drawn from `f0` (in bins) and a
    /// spectral envelope peaking at `centre` (fraction of the band).
    Harmonic {
        f0: (f64, f64),
        centre: f64,
        width: f64,
    },
    /// Broadband noise bursts shaped by a logistic envelope rising at
    /// `cutoff` (fraction of the band); `rising = false` mirrors it.
    Noise { cutoff: f64, rising: bool },
}

impl SpectralClass {
    /// Built-in classes, distinguishable by spectral shape alone.
    pub fn preset(index: usize) -> Result<SpectralClass> {
        Ok(match index {
            0 => SpectralClass::Harmonic {
                f0: (3.0, 6.0),
                centre: 0.12,
                width: 0.12,
            },
            1 => SpectralClass::Harmonic {
                f0: (8.0, 14.0),
                centre: 0.45,
                width: 0.2,
            },
            2 => SpectralClass::Noise {
                cutoff: 0.6,
                rising: true,
            },
            3 => SpectralClass::Noise {
                cutoff: 0.25,
                rising: false,
            },
            _ => return Err(Error::InvalidInput(format!("no preset spectral class {index}"))),
        })
    }

    fn envelope(&self, x: f64) -> f64 {
        match *self {
            SpectralClass::Harmonic { centre, width, .. } => (-(x - centre).powi(2) / (2.0 * width * width)).exp(),
            SpectralClass::Noise { cutoff, rising } => {
                let t = 1.0 / (1.0 + (-(x - cutoff) * 25.0).exp());
                if rising {
                    t
                } else {
                    1.0 - t
                }
            }
        }
    }

    fn note_shape(&self, bins: usize, rng: &mut impl Rng) -> Vec<f64> {
        let x = |f: usize| f as f64 / (bins - 1).max(1) as f64;
        match *self {
            SpectralClass::Harmonic { f0, .. } => {
                let f0 = rng.gen_range(f0.0..f0.1);
                let mut shape = vec![0.0; bins];
                let mut h = 1.0;
                while h * f0 < bins as f64 {
                    let centre = h * f0;
                    for (f, s) in shape.iter_mut().enumerate() {
                        let d = f as f64 - centre;
                        if d.abs() < 4.0 {
                            *s += (-d * d / (2.0 * 0.6 * 0.6)).exp();
                        }
                    }
                    h += 1.0;
                }
                for (f, s) in shape.iter_mut().enumerate() {
                    *s *= self.envelope(x(f));
                }
                shape
            }
            SpectralClass::Noise { .. } => (0..bins).map(|f| self.envelope(x(f))).collect(),
        }
    }

    /// Variance field of one source: notes of 5–15 frames separated by
    /// gaps of up to 5 frames, with per-frame level jitter.
    pub fn variance(&self, bins: usize, frames: usize, rng: &mut impl Rng) -> Vec<f64> {
        let floor = 1e-4;
        let mut v = vec![floor; bins * frames];
        let mut n = rng.gen_range(0..3);
        while n < frames {
            let len = rng.gen_range(5..=15);
            let level = rng.gen_range(0.5..2.0);
            let shape = self.note_shape(bins, rng);
            for m in n..(n + len).min(frames) {
                let decay = (-0.08 * (m - n) as f64).exp();
                for f in 0..bins {
                    v[f * frames + m] += level * decay * shape[f];
                }
            }
            n += len + rng.gen_range(0..=5);
        }
        v
    }
}

/// Sources drawn from the given classes, one per entry.
pub fn synth_class_sources(classes: &[SpectralClass], bins: usize, frames: usize, seed: u64) -> Result<SynthSources> {
    if classes.is_empty() || bins < 2 || frames == 0 {
        return Err(Error::InvalidInput("empty source specification".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_source: Vec<Vec<f64>> = classes.iter().map(|c| c.variance(bins, frames, &mut rng)).collect();
    let variances = VarianceField::from_sources(bins, frames, per_source)?;
    let spectrograms = (0..classes.len())
        .map(|j| draw_gaussian(variances.source(j), bins, frames, &mut rng))
        .collect();
    Ok(SynthSources {
        spectrograms,
        variances,
    })
}

/// Where a scenario came from; written next to its audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioManifest {
    pub seed: u64,
    pub spec: MixSpec,
    pub stft: StftMeta,
    pub mixing: MixingMatrices,
    /// Class index of each source, when drawn from spectral classes.
    pub classes: Option<Vec<usize>>,
    pub mixture_file: String,
    pub reference_files: Vec<String>,
}

/// A mixture with its ground truth.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub mixed: Mixed,
    pub sources: SynthSources,
    pub manifest: ScenarioManifest,
}

/// Source material for [`build_scenario`].
#[derive(Clone, Debug)]
pub enum SourceRecipe {
    Nmf { bases: usize },
    Classes(Vec<usize>),
}

/// Draws sources and mixing, mixes them, and records everything in a manifest.
/// Sources and mixing use independent streams of `spec.seed`.
pub fn build_scenario(spec: &MixSpec, recipe: &SourceRecipe, bins: usize, frames: usize, sample_rate: u32) -> Result<Scenario> {
    spec.validate()?;
    let source_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    let (mut sources, classes) = match recipe {
        SourceRecipe::Nmf { bases } => (synth_nmf_sources(spec.sources, *bases, bins, frames, source_seed)?, None),
        SourceRecipe::Classes(ids) => {
            if ids.len() != spec.sources {
                return Err(Error::InvalidInput(format!(
                    "{} classes for {} sources",
                    ids.len(),
                    spec.sources
                )));
            }
            let cls = ids.iter().map(|&c| SpectralClass::preset(c)).collect::<Result<Vec<_>>>()?;
            (synth_class_sources(&cls, bins, frames, source_seed)?, Some(ids.clone()))
        }
    };
    let meta = synthetic_meta(bins, frames, sample_rate);
    for s in sources.spectrograms.iter_mut() {
        s.meta = Some(meta);
    }
    let mixing = gen_mixing(spec, bins, sample_rate)?;
    let mixed = mix(&sources.spectrograms, &mixing)?;
    let manifest = ScenarioManifest {
        seed: spec.seed,
        spec: spec.clone(),
        stft: meta,
        mixing,
        classes,
        mixture_file: "mixture.wav".into(),
        reference_files: (0..spec.sources).map(|j| format!("reference_{j}.wav")).collect(),
    };
    Ok(Scenario {
        mixed,
        sources,
        manifest,
    })
}

impl Scenario {
    /// Time-domain mixture and source images.
    pub fn waveforms(&self) -> Result<(Waveform, Vec<Waveform>)> {
        let mix = istft(&self.mixed.mixture)?;
        let refs = self.mixed.images.iter().map(istft).collect::<Result<Vec<_>>>()?;
        Ok((mix, refs))
    }

    /// Writes the mixture, one multichannel reference per source image, and
    /// `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (mix, refs) = self.waveforms()?;
        write_wav(dir.join(&self.manifest.mixture_file), &mix, SampleFormat::Float32)?;
        for (r, name) in refs.iter().zip(&self.manifest.reference_files) {
            write_wav(dir.join(name), r, SampleFormat::Float32)?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
