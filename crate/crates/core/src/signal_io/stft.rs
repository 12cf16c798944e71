use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Spectrogram, StftMeta, Waveform};
use crate::error::{Error, Result};
use crate::tensorlab::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    Rectangular,
    Hann,
    SqrtHann,
}

impl Window {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let hann = |i: usize| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos();
        (0..len)
            .map(|i| match self {
                Window::Rectangular => 1.0,
                Window::Hann => hann(i),
                Window::SqrtHann => hann(i).sqrt(),
            })
            .collect()
    }

    /// Synthesis window paired with this analysis window for overlap-add.
    pub fn synthesis(self) -> Window {
        match self {
            Window::SqrtHann => Window::SqrtHann,
            Window::Hann | Window::Rectangular => Window::Rectangular,
        }
    }
}

/// Converts a duration in milliseconds to samples at `sample_rate`.
pub fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * 1e-3 * sample_rate as f64).round() as usize
}

/// Overlap-add normalizer `Σ_k wa(i + k·hop) ws(i + k·hop)`, checked to be constant in `i`.
fn wola_constant(window: Window, len: usize, hop: usize) -> Result<f64> {
    let wa = window.coefficients(len);
    let ws = window.synthesis().coefficients(len);
    let mut sums = vec![0.0; hop];
    for i in 0..len {
        sums[i % hop] += wa[i] * ws[i];
    }
    let c = sums[0];
    let spread = sums.iter().fold(0.0f64, |m, s| m.max((s - c).abs()));
    if !(c > 0.0) || spread > 1e-10 * c {
        return Err(Error::InvalidInput(format!(
            "window does not overlap-add to a constant at hop {hop} (spread {spread:.3e})"
        )));
    }
    Ok(c)
}

struct Plan {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Plan {
    fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Plan {
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        }
    }
}

/// Short-time Fourier transform of every channel of `w`.
///
/// The tail is zero-padded so that the last partial frame is covered.
pub fn stft(w: &Waveform, frame_len: usize, hop: usize, window: Window) -> Result<Spectrogram> {
    if frame_len == 0 || hop == 0 || frame_len % hop != 0 {
        return Err(Error::InvalidInput(format!(
            "hop {hop} must divide frame length {frame_len}"
        )));
    }
    let win = window.coefficients(frame_len);
    wola_constant(window, frame_len, hop)?;
    let len = w.len();
    if len < frame_len {
        return Err(Error::InvalidInput(format!(
            "signal of {len} samples is shorter than one frame ({frame_len})"
        )));
    }
    let frames = (len - frame_len).div_ceil(hop) + 1;
    let bins = frame_len / 2 + 1;
    let channels = w.num_channels();
    let plan = Plan::new(frame_len);
    let mut spec = Spectrogram::zeros(bins, frames, channels);
    let mut buf = vec![C64::new(0.0, 0.0); frame_len];
    for (ch, samples) in w.channels.iter().enumerate() {
        for n in 0..frames {
            let start = n * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let x = samples.get(start + i).copied().unwrap_or(0.0);
                *b = C64::new(x * win[i], 0.0);
            }
            plan.fwd.process(&mut buf);
            for (f, z) in buf.iter().take(bins).enumerate() {
                spec.set(f, n, ch, *z);
            }
        }
    }
    spec.meta = Some(StftMeta {
        frame_len,
        hop,
        window,
        signal_len: len,
        sample_rate: w.sample_rate,
    });
    Ok(spec)
}

/// Weighted overlap-add resynthesis with the analysis window.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let meta = s
        .meta
        .as_ref()
        .ok_or_else(|| Error::MissingMetadata("spectrogram has no STFT analysis metadata".into()))?;
    let frame_len = meta.frame_len;
    if s.bins != frame_len / 2 + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} bins do not match frame length {frame_len}",
            s.bins
        )));
    }
    let win = meta.window.synthesis().coefficients(frame_len);
    let norm = wola_constant(meta.window, frame_len, meta.hop)?;
    let plan = Plan::new(frame_len);
    let out_len = (s.frames - 1) * meta.hop + frame_len;
    let mut channels = Vec::with_capacity(s.channels);
    let mut buf = vec![C64::new(0.0, 0.0); frame_len];
    for ch in 0..s.channels {
        let mut out = vec![0.0; out_len];
        for n in 0..s.frames {
            for f in 0..s.bins {
                buf[f] = s.get(f, n, ch);
            }
            // Hermitian completion of the one-sided spectrum
            buf[0].im = 0.0;
            if frame_len % 2 == 0 {
                buf[frame_len / 2].im = 0.0;
            }
            for f in s.bins..frame_len {
                buf[f] = buf[frame_len - f].conj();
            }
            plan.inv.process(&mut buf);
            let start = n * meta.hop;
            for i in 0..frame_len {
                out[start + i] += buf[i].re / frame_len as f64 * win[i];
            }
        }
        out.truncate(meta.signal_len);
        for x in out.iter_mut() {
            *x /= norm;
        }
        channels.push(out);
    }
    Waveform::new(channels, meta.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn frame_sizes_from_milliseconds() {
        assert_eq!(ms_to_samples(256.0, 16_000), 4096);
        assert_eq!(ms_to_samples(128.0, 16_000), 2048);
    }

    #[test]
    fn frame_count_pads_tail() {
        let w = Waveform::mono(vec![0.0; 1000], 16_000);
        let s = stft(&w, 256, 128, Window::SqrtHann).unwrap();
        // ceil((1000 - 256) / 128) + 1 = 7
        assert_eq!((s.bins, s.frames, s.channels), (129, 7, 1));
    }

    #[test]
    fn bin_centered_sinusoid_lands_in_one_bin() {
        let len = 64;
        let k = 5;
        let x: Vec<f64> = (0..len)
            .map(|i| (2.0 * PI * k as f64 * i as f64 / len as f64 + 0.3).cos())
            .collect();
        let s = stft(&Waveform::mono(x, 8000), len, len, Window::Rectangular).unwrap();
        let total: f64 = (0..s.bins).map(|f| s.get(f, 0, 0).norm_sqr()).sum();
        assert!(s.get(k, 0, 0).norm_sqr() >= 0.99 * total);
    }

    #[test]
    fn zero_signal_zero_spectrogram() {
        let s = stft(&Waveform::mono(vec![0.0; 512], 16_000), 128, 64, Window::Hann).unwrap();
        assert!(s.values().iter().all(|z| *z == C64::new(0.0, 0.0)));
        let w = istft(&s).unwrap();
        assert!(w.channels[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn round_trip_interior_is_exact() {
        let x = noise(3 * 4096 + 517, 7);
        let w = Waveform::mono(x.clone(), 16_000);
        let s = stft(&w, 4096, 2048, Window::SqrtHann).unwrap();
        let y = istft(&s).unwrap();
        assert_eq!(y.len(), x.len());
        // every sample covered by two frames
        for i in 2048..(x.len() - 2048) {
            assert!((y.channels[0][i] - x[i]).abs() <= 1e-8, "sample {i}");
        }
    }

    #[test]
    fn single_frame_reproduces_windowed_frame() {
        let x = noise(64, 9);
        let s = stft(&Waveform::mono(x.clone(), 16_000), 64, 32, Window::SqrtHann).unwrap();
        assert_eq!(s.frames, 1);
        let y = istft(&s).unwrap();
        let win = Window::SqrtHann.coefficients(64);
        let norm = wola_constant(Window::SqrtHann, 64, 32).unwrap();
        for i in 0..64 {
            let direct = x[i] * win[i] * win[i] / norm;
            assert!((y.channels[0][i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_with_hann() {
        let len = 256;
        let x = noise(len * 8, 11);
        let s = stft(&Waveform::mono(x.clone(), 16_000), len, len / 2, Window::Hann).unwrap();
        let win = Window::Hann.coefficients(len);
        let mut time_energy = 0.0;
        let mut freq_energy = 0.0;
        for n in 0..s.frames {
            for i in 0..len {
                let v = x.get(n * len / 2 + i).copied().unwrap_or(0.0) * win[i];
                time_energy += v * v;
            }
            for f in 0..s.bins {
                let wgt = if f == 0 || f == s.bins - 1 { 1.0 } else { 2.0 };
                freq_energy += wgt * s.get(f, n, 0).norm_sqr() / len as f64;
            }
        }
        assert!((freq_energy - time_energy).abs() <= 0.01 * time_energy);
    }

    #[test]
    fn rejects_bad_parameters() {
        let w = Waveform::mono(vec![0.0; 100], 16_000);
        assert!(stft(&w, 256, 128, Window::Hann).is_err());
        let w = Waveform::mono(vec![0.0; 1000], 16_000);
        assert!(stft(&w, 256, 100, Window::Hann).is_err());
        let mut s = stft(&w, 256, 128, Window::Hann).unwrap();
        s.meta = None;
        assert!(matches!(istft(&s), Err(Error::MissingMetadata(_))));
    }

    #[test]
    fn round_trip_random_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in 0..20 {
            let frame = [64usize, 128, 256][t % 3];
            let len = rng.gen_range(frame..frame * 10);
            let x = noise(len, t as u64);
            let w = Waveform::new(vec![x.clone(), x.iter().map(|v| -v).collect()], 16_000).unwrap();
            let y = istft(&stft(&w, frame, frame / 2, Window::SqrtHann).unwrap()).unwrap();
            for ch in 0..2 {
                for i in frame / 2..len.saturating_sub(frame / 2) {
                    assert!((y.channels[ch][i] - w.channels[ch][i]).abs() <= 1e-8);
                }
            }
        }
    }
}
