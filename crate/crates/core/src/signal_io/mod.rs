//! Audio front end: waveforms, STFT spectrograms and WAV files.

mod stft;
mod wav;

pub use stft::{istft, ms_to_samples, stft, Window};
pub use wav::{read_wav, write_wav, SampleFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorlab::{CVec, C64};

/// Multichannel real signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if channels.is_empty() {
            return Err(Error::InvalidInput("waveform needs at least one channel".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::DimensionMismatch("channels differ in length".into()));
        }
        Ok(Waveform {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            channels: vec![samples],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Analysis parameters carried by a spectrogram so it can be resynthesized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftMeta {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
    pub signal_len: usize,
    pub sample_rate: u32,
}

/// Complex STFT coefficients, `bins × frames × channels`, channel-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub channels: usize,
    values: Vec<C64>,
    pub meta: Option<StftMeta>,
}

impl Spectrogram {
    pub fn zeros(bins: usize, frames: usize, channels: usize) -> Self {
        Spectrogram {
            bins,
            frames,
            channels,
            values: vec![C64::new(0.0, 0.0); bins * frames * channels],
            meta: None,
        }
    }

    pub fn from_values(bins: usize, frames: usize, channels: usize, values: Vec<C64>) -> Result<Self> {
        if values.len() != bins * frames * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {bins}x{frames}x{channels} spectrogram",
                values.len()
            )));
        }
        if values.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidInput("spectrogram has non-finite values".into()));
        }
        Ok(Spectrogram {
            bins,
            frames,
            channels,
            values,
            meta: None,
        })
    }

    #[inline]
    fn idx(&self, f: usize, n: usize, ch: usize) -> usize {
        (f * self.frames + n) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, f: usize, n: usize, ch: usize) -> C64 {
        self.values[self.idx(f, n, ch)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, n: usize, ch: usize, z: C64) {
        let i = self.idx(f, n, ch);
        self.values[i] = z;
    }

    /// Channel vector at one time-frequency point.
    #[inline]
    pub fn vector(&self, f: usize, n: usize) -> CVec {
        let i = self.idx(f, n, 0);
        CVec::from_slice(&self.values[i..i + self.channels])
    }

    #[inline]
    pub fn set_vector(&mut self, f: usize, n: usize, x: &CVec) {
        let i = self.idx(f, n, 0);
        self.values[i..i + self.channels].copy_from_slice(x.as_slice());
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    /// Single-channel view of channel `ch`.
    pub fn channel(&self, ch: usize) -> Spectrogram {
        let mut out = Spectrogram::zeros(self.bins, self.frames, 1);
        for f in 0..self.bins {
            for n in 0..self.frames {
                out.set(f, n, 0, self.get(f, n, ch));
            }
        }
        out.meta = self.meta;
        out
    }

    /// `|s(f,n)|²` of channel `ch`, frequency-major.
    pub fn power(&self, ch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.bins * self.frames);
        for f in 0..self.bins {
            for n in 0..self.frames {
                out.push(self.get(f, n, ch).norm_sqr());
            }
        }
        out
    }
}
