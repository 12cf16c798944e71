//! RIFF/WAVE reading and writing for 16-bit PCM and 32-bit IEEE float.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            what: "WAV file",
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "unexpected end of file: needed {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct Format {
    code: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn parse(bytes: &[u8]) -> Result<Waveform> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != b"RIFF" {
        c.pos = 0;
        return Err(c.err("missing RIFF tag"));
    }
    let _riff_len = c.u32()?;
    if c.take(4)? != b"WAVE" {
        c.pos = 8;
        return Err(c.err("missing WAVE tag"));
    }
    let mut format: Option<Format> = None;
    loop {
        let chunk_start = c.pos;
        let id: [u8; 4] = c.take(4)?.try_into().unwrap();
        let len = c.u32()? as usize;
        match &id {
            b"fmt " => {
                if len < 16 {
                    c.pos = chunk_start + 4;
                    return Err(c.err(format!("fmt chunk too short ({len} bytes)")));
                }
                let body_start = c.pos;
                let mut code = c.u16()?;
                let channels = c.u16()?;
                let sample_rate = c.u32()?;
                let _byte_rate = c.u32()?;
                let _block_align = c.u16()?;
                let bits = c.u16()?;
                if code == FORMAT_EXTENSIBLE {
                    if len < 40 {
                        return Err(c.err("extensible fmt chunk too short"));
                    }
                    let _cb = c.u16()?;
                    let _valid = c.u16()?;
                    let _mask = c.u32()?;
                    code = c.u16()?;
                }
                c.pos = body_start;
                c.take(len + (len & 1))?;
                if channels == 0 || sample_rate == 0 {
                    c.pos = body_start;
                    return Err(c.err("zero channels or sample rate"));
                }
                match (code, bits) {
                    (FORMAT_PCM, 16) | (FORMAT_FLOAT, 32) => {}
                    _ => {
                        c.pos = body_start;
                        return Err(c.err(format!(
                            "unsupported encoding (format {code}, {bits} bits)"
                        )));
                    }
                }
                format = Some(Format {
                    code,
                    channels,
                    sample_rate,
                    bits,
                });
            }
            b"data" => {
                let fmt = format.ok_or_else(|| {
                    let mut e = Cursor { bytes, pos: chunk_start };
                    e.pos = chunk_start;
                    e.err("data chunk before fmt chunk")
                })?;
                let frame_bytes = fmt.channels as usize * fmt.bits as usize / 8;
                if len % frame_bytes != 0 {
                    return Err(c.err(format!(
                        "data length {len} is not a multiple of the frame size {frame_bytes}"
                    )));
                }
                let data = c.take(len)?;
                let nch = fmt.channels as usize;
                let frames = len / frame_bytes;
                let mut channels = vec![Vec::with_capacity(frames); nch];
                for (i, s) in data.chunks_exact(fmt.bits as usize / 8).enumerate() {
                    let x = if fmt.code == FORMAT_PCM {
                        i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0
                    } else {
                        f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64
                    };
                    channels[i % nch].push(x);
                }
                return Waveform::new(channels, fmt.sample_rate);
            }
            _ => {
                c.take(len + (len & 1))?;
            }
        }
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

fn encode(w: &Waveform, format: SampleFormat) -> Vec<u8> {
    let nch = w.num_channels() as u16;
    let (code, bits) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block_align = nch * bits / 8;
    let data_len = w.len() * block_align as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&nch.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..w.len() {
        for ch in &w.channels {
            match format {
                SampleFormat::Pcm16 => {
                    let q = (ch[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&(ch[i] as f32).to_le_bytes()),
            }
        }
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(w, format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_wave() -> Waveform {
        let a: Vec<f64> = (0..300).map(|i| ((i as f32) * 0.01).sin() as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| -0.5 * x).collect();
        Waveform::new(vec![a, b], 16_000).unwrap()
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = sample_wave();
        write_wav(&p, &w, SampleFormat::Float32).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r, w);
    }

    #[test]
    fn pcm16_scaling() {
        let w = Waveform::mono(vec![0.5, -1.0, 0.0, 32767.0 / 32768.0], 8000);
        let r = parse(&encode(&w, SampleFormat::Pcm16)).unwrap();
        assert_eq!(r.channels[0], vec![0.5, -1.0, 0.0, 32767.0 / 32768.0]);
        assert_eq!(r.sample_rate, 8000);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = encode(&sample_wave(), SampleFormat::Float32);
        let cut = &bytes[..bytes.len() - 10];
        match parse(cut) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 44),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse(&bytes[..20]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        let mut bytes = encode(&sample_wave(), SampleFormat::Pcm16);
        bytes[0] = b'X';
        assert!(matches!(parse(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn skips_unknown_chunks() {
        let bytes = encode(&sample_wave(), SampleFormat::Float32);
        let mut patched = bytes[..36].to_vec();
        patched.extend_from_slice(b"LIST");
        patched.extend_from_slice(&3u32.to_le_bytes());
        patched.extend_from_slice(&[1, 2, 3, 0]);
        patched.extend_from_slice(&bytes[36..]);
        assert_eq!(parse(&patched).unwrap(), sample_wave_f32());
    }

    fn sample_wave_f32() -> Waveform {
        let w = sample_wave();
        Waveform::new(
            w.channels
                .iter()
                .map(|c| c.iter().map(|&x| x as f32 as f64).collect())
                .collect(),
            w.sample_rate,
        )
        .unwrap()
    }
}
