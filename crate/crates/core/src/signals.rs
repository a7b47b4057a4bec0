//! Audio containers and WAV file I/O.
//!
//! Samples are held as `f64` so metric code can work at full precision; the
//! network converts to its own scalar type at the boundary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Largest value representable by a 16-bit PCM code, as a normalized sample.
const PCM16_MAX: f64 = 1.0 - 1.0 / 32768.0;

/// A single-channel signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }

    /// Samples `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) exceeds length {}",
                start + len,
                self.samples.len()
            )));
        }
        Self::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }

    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

/// Root mean square amplitude.
pub fn rms(w: &Waveform) -> f64 {
    w.power().sqrt()
}

/// An ordered set of equally long, equally sampled channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelWaveform {
    channels: Vec<Waveform>,
}

impl MultiChannelWaveform {
    pub fn new(channels: Vec<Waveform>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::invalid("at least one channel is required"))?;
        let (len, rate) = (first.len(), first.sample_rate());
        for (i, ch) in channels.iter().enumerate() {
            if ch.len() != len {
                return Err(Error::Shape(format!(
                    "channel {i} has {} samples, expected {len}",
                    ch.len()
                )));
            }
            if ch.sample_rate() != rate {
                return Err(Error::invalid(format!(
                    "channel {i} sampled at {} Hz, expected {rate} Hz",
                    ch.sample_rate()
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn mono(w: Waveform) -> Self {
        Self { channels: vec![w] }
    }

    pub fn channels(&self) -> &[Waveform] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &Waveform {
        &self.channels[i]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels[0].is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.channels[0].sample_rate()
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(
            self.channels
                .iter()
                .map(|c| c.slice(start, len))
                .collect::<Result<_>>()?,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultiChannelWaveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{bits}-bit {fmt:?} in {}",
                path.display()
            )))
        }
    };
    if interleaved.is_empty() || n_ch == 0 {
        return Err(Error::invalid(format!(
            "{} has an empty payload",
            path.display()
        )));
    }
    let frames = interleaved.len() / n_ch;
    let channels = (0..n_ch)
        .map(|c| {
            let samples = (0..frames).map(|f| interleaved[f * n_ch + c]).collect();
            Waveform::new(samples, spec.sample_rate)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiChannelWaveform::new(channels)
}

/// Quantizes a normalized sample to a 16-bit code, clipping out-of-range values.
pub fn to_pcm16(sample: f64) -> i16 {
    let clipped = sample.clamp(-1.0, PCM16_MAX);
    (clipped * 32768.0).round() as i16
}

pub fn write_wav(
    path: impl AsRef<Path>,
    w: &MultiChannelWaveform,
    encoding: WavEncoding,
) -> Result<()> {
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: w.num_channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for f in 0..w.len() {
        for ch in w.channels() {
            let s = ch.samples()[f];
            match encoding {
                WavEncoding::Pcm16 => writer.write_sample(to_pcm16(s))?,
                WavEncoding::Float32 => writer.write_sample(s as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
