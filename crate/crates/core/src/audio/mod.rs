//! Audio decoding and log-mel feature extraction.
//!
//! The front end defaults to a 25 ms Hann window, 10 ms hop and a 512-point
//! FFT at 16 kHz, with 128 mel bands spanning 0 Hz to Nyquist over exactly
//! 3 s of audio. None of these are sacred; every value lives in
//! [`FeatureConfig`] and is echoed into each run directory.

mod augment;
mod blob;
mod image;
mod mel;
mod resample;
mod wav;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{
    spec_augment, spec_augment_with_bands, AugmentSpec, MaskAxis, MaskBand, MaskValuePolicy,
};
pub use blob::{read_spec_blob, write_spec_blob, SPEC_MAGIC};
pub use image::spectrogram_from_image;
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelFilterbank};
pub use resample::resample;
pub use wav::decode_wav;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: cannot read audio: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{path}: unsupported encoding: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("{path}: audio has zero length")]
    Empty { path: PathBuf },
    #[error("{path}: audio contains non-finite samples")]
    NonFinite { path: PathBuf },
    #[error("inconsistent feature config: {0}")]
    Config(String),
    #[error("invalid augmentation: {0}")]
    Augment(String),
    #[error("{path}: malformed feature blob: {detail}")]
    Blob { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mono audio, samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_path: String,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-mel grid stored row-major as `[n_mels][n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub frame_hop_s: f64,
}

impl Spectrogram {
    pub fn new(values: Vec<f32>, n_mels: usize, n_frames: usize, frame_hop_s: f64) -> Self {
        assert_eq!(values.len(), n_mels * n_frames, "spectrogram grid size");
        Self {
            values,
            n_mels,
            n_frames,
            frame_hop_s,
        }
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.values.iter().map(|&v| v as f64).sum();
        (sum / self.values.len() as f64) as f32
    }
}

/// Front-end parameters. Sample counts are at `sample_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper band edge in Hz; `None` means Nyquist.
    pub fmax: Option<f64>,
    /// Clips are zero-padded or truncated to exactly this length.
    pub duration_s: f64,
    /// Floor added to mel power before the natural log.
    pub log_epsilon: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: None,
            duration_s: 3.0,
            log_epsilon: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn n_frames(&self) -> usize {
        let n = self.n_samples();
        if n < self.window_length {
            0
        } else {
            (n - self.window_length) / self.hop_length + 1
        }
    }

    pub fn fmax_hz(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        let err = |m: String| Err(AudioError::Config(m));
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 {
            return err("sample_rate must be positive".into());
        }
        if self.hop_length == 0 || self.window_length == 0 {
            return err("window_length and hop_length must be positive".into());
        }
        if self.window_length > self.n_fft {
            return err(format!(
                "window_length {} exceeds n_fft {}",
                self.window_length, self.n_fft
            ));
        }
        if self.n_mels == 0 || self.n_mels > self.n_fft / 2 + 1 {
            return err(format!(
                "n_mels {} must be in 1..={} (FFT bins for n_fft {})",
                self.n_mels,
                self.n_fft / 2 + 1,
                self.n_fft
            ));
        }
        if self.fmax_hz() > nyquist {
            return err(format!(
                "fmax {} Hz exceeds Nyquist {} Hz",
                self.fmax_hz(),
                nyquist
            ));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax_hz()) {
            return err(format!("fmin {} must lie in [0, fmax)", self.fmin));
        }
        if self.log_epsilon.is_nan() || self.log_epsilon <= 0.0 {
            return err("log_epsilon must be positive".into());
        }
        if self.n_frames() == 0 {
            return err(format!(
                "duration {} s is shorter than one {}-sample window",
                self.duration_s, self.window_length
            ));
        }
        Ok(())
    }
}
