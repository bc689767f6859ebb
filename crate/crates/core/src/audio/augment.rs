//! SpecAugment-style band masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AudioError, Spectrogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskValuePolicy {
    Zero,
    /// Mean of the unmasked input spectrogram.
    PerSpectrogramMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Largest frequency mask height, in mel bins.
    pub freq_mask_max: usize,
    /// Largest time mask width, in frames.
    pub time_mask_max: usize,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
    pub mask_value: MaskValuePolicy,
    /// Chance that a training example is augmented at all, drawn per example.
    pub apply_probability: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            freq_mask_max: 16,
            time_mask_max: 24,
            n_freq_masks: 1,
            n_time_masks: 1,
            mask_value: MaskValuePolicy::PerSpectrogramMean,
            apply_probability: 1.0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self, n_mels: usize, n_frames: usize) -> Result<(), AudioError> {
        if self.freq_mask_max > n_mels {
            return Err(AudioError::Augment(format!(
                "freq_mask_max {} exceeds {} mel bins",
                self.freq_mask_max, n_mels
            )));
        }
        if self.time_mask_max > n_frames {
            return Err(AudioError::Augment(format!(
                "time_mask_max {} exceeds {} frames",
                self.time_mask_max, n_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(AudioError::Augment(format!(
                "apply_probability {} outside [0, 1]",
                self.apply_probability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

/// One applied mask: rows (frequency) or columns (time) `start..start + width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBand {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Masks a copy of `spec` and reports the bands that were drawn.
///
/// Widths are uniform on `[0, max]` and positions uniform over every start
/// that keeps the band inside the grid. Frequency masks are drawn first.
pub fn spec_augment_with_bands<R: Rng + ?Sized>(
    spec: &Spectrogram,
    aug: &AugmentSpec,
    rng: &mut R,
) -> Result<(Spectrogram, Vec<MaskBand>), AudioError> {
    aug.validate(spec.n_mels, spec.n_frames)?;
    let fill = match aug.mask_value {
        MaskValuePolicy::Zero => 0.0,
        MaskValuePolicy::PerSpectrogramMean => spec.mean(),
    };
    let mut out = spec.clone();
    let mut bands = Vec::with_capacity(aug.n_freq_masks + aug.n_time_masks);
    for _ in 0..aug.n_freq_masks {
        let width = rng.random_range(0..=aug.freq_mask_max);
        let start = rng.random_range(0..=spec.n_mels - width);
        out.values[start * spec.n_frames..(start + width) * spec.n_frames].fill(fill);
        bands.push(MaskBand {
            axis: MaskAxis::Frequency,
            start,
            width,
        });
    }
    for _ in 0..aug.n_time_masks {
        let width = rng.random_range(0..=aug.time_mask_max);
        let start = rng.random_range(0..=spec.n_frames - width);
        for row in out.values.chunks_mut(spec.n_frames) {
            row[start..start + width].fill(fill);
        }
        bands.push(MaskBand {
            axis: MaskAxis::Time,
            start,
            width,
        });
    }
    Ok((out, bands))
}

pub fn spec_augment<R: Rng + ?Sized>(
    spec: &Spectrogram,
    aug: &AugmentSpec,
    rng: &mut R,
) -> Result<Spectrogram, AudioError> {
    spec_augment_with_bands(spec, aug, rng).map(|(s, _)| s)
}
