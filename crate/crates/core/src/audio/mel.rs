use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{resample, AudioClip, AudioError, FeatureConfig, Spectrogram};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `n_fft / 2 + 1` power bins.
///
/// Each weight is the triangle's mean over the bin's frequency cell
/// `[f_k - Δ/2, f_k + Δ/2]`, so narrow low-frequency triangles that fall
/// between two bin centres still receive a positive row sum. Bins whose
/// cell does not meet the open support `(left, right)` weigh exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `(left, centre, right)` edges in Hz for each band.
    pub edges: Vec<(f64, f64, f64)>,
    /// Row-major `[n_mels][n_bins]`.
    pub weights: Vec<f64>,
    pub n_bins: usize,
    /// Per-band `[first, last)` range of non-zero bins.
    spans: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.edges.len()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn centre_hz(&self, m: usize) -> f64 {
        self.edges[m].1
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.spans[m];
            let row = self.row(m);
            *o = (lo..hi).map(|k| row[k] * power[k]).sum();
        }
    }
}

/// Integral of the unit-height triangle `(l, c, r)` from `-inf` to `f`.
fn triangle_cdf(f: f64, l: f64, c: f64, r: f64) -> f64 {
    if f <= l {
        0.0
    } else if f <= c {
        (f - l).powi(2) / (2.0 * (c - l))
    } else if f <= r {
        (c - l) / 2.0 + (r - c) / 2.0 - (r - f).powi(2) / (2.0 * (r - c))
    } else {
        (r - l) / 2.0
    }
}

pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<MelFilterbank, AudioError> {
    cfg.validate()?;
    let n_bins = cfg.n_fft / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let (mel_lo, mel_hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax_hz()));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    let mut edges = Vec::with_capacity(cfg.n_mels);
    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    let mut spans = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
        edges.push((l, c, r));
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        let (mut first, mut last) = (n_bins, 0);
        for (k, w) in row.iter_mut().enumerate() {
            let centre = k as f64 * bin_hz;
            let (a, b) = (centre - bin_hz / 2.0, centre + bin_hz / 2.0);
            if b <= l || a >= r {
                continue;
            }
            *w = (triangle_cdf(b, l, c, r) - triangle_cdf(a, l, c, r)) / bin_hz;
            if *w > 0.0 {
                first = first.min(k);
                last = k + 1;
            }
        }
        spans.push((first.min(last), last));
    }
    Ok(MelFilterbank {
        edges,
        weights,
        n_bins,
        spans,
    })
}

/// Log-mel power spectrogram of exactly `cfg.duration_s` seconds.
///
/// Clips at a different rate are resampled to `cfg.sample_rate` first. Short
/// clips are zero-padded at the end and long ones truncated, then framed
/// without centring: `n_frames = (n_samples - window) / hop + 1`.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Spectrogram, AudioError> {
    let bank = mel_filterbank(cfg)?;
    if clip.samples.is_empty() {
        return Err(AudioError::Empty {
            path: clip.source_path.clone().into(),
        });
    }
    let resampled;
    let clip = if clip.sample_rate != cfg.sample_rate {
        resampled = resample(clip, cfg.sample_rate);
        &resampled
    } else {
        clip
    };

    let n_samples = cfg.n_samples();
    let mut signal: Vec<f64> = clip
        .samples
        .iter()
        .take(n_samples)
        .map(|&v| v as f64)
        .collect();
    signal.resize(n_samples, 0.0);

    let n_frames = cfg.n_frames();
    let window: Vec<f64> = (0..cfg.window_length)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window_length as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; bank.n_bins];
    let mut mel = vec![0.0; cfg.n_mels];
    let mut values = vec![0.0f32; cfg.n_mels * n_frames];

    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.window_length {
                Complex::new(signal[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        bank.apply(&power, &mut mel);
        for (m, &e) in mel.iter().enumerate() {
            values[m * n_frames + t] = (e + cfg.log_epsilon).ln() as f32;
        }
    }
    Ok(Spectrogram::new(
        values,
        cfg.n_mels,
        n_frames,
        cfg.hop_length as f64 / cfg.sample_rate as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f32>, rate: u32) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: rate,
            source_path: "test".into(),
        }
    }

    #[test]
    fn default_frame_count_for_three_seconds() {
        let cfg = FeatureConfig::default();
        // (48000 - 400) / 160 + 1
        assert_eq!(cfg.n_frames(), 298);
        let spec = mel_spectrogram(&clip(vec![0.1; 16_000], 16_000), &cfg).unwrap();
        assert_eq!((spec.n_mels, spec.n_frames), (128, 298));
    }

    #[test]
    fn silence_is_log_epsilon_everywhere() {
        let cfg = FeatureConfig::default();
        let spec = mel_spectrogram(&clip(vec![0.0; 48_000], 16_000), &cfg).unwrap();
        let expected = (1e-10f64).ln() as f32;
        assert!(spec.values.iter().all(|&v| v == expected));
    }

    #[test]
    fn frame_count_independent_of_clip_length() {
        let cfg = FeatureConfig::default();
        for n in [1usize, 400, 20_000, 48_000, 90_000] {
            let spec = mel_spectrogram(&clip(vec![0.05; n], 16_000), &cfg).unwrap();
            assert_eq!(spec.n_frames, 298);
        }
    }

    #[test]
    fn filterbank_rows_positive_with_zero_outside_support() {
        let cfg = FeatureConfig::default();
        let bank = mel_filterbank(&cfg).unwrap();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        for m in 0..bank.n_mels() {
            let (l, _, r) = bank.edges[m];
            let row = bank.row(m);
            assert!(row.iter().sum::<f64>() > 0.0, "band {m} empty");
            for (k, &w) in row.iter().enumerate() {
                let f = k as f64 * bin_hz;
                if f + bin_hz / 2.0 <= l || f - bin_hz / 2.0 >= r {
                    assert_eq!(w, 0.0, "band {m} bin {k}");
                }
                assert!(w >= 0.0);
            }
        }
    }

    #[test]
    fn tone_at_band_centre_wins_every_frame() {
        let cfg = FeatureConfig::default();
        let bank = mel_filterbank(&cfg).unwrap();
        for band in [40usize, 80, 100, 120] {
            let f = bank.centre_hz(band);
            let samples = (0..48_000)
                .map(|i| (2.0 * PI * f * i as f64 / 16_000.0).sin() as f32 * 0.5)
                .collect();
            let spec = mel_spectrogram(&clip(samples, 16_000), &cfg).unwrap();
            for t in 0..spec.n_frames {
                let argmax = (0..spec.n_mels)
                    .max_by(|&a, &b| spec.get(a, t).total_cmp(&spec.get(b, t)))
                    .unwrap();
                assert_eq!(argmax, band, "frame {t}, tone {f:.1} Hz");
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = FeatureConfig::default();
        let samples: Vec<f32> = (0..30_000)
            .map(|i| ((i as f32) * 0.013).sin() * 0.3)
            .collect();
        let a = mel_spectrogram(&clip(samples.clone(), 16_000), &cfg).unwrap();
        let b = mel_spectrogram(&clip(samples, 16_000), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let too_many = FeatureConfig {
            n_mels: 300,
            ..FeatureConfig::default()
        };
        assert!(matches!(
            mel_filterbank(&too_many),
            Err(AudioError::Config(_))
        ));
        let above_nyquist = FeatureConfig {
            fmax: Some(9_000.0),
            ..FeatureConfig::default()
        };
        assert!(matches!(
            mel_filterbank(&above_nyquist),
            Err(AudioError::Config(_))
        ));
    }

    #[test]
    fn other_rates_are_resampled_first() {
        let cfg = FeatureConfig::default();
        let spec = mel_spectrogram(&clip(vec![0.0; 8_000], 8_000), &cfg).unwrap();
        assert_eq!(spec.n_frames, 298);
    }
}
