use std::f64::consts::PI;

use super::AudioClip;

/// Zero crossings of the sinc kernel on each side.
const KERNEL_ZEROS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// The output holds `round(len · target / source)` samples, so its duration
/// matches the input to within half an output sample. When downsampling, the
/// kernel cutoff drops to the new Nyquist frequency.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0, "target_rate must be positive");
    if clip.sample_rate == target_rate {
        return clip.clone();
    }
    let from = clip.sample_rate as u64;
    let to = target_rate as u64;
    let n_in = clip.samples.len() as u64;
    let n_out = ((n_in * to + from / 2) / from) as usize;

    let cutoff = (to as f64 / from as f64).min(1.0);
    let half_width = KERNEL_ZEROS / cutoff;
    let step = from as f64 / to as f64;
    let x = &clip.samples;

    let samples = (0..n_out)
        .map(|j| {
            let t = j as f64 * step;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len().saturating_sub(1));
            let mut acc = 0.0f64;
            for (i, &xi) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - i as f64;
                let window = 0.5 * (1.0 + (PI * d / half_width).cos());
                acc += xi as f64 * cutoff * sinc(cutoff * d) * window;
            }
            acc as f32
        })
        .collect();

    AudioClip {
        samples,
        sample_rate: target_rate,
        source_path: clip.source_path.clone(),
    }
}
