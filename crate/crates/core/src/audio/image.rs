//! Spectrograms supplied as pre-rendered images.

use std::path::Path;

use image::imageops::FilterType;

use super::{AudioError, FeatureConfig, Spectrogram};

/// Loads a spectrogram picture and resamples it onto the configured grid.
///
/// The image is read as 8-bit luma and resized to `n_frames × n_mels`; the
/// top row is taken as the highest frequency, so rows are flipped. Pixel
/// intensities map linearly to `[0, 1]`.
pub fn spectrogram_from_image(
    path: impl AsRef<Path>,
    cfg: &FeatureConfig,
) -> Result<Spectrogram, AudioError> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| AudioError::Unreadable {
        path: path.to_path_buf(),
        source: Box::new(e),
    })?;
    let (n_mels, n_frames) = (cfg.n_mels, cfg.n_frames());
    let luma = img.to_luma8();
    let resized =
        image::imageops::resize(&luma, n_frames as u32, n_mels as u32, FilterType::Triangle);
    let mut values = vec![0.0f32; n_mels * n_frames];
    for (x, y, p) in resized.enumerate_pixels() {
        let mel = n_mels - 1 - y as usize;
        values[mel * n_frames + x as usize] = p.0[0] as f32 / 255.0;
    }
    Ok(Spectrogram::new(
        values,
        n_mels,
        n_frames,
        cfg.hop_length as f64 / cfg.sample_rate as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    #[test]
    fn bright_top_row_becomes_high_mel_band() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let mut img = GrayImage::new(40, 8);
        for x in 0..40 {
            for y in 0..2 {
                img.put_pixel(x, y, Luma([255]));
            }
        }
        img.save(&p).unwrap();
        let cfg = FeatureConfig {
            n_mels: 8,
            duration_s: 0.41,
            ..FeatureConfig::default()
        };
        let spec = spectrogram_from_image(&p, &cfg).unwrap();
        assert_eq!(spec.n_mels, 8);
        assert_eq!(spec.n_frames, cfg.n_frames());
        assert!(spec.get(7, 0) > 0.99);
        assert_eq!(spec.get(0, 0), 0.0);
    }
}
