use std::path::Path;

use hound::{SampleFormat, WavReader};

use super::{AudioClip, AudioError};

/// Reads a PCM-16 or float-32 RIFF/WAVE file, averaging channels to mono.
/// PCM values are scaled by 1/32768.
pub fn decode_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "unsupported WAVE format".into(),
        },
        other => AudioError::Unreadable {
            path: path.to_path_buf(),
            source: Box::new(other),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || spec.sample_rate == 0 {
        return Err(AudioError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{} channels at {} Hz", spec.channels, spec.sample_rate),
        });
    }
    let unreadable = |e: hound::Error| AudioError::Unreadable {
        path: path.to_path_buf(),
        source: Box::new(e),
    };
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(unreadable)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(unreadable)?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: format!("{bits}-bit {fmt:?} samples (need 16-bit PCM or 32-bit float)"),
            })
        }
    };
    if interleaved.len() < channels {
        return Err(AudioError::Empty {
            path: path.to_path_buf(),
        });
    }
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(AudioError::NonFinite {
            path: path.to_path_buf(),
        });
    }
    Ok(AudioClip {
        samples,
        sample_rate: spec.sample_rate,
        source_path: path.display().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use hound::{WavSpec, WavWriter};

    fn write_i16(path: &Path, channels: u16, rate: u32, data: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_decodes_to_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        write_i16(&p, 1, 16_000, &vec![0; 16_000]);
        let clip = decode_wav(&p).unwrap();
        assert_eq!(clip.sample_rate, 16_000);
        assert_eq!(clip.samples.len(), 16_000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("square.wav");
        let data: Vec<i16> = (0..100)
            .map(|i| if i % 2 == 0 { i16::MAX } else { i16::MIN })
            .collect();
        write_i16(&p, 1, 8_000, &data);
        let clip = decode_wav(&p).unwrap();
        for (i, s) in clip.samples.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*s, 32767.0 / 32768.0);
            } else {
                assert_eq!(*s, -1.0);
            }
        }
    }

    #[test]
    fn antiphase_stereo_cancels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        let mut data = Vec::new();
        for i in 0..500 {
            let x = ((i * 37 % 2000) as i16) - 1000;
            data.push(x);
            data.push(-x);
        }
        write_i16(&p, 2, 16_000, &data);
        let clip = decode_wav(&p).unwrap();
        assert_eq!(clip.samples.len(), 500);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn float_wav_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        for s in [0.5f32, -0.25, 1.0] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(decode_wav(&p).unwrap().samples, vec![0.5, -0.25, 1.0]);
    }

    #[test]
    fn errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.wav");
        let err = decode_wav(&missing).unwrap_err();
        assert!(err.to_string().contains("missing.wav"));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"definitely not a wave file").unwrap();
        let err = decode_wav(&junk).unwrap_err();
        assert!(err.to_string().contains("junk.wav"), "{err}");

        let empty = dir.path().join("empty.wav");
        write_i16(&empty, 1, 16_000, &[]);
        assert!(matches!(decode_wav(&empty), Err(AudioError::Empty { .. })));

        let pcm8 = dir.path().join("pcm8.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 8,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&pcm8, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        let err = decode_wav(&pcm8).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedEncoding { .. }));
        assert!(err.to_string().contains("pcm8.wav"));
    }
}
