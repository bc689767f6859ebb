//! Labelled examples, manifests and feature loading.

mod manifest;
mod prepare;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio::{
    decode_wav, mel_spectrogram, read_spec_blob, resample, spectrogram_from_image, AudioError,
    FeatureConfig, Spectrogram,
};

pub use manifest::{
    read_manifest, relative_path, write_manifest, Manifest, ManifestRow, Split, MANIFEST_HEADER,
};
pub use prepare::{
    parse_fsdd_name, prepare_from_manifest, prepare_fsdd, prepare_gtzan, GtzanSource,
    PreparedManifest, PreparedRow, FSDD_DEFAULT_VAL_PER_SPEAKER, GTZAN_VAL_PER_CLASS,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error("label {label:?} is not among the classes [{}]", classes.join(", "))]
    UnknownLabel { label: String, classes: Vec<String> },
    #[error("{path}: features are {got:?}, expected {expected:?} (n_mels, n_frames)")]
    FeatureShape {
        path: PathBuf,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("no examples in split(s) {0}")]
    EmptySplit(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// Manifest path, used as the example identifier in exports.
    pub id: String,
    pub label: usize,
    pub speaker: String,
    pub group: Option<String>,
    pub features: Spectrogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Options applied while turning files into features.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LoadOptions {
    /// Resample audio to this rate before feature extraction, simulating a
    /// lower-bandwidth recording channel.
    pub resample_via: Option<u32>,
}

/// Features for one file, chosen by extension: `.wav` audio, `.png`
/// rendered spectrogram, `.spec` raw blob.
pub fn load_features(
    path: &Path,
    cfg: &FeatureConfig,
    opts: LoadOptions,
) -> Result<Spectrogram, DataError> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let hop_s = cfg.hop_length as f64 / cfg.sample_rate as f64;
    let spec = match ext.as_str() {
        "wav" => {
            let mut clip = decode_wav(path)?;
            if let Some(rate) = opts.resample_via {
                clip = resample(&clip, rate);
            }
            mel_spectrogram(&clip, cfg)?
        }
        "png" => spectrogram_from_image(path, cfg)?,
        "spec" => read_spec_blob(path, hop_s)?,
        other => {
            return Err(DataError::Layout(format!(
                "{}: unsupported file type {other:?}",
                path.display()
            )))
        }
    };
    let expected = (cfg.n_mels, cfg.n_frames());
    if (spec.n_mels, spec.n_frames) != expected {
        return Err(DataError::FeatureShape {
            path: path.to_path_buf(),
            expected,
            got: (spec.n_mels, spec.n_frames),
        });
    }
    Ok(spec)
}

/// Loads every row of `splits`, in manifest order, labelled against
/// `class_names`.
pub fn load_dataset(
    manifest: &Manifest,
    splits: &[Split],
    class_names: &[String],
    cfg: &FeatureConfig,
    opts: LoadOptions,
) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut examples = Vec::new();
    for row in manifest.rows_in(splits) {
        let label = class_names
            .iter()
            .position(|c| *c == row.label)
            .ok_or_else(|| DataError::UnknownLabel {
                label: row.label.clone(),
                classes: class_names.to_vec(),
            })?;
        examples.push(LabeledExample {
            id: row.path.clone(),
            label,
            speaker: row.speaker.clone(),
            group: Some(row.group.clone()).filter(|g| !g.is_empty()),
            features: load_features(&manifest.resolve(row), cfg, opts)?,
        });
    }
    if examples.is_empty() {
        let names: Vec<String> = splits.iter().map(Split::to_string).collect();
        return Err(DataError::EmptySplit(names.join("+")));
    }
    Ok(Dataset {
        class_names: class_names.to_vec(),
        examples,
    })
}
