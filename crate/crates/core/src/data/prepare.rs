//! Builds manifests from known corpus layouts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::manifest::{read_manifest, relative_path, write_manifest, ManifestRow, Split};
use super::DataError;
use crate::audio::decode_wav;

/// Validation utterances per (speaker, digit) in the FSDD layout.
pub const FSDD_DEFAULT_VAL_PER_SPEAKER: usize = 5;
/// Validation items per class in the GTZAN layout.
pub const GTZAN_VAL_PER_CLASS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtzanSource {
    Audio,
    Images,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedRow {
    pub path: PathBuf,
    pub label: String,
    pub speaker: String,
    pub group: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct PreparedManifest {
    pub rows: Vec<PreparedRow>,
    /// Files left out, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl PreparedManifest {
    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }

    /// Writes the manifest with paths relative to `out`'s directory.
    pub fn write(&self, out: impl AsRef<Path>) -> Result<(), DataError> {
        let out = out.as_ref();
        let base = absolute(out.parent().unwrap_or(Path::new(".")))?;
        let rows: Vec<ManifestRow> = self
            .rows
            .iter()
            .map(|r| ManifestRow {
                path: relative_path(&r.path, &base),
                label: r.label.clone(),
                speaker: r.speaker.clone(),
                group: r.group.clone(),
                split: r.split,
            })
            .collect();
        write_manifest(&rows, out)
    }
}

fn absolute(p: &Path) -> Result<PathBuf, DataError> {
    let p = if p.as_os_str().is_empty() {
        Path::new(".")
    } else {
        p
    };
    std::path::absolute(p).map_err(|source| DataError::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io)?;
    out.sort();
    Ok(out)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Parses `{digit}_{speaker}_{index}`.
pub fn parse_fsdd_name(stem: &str) -> Option<(u8, String, u32)> {
    let mut parts = stem.split('_');
    let (d, s, i) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || s.is_empty() {
        return None;
    }
    let digit = d
        .parse::<u8>()
        .ok()
        .filter(|&v| v <= 9 && v.to_string() == d)?;
    Some((digit, s.to_owned(), i.parse().ok()?))
}

/// FSDD: `{digit}_{speaker}_{index}.wav`, read from `dir/recordings` when that
/// exists. The `val_per_speaker` highest indices of every (speaker, digit)
/// go to validation.
pub fn prepare_fsdd(
    dir: impl AsRef<Path>,
    val_per_speaker: usize,
) -> Result<PreparedManifest, DataError> {
    let mut dir = absolute(dir.as_ref())?;
    if dir.join("recordings").is_dir() {
        dir = dir.join("recordings");
    }
    let mut groups: BTreeMap<(u8, String), Vec<(u32, PathBuf)>> = BTreeMap::new();
    let mut bad = Vec::new();
    for p in list_dir(&dir)?
        .into_iter()
        .filter(|p| p.is_file() && has_ext(p, "wav"))
    {
        let stem = p
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        match parse_fsdd_name(&stem) {
            Some((digit, speaker, index)) => {
                groups.entry((digit, speaker)).or_default().push((index, p))
            }
            None => bad.push(
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
            ),
        }
    }
    if !bad.is_empty() {
        return Err(DataError::Layout(format!(
            "{}: filenames not of the form {{digit}}_{{speaker}}_{{index}}.wav: {}",
            dir.display(),
            bad.join(", ")
        )));
    }
    if groups.is_empty() {
        return Err(DataError::Layout(format!(
            "{}: no FSDD recordings found",
            dir.display()
        )));
    }
    let mut out = PreparedManifest::default();
    for ((digit, speaker), mut files) in groups {
        files.sort();
        let n_val = val_per_speaker.min(files.len());
        let cut = files.len() - n_val;
        for (i, (_, path)) in files.into_iter().enumerate() {
            out.rows.push(PreparedRow {
                path,
                label: digit.to_string(),
                speaker: speaker.clone(),
                group: String::new(),
                split: if i >= cut { Split::Val } else { Split::Train },
            });
        }
    }
    Ok(out)
}

/// GTZAN: one sub-directory per genre holding `.wav` clips or `.png`
/// spectrogram renders. Unreadable files are skipped and reported; the last
/// `val_per_class` readable files of each genre (by name) go to validation.
pub fn prepare_gtzan(
    dir: impl AsRef<Path>,
    source: GtzanSource,
    val_per_class: usize,
) -> Result<PreparedManifest, DataError> {
    let dir = absolute(dir.as_ref())?;
    let ext = match source {
        GtzanSource::Audio => "wav",
        GtzanSource::Images => "png",
    };
    let mut out = PreparedManifest::default();
    for class_dir in list_dir(&dir)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let mut readable = Vec::new();
        for p in list_dir(&class_dir)?
            .into_iter()
            .filter(|p| p.is_file() && has_ext(p, ext))
        {
            let check = match source {
                GtzanSource::Audio => decode_wav(&p).map(|_| ()).map_err(|e| e.to_string()),
                GtzanSource::Images => image::open(&p).map(|_| ()).map_err(|e| e.to_string()),
            };
            match check {
                Ok(()) => readable.push(p),
                Err(reason) => out.skipped.push((p, reason)),
            }
        }
        let cut = readable.len().saturating_sub(val_per_class);
        for (i, path) in readable.into_iter().enumerate() {
            out.rows.push(PreparedRow {
                path,
                label: label.clone(),
                speaker: String::new(),
                group: String::new(),
                split: if i >= cut { Split::Val } else { Split::Train },
            });
        }
    }
    if out.rows.is_empty() {
        return Err(DataError::Layout(format!(
            "{}: no {ext} files in genre sub-directories",
            dir.display()
        )));
    }
    Ok(out)
}

/// An existing `manifest.csv` inside `dir`, re-based so it can be written
/// elsewhere.
pub fn prepare_from_manifest(dir: impl AsRef<Path>) -> Result<PreparedManifest, DataError> {
    let dir = absolute(dir.as_ref())?;
    let m = read_manifest(dir.join("manifest.csv"))?;
    if m.rows.is_empty() {
        return Err(DataError::Layout(format!(
            "{}: manifest has no rows",
            dir.display()
        )));
    }
    Ok(PreparedManifest {
        rows: m
            .rows
            .iter()
            .map(|r| PreparedRow {
                path: m.resolve(r),
                label: r.label.clone(),
                speaker: r.speaker.clone(),
                group: r.group.clone(),
                split: r.split,
            })
            .collect(),
        skipped: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_wav(path: &Path) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for _ in 0..80 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn fsdd_name_parsing() {
        assert_eq!(
            parse_fsdd_name("7_jackson_32"),
            Some((7, "jackson".into(), 32))
        );
        assert_eq!(parse_fsdd_name("10_jackson_1"), None);
        assert_eq!(parse_fsdd_name("7_jackson"), None);
        assert_eq!(parse_fsdd_name("x_jackson_1"), None);
        assert_eq!(parse_fsdd_name("7__1"), None);
    }

    #[test]
    fn fsdd_split_takes_highest_indices() {
        let dir = tempfile::tempdir().unwrap();
        let rec = dir.path().join("recordings");
        std::fs::create_dir(&rec).unwrap();
        for speaker in ["ann", "bob"] {
            for digit in 0..2 {
                for idx in 0..10 {
                    touch_wav(&rec.join(format!("{digit}_{speaker}_{idx}.wav")));
                }
            }
        }
        let m = prepare_fsdd(dir.path(), 3).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Val)), (28, 12));
        // Numeric, not lexicographic, index order: 7, 8, 9 are held out.
        let val: Vec<_> = m
            .rows
            .iter()
            .filter(|r| r.split == Split::Val && r.speaker == "ann" && r.label == "0")
            .map(|r| r.path.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(val, ["0_ann_7.wav", "0_ann_8.wav", "0_ann_9.wav"]);
    }

    #[test]
    fn fsdd_bad_names_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        touch_wav(&dir.path().join("0_ann_1.wav"));
        touch_wav(&dir.path().join("hello.wav"));
        let err = prepare_fsdd(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("hello.wav"), "{err}");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(prepare_fsdd(dir.path(), 1).is_err());
        assert!(prepare_gtzan(dir.path(), GtzanSource::Audio, 21).is_err());
    }

    #[test]
    fn gtzan_skips_unreadable_and_holds_out_tail() {
        let dir = tempfile::tempdir().unwrap();
        for genre in ["blues", "jazz"] {
            let g = dir.path().join(genre);
            std::fs::create_dir(&g).unwrap();
            for i in 0..5 {
                touch_wav(&g.join(format!("{genre}.{i:05}.wav")));
            }
        }
        std::fs::write(dir.path().join("jazz").join("jazz.00002.wav"), b"garbage").unwrap();
        let m = prepare_gtzan(dir.path(), GtzanSource::Audio, 2).unwrap();
        assert_eq!(m.skipped.len(), 1);
        assert_eq!((m.count(Split::Train), m.count(Split::Val)), (5, 4));
    }

    #[test]
    fn written_paths_resolve_back() {
        let dir = tempfile::tempdir().unwrap();
        let rec = dir.path().join("rec");
        std::fs::create_dir(&rec).unwrap();
        for i in 0..3 {
            touch_wav(&rec.join(format!("4_zed_{i}.wav")));
        }
        let out_dir = dir.path().join("out");
        std::fs::create_dir(&out_dir).unwrap();
        let out = out_dir.join("manifest.csv");
        prepare_fsdd(&rec, 1).unwrap().write(&out).unwrap();
        let m = read_manifest(&out).unwrap();
        assert_eq!(m.rows[0].path, "../rec/4_zed_0.wav");
        assert!(m.resolve(&m.rows[0]).is_file());
    }
}
