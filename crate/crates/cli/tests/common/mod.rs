//! Synthetic spoken-digit corpus and helpers for driving the `tel` binary.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SAMPLE_RATE: u32 = 8000;

/// Small front end so runs take seconds: 16 mel bins by 30 frames.
pub const TOY_CONFIG: &str = r#"
[features]
sample_rate = 8000
window_length = 256
hop_length = 128
n_fft = 256
n_mels = 16
duration_s = 0.5

[model]
embedding_dim = 8
conv_blocks = [{ out_channels = 4, kernel = 3, stride = 1, pool = 2 }]

[train]
lr = 0.01
batch_size = 8
max_epochs = 6
early_stop_patience = 6
"#;

/// Writes `{digit}_{speaker}_{index}.wav` files. Each digit is a tone at
/// its own pitch; speakers shift the pitch and loudness slightly.
pub fn write_corpus(dir: &Path, digits: &[u8], speakers: &[&str], per_pair: u32) {
    std::fs::create_dir_all(dir).unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    for &d in digits {
        for (s, speaker) in speakers.iter().enumerate() {
            for i in 0..per_pair {
                let path = dir.join(format!("{d}_{speaker}_{i}.wav"));
                let mut w = hound::WavWriter::create(path, spec).unwrap();
                let f0 = 300.0 + 450.0 * d as f64 + 15.0 * s as f64 + 4.0 * i as f64;
                let amp = 0.3 + 0.05 * s as f64;
                let n = (SAMPLE_RATE as f64 * (0.35 + 0.01 * i as f64)) as usize;
                for t in 0..n {
                    let x = t as f64 / SAMPLE_RATE as f64;
                    let v = amp * (2.0 * std::f64::consts::PI * f0 * x).sin()
                        + 0.1 * amp * (2.0 * std::f64::consts::PI * 2.0 * f0 * x).sin();
                    w.write_sample((v * 32767.0) as i16).unwrap();
                }
                w.finalize().unwrap();
            }
        }
    }
}

pub fn tel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tel"))
        .args(args)
        .output()
        .expect("spawn tel")
}

pub fn tel_ok(args: &[&str]) -> String {
    let out = tel(args);
    assert!(
        out.status.success(),
        "tel {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A prepared toy corpus: audio, manifest and a config file.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub manifest: PathBuf,
    pub config: PathBuf,
}

pub fn workspace(
    digits: &[u8],
    speakers: &[&str],
    per_pair: u32,
    val_per_speaker: usize,
) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let audio = dir.path().join("recordings");
    write_corpus(&audio, digits, speakers, per_pair);
    let manifest = dir.path().join("manifest.csv");
    let config = dir.path().join("toy.toml");
    std::fs::write(&config, TOY_CONFIG).unwrap();
    tel_ok(&[
        "prepare",
        "--dataset-dir",
        s(dir.path()),
        "--layout",
        "fsdd",
        "--out",
        s(&manifest),
        "--val-per-speaker",
        &val_per_speaker.to_string(),
    ]);
    Workspace {
        dir,
        manifest,
        config,
    }
}

impl Workspace {
    pub fn train(&self, run: &str, extra: &[&str]) -> PathBuf {
        let out = self.dir.path().join(run);
        let mut args = vec![
            "train",
            "--manifest",
            s(&self.manifest),
            "--config",
            s(&self.config),
            "--out",
            s(&out),
            "--quiet",
        ];
        args.extend_from_slice(extra);
        tel_ok(&args);
        out
    }
}

/// `key = value` lookup in a flat TOML file.
pub fn toml_value(path: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_owned))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
}

/// Value after `key=` in a line of command output.
pub fn field(stdout: &str, key: &str) -> String {
    stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {stdout}"))
        .to_owned()
}
