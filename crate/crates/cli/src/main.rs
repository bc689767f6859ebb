//! `tel`: prepare manifests, train, evaluate, export embeddings, run kNN.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use tel_core::audio::FeatureConfig;
use tel_core::config::RunConfigFile;
use tel_core::data::{
    load_dataset, prepare_from_manifest, prepare_fsdd, prepare_gtzan, read_manifest, Dataset,
    GtzanSource, LoadOptions, Manifest, Split, FSDD_DEFAULT_VAL_PER_SPEAKER, GTZAN_VAL_PER_CLASS,
};
use tel_core::eval::{
    accuracy_of, emit_curves, evaluate, export_embeddings, infer, knn_classify, EvalReport,
    KnnMetric, SelfMatch,
};
use tel_core::model::{load_checkpoint, Model};
use tel_core::train::{train, Regime, RunReport, TrainError, TrainOptions};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tel",
    version,
    about = "Joint cross-entropy and triplet training for audio classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Fsdd,
    Gtzan,
    Manifest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Audio,
    Images,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    /// Validation and test together.
    Union,
}

impl SplitArg {
    fn splits(self) -> &'static [Split] {
        match self {
            SplitArg::Train => &[Split::Train],
            SplitArg::Val => &[Split::Val],
            SplitArg::Test => &[Split::Test],
            SplitArg::Union => &[Split::Val, Split::Test],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset directory and write a manifest CSV.
    Prepare {
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long, value_enum)]
        layout: Layout,
        #[arg(long)]
        out: PathBuf,
        /// FSDD: trailing recordings per (speaker, digit) sent to validation.
        #[arg(long, default_value_t = FSDD_DEFAULT_VAL_PER_SPEAKER)]
        val_per_speaker: usize,
        /// GTZAN: trailing files per genre sent to validation.
        #[arg(long, default_value_t = GTZAN_VAL_PER_CLASS)]
        val_per_class: usize,
        /// GTZAN: read raw audio or rendered spectrogram images.
        #[arg(long, value_enum, default_value = "audio")]
        source: Source,
    },
    /// Train a model and fill a run directory.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Run config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.regime`.
        #[arg(long)]
        regime: Option<Regime>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint: confusion matrix, group report, accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Feature config; defaults to `config.toml` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resample audio through this rate before feature extraction.
        #[arg(long)]
        resample_via: Option<u32>,
    },
    /// Write embeddings as TSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Nearest-neighbour accuracy of one split against another.
    Knn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        reference_split: SplitArg,
        #[arg(long, value_enum, default_value = "val")]
        query_split: SplitArg,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: MetricArg,
        #[arg(short, default_value_t = 1)]
        k: usize,
        /// Leave each query out of its own neighbour search (needs equal splits).
        #[arg(long)]
        exclude_self: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

fn data(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_DATA,
        error: error.into(),
    }
}

fn from_train(error: TrainError) -> Failure {
    let code = match &error {
        e if e.is_numerical() => EXIT_NUMERICAL,
        TrainError::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    };
    Failure {
        code,
        error: error.into(),
    }
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("{what} {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Prepare {
            dataset_dir,
            layout,
            out,
            val_per_speaker,
            val_per_class,
            source,
        } => cmd_prepare(
            &dataset_dir,
            layout,
            &out,
            val_per_speaker,
            val_per_class,
            source,
        ),
        Command::Train {
            manifest,
            config,
            regime,
            seed,
            out,
            quiet,
        } => cmd_train(&manifest, config.as_deref(), regime, seed, &out, quiet),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
            config,
            resample_via,
        } => cmd_eval(
            &checkpoint,
            &manifest,
            split,
            &out,
            config.as_deref(),
            resample_via,
        ),
        Command::Embed {
            checkpoint,
            manifest,
            split,
            out,
            config,
        } => cmd_embed(&checkpoint, &manifest, split, &out, config.as_deref()),
        Command::Knn {
            checkpoint,
            manifest,
            reference_split,
            query_split,
            metric,
            k,
            exclude_self,
            config,
        } => cmd_knn(
            &checkpoint,
            &manifest,
            reference_split,
            query_split,
            metric,
            k,
            exclude_self,
            config.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_prepare(
    dir: &Path,
    layout: Layout,
    out: &Path,
    val_per_speaker: usize,
    val_per_class: usize,
    source: Source,
) -> CmdResult {
    if !dir.is_dir() {
        return Err(usage(anyhow!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let prepared = match layout {
        Layout::Fsdd => prepare_fsdd(dir, val_per_speaker),
        Layout::Gtzan => {
            let source = match source {
                Source::Audio => GtzanSource::Audio,
                Source::Images => GtzanSource::Images,
            };
            prepare_gtzan(dir, source, val_per_class)
        }
        Layout::Manifest => prepare_from_manifest(dir),
    }
    .map_err(data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(data)?;
    }
    prepared.write(out).map_err(data)?;
    for (path, reason) in &prepared.skipped {
        eprintln!("skipped {}: {reason}", path.display());
    }
    println!(
        "train={} val={} test={} skipped={}",
        prepared.count(Split::Train),
        prepared.count(Split::Val),
        prepared.count(Split::Test),
        prepared.skipped.len()
    );
    Ok(())
}

fn open_manifest(path: &Path) -> Result<Manifest, Failure> {
    require_file(path, "manifest")?;
    read_manifest(path).map_err(data)
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile, Failure> {
    match path {
        Some(p) => {
            require_file(p, "config")?;
            RunConfigFile::load(p).map_err(usage)
        }
        None => Ok(RunConfigFile::default()),
    }
}

fn report_toml(report: &RunReport, seed: u64, final_eval: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "regime = \"{}\"", report.regime).unwrap();
    writeln!(out, "seed = {seed}").unwrap();
    writeln!(out, "epochs_run = {}", report.rows.len()).unwrap();
    writeln!(out, "stop_reason = \"{}\"", report.stop).unwrap();
    if let Some(row) = report.best_row() {
        writeln!(out, "best_epoch = {}", row.epoch).unwrap();
        writeln!(out, "best_val_loss = {:?}", row.val.total).unwrap();
        writeln!(out, "best_epoch_val_acc = {:?}", row.val_acc).unwrap();
    }
    writeln!(out, "val_accuracy = {:?}", final_eval.accuracy).unwrap();
    writeln!(out, "val_mean_cel = {:?}", final_eval.mean_cel).unwrap();
    writeln!(out, "val_mean_triplet = {:?}", final_eval.mean_triplet).unwrap();
    writeln!(
        out,
        "optimizer_mining_calls = {}",
        report.optimizer_mining_calls
    )
    .unwrap();
    writeln!(out, "skipped_batches = {}", report.skipped_batches).unwrap();
    out
}

fn cmd_train(
    manifest_path: &Path,
    config: Option<&Path>,
    regime: Option<Regime>,
    seed: Option<u64>,
    out: &Path,
    quiet: bool,
) -> CmdResult {
    let manifest = open_manifest(manifest_path)?;
    let mut cfg = load_config(config)?;
    if let Some(r) = regime {
        cfg.train.regime = r;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let class_names = manifest.class_names();
    let cfg = cfg.resolve(class_names.len()).map_err(usage)?;
    let load = |split: Split| {
        load_dataset(
            &manifest,
            &[split],
            &class_names,
            &cfg.features,
            LoadOptions::default(),
        )
        .map_err(data)
    };
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;

    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(data)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let mut model: Model<f32> = Model::init(cfg.model.clone(), cfg.train.seed)
        .and_then(|m| m.with_class_names(class_names.clone()))
        .map_err(usage)?;
    let ckpt = out.join("best.ckpt");
    let opts = TrainOptions {
        checkpoint: Some(&ckpt),
        progress: !quiet,
    };
    let report = train(&mut model, &train_set, &val_set, &cfg.train, &opts).map_err(from_train)?;
    if report.rows.is_empty() {
        return Err(usage(anyhow!("max_epochs is 0; nothing to train")));
    }

    emit_curves(&report, out.join("metrics.csv"), out.join("curves.svg")).map_err(data)?;
    let mut timing = String::from("epoch,wall_time_s\n");
    for r in &report.rows {
        writeln!(timing, "{},{:.3}", r.epoch, r.wall_time_s).unwrap();
    }
    write_file(&out.join("timing.csv"), &timing)?;

    let final_eval = evaluate(&model, &val_set, &cfg.train.eval_options()).map_err(data)?;
    write_file(&out.join("confusion.csv"), &final_eval.confusion.to_csv())?;
    write_file(&out.join("groups.csv"), &final_eval.groups.to_text())?;
    write_file(
        &out.join("report.toml"),
        &report_toml(&report, cfg.train.seed, &final_eval),
    )?;
    println!(
        "regime={} epochs={} stop={} best_epoch={} val_accuracy={:.4}",
        report.regime,
        report.rows.len(),
        report.stop,
        report.best_epoch.unwrap_or(0),
        final_eval.accuracy
    );
    Ok(())
}

/// Checkpoint plus the feature settings it was trained with.
fn open_checkpoint(
    checkpoint: &Path,
    config: Option<&Path>,
) -> Result<(Model<f32>, RunConfigFile), Failure> {
    require_file(checkpoint, "checkpoint")?;
    let model: Model<f32> = load_checkpoint(checkpoint).map_err(data)?;
    let sibling = checkpoint.parent().map(|p| p.join("config.toml"));
    let cfg = match (config, sibling) {
        (Some(p), _) => load_config(Some(p))?,
        (None, Some(s)) if s.is_file() => load_config(Some(&s))?,
        _ => RunConfigFile::default(),
    };
    let grid = (cfg.features.n_mels, cfg.features.n_frames());
    if grid != model.config.input_shape {
        return Err(usage(anyhow!(
            "feature config gives a {}x{} grid but the checkpoint expects {}x{}",
            grid.0,
            grid.1,
            model.config.input_shape.0,
            model.config.input_shape.1
        )));
    }
    Ok((model, cfg))
}

fn check_classes(model: &Model<f32>, manifest: &Manifest) -> Result<Vec<String>, Failure> {
    let names = manifest.class_names();
    if names != model.class_names {
        return Err(data(anyhow!(
            "class list mismatch: checkpoint has [{}], manifest has [{}]",
            model.class_names.join(", "),
            names.join(", ")
        )));
    }
    Ok(names)
}

fn load_split(
    manifest: &Manifest,
    split: SplitArg,
    classes: &[String],
    features: &FeatureConfig,
    opts: LoadOptions,
) -> Result<Dataset, Failure> {
    load_dataset(manifest, split.splits(), classes, features, opts).map_err(data)
}

fn cmd_eval(
    checkpoint: &Path,
    manifest_path: &Path,
    split: SplitArg,
    out: &Path,
    config: Option<&Path>,
    resample_via: Option<u32>,
) -> CmdResult {
    let manifest = open_manifest(manifest_path)?;
    let (model, cfg) = open_checkpoint(checkpoint, config)?;
    let classes = check_classes(&model, &manifest)?;
    let opts = LoadOptions { resample_via };
    let set = load_split(&manifest, split, &classes, &cfg.features, opts)?;
    let report = evaluate(&model, &set, &cfg.train.eval_options()).map_err(data)?;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(data)?;
    write_file(&out.join("confusion.csv"), &report.confusion.to_csv())?;
    write_file(&out.join("groups.csv"), &report.groups.to_text())?;
    print!("{}", report.groups.to_text());
    println!(
        "examples={} accuracy={:?} mean_cel={:?} mean_triplet={:?}",
        set.len(),
        report.accuracy,
        report.mean_cel,
        report.mean_triplet
    );
    Ok(())
}

fn cmd_embed(
    checkpoint: &Path,
    manifest_path: &Path,
    split: SplitArg,
    out: &Path,
    config: Option<&Path>,
) -> CmdResult {
    let manifest = open_manifest(manifest_path)?;
    let (model, cfg) = open_checkpoint(checkpoint, config)?;
    let classes = check_classes(&model, &manifest)?;
    let set = load_split(
        &manifest,
        split,
        &classes,
        &cfg.features,
        LoadOptions::default(),
    )?;
    export_embeddings(&model, &set, out, cfg.train.batch_size).map_err(data)?;
    println!(
        "rows={} dim={} out={}",
        set.len(),
        model.config.embedding_dim,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_knn(
    checkpoint: &Path,
    manifest_path: &Path,
    reference: SplitArg,
    query: SplitArg,
    metric: MetricArg,
    k: usize,
    exclude_self: bool,
    config: Option<&Path>,
) -> CmdResult {
    if exclude_self && reference != query {
        return Err(usage(anyhow!(
            "--exclude-self needs the reference and query splits to be equal"
        )));
    }
    let manifest = open_manifest(manifest_path)?;
    let (model, cfg) = open_checkpoint(checkpoint, config)?;
    let classes = check_classes(&model, &manifest)?;
    let batch = cfg.train.batch_size;
    let ref_set = load_split(
        &manifest,
        reference,
        &classes,
        &cfg.features,
        LoadOptions::default(),
    )?;
    let (ref_emb, _) = infer(&model, &ref_set.examples, batch).map_err(data)?;
    let (query_set, query_emb) = if reference == query {
        (ref_set.clone(), ref_emb.clone())
    } else {
        let set = load_split(
            &manifest,
            query,
            &classes,
            &cfg.features,
            LoadOptions::default(),
        )?;
        let (emb, _) = infer(&model, &set.examples, batch).map_err(data)?;
        (set, emb)
    };
    let metric = match metric {
        MetricArg::Euclidean => KnnMetric::Euclidean,
        MetricArg::Cosine => KnnMetric::Cosine,
    };
    let self_match = if exclude_self {
        SelfMatch::Exclude
    } else {
        SelfMatch::Allow
    };
    let predicted = knn_classify(
        &ref_emb,
        &ref_set.labels(),
        &query_emb,
        k,
        metric,
        self_match,
    )
    .map_err(usage)?;
    let acc = accuracy_of(&predicted, &query_set.labels());
    println!(
        "references={} queries={} k={k} knn_accuracy={acc:?}",
        ref_set.len(),
        query_set.len()
    );
    Ok(())
}
