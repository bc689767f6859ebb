mod common;

use std::fs;

use common::*;

#[test]
fn prepare_reports_split_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(
        &dir.path().join("recordings"),
        &[0, 1, 2],
        &["ann", "bob"],
        6,
    );
    let out = tel_ok(&[
        "prepare",
        "--dataset-dir",
        s(dir.path()),
        "--layout",
        "fsdd",
        "--out",
        s(&dir.path().join("m.csv")),
        "--val-per-speaker",
        "2",
    ]);
    assert_eq!(field(&out, "train"), "24");
    assert_eq!(field(&out, "val"), "12");
    let text = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(text.starts_with("path,label,speaker,group,split\n"));
    assert!(text.contains("recordings/0_ann_5.wav,0,ann,,val"));
}

#[test]
fn prepare_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = tel(&[
        "prepare",
        "--dataset-dir",
        s(dir.path()),
        "--layout",
        "fsdd",
        "--out",
        s(&dir.path().join("m.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_fills_run_directory() {
    let ws = workspace(&[0, 1], &["ann", "bob"], 8, 2);
    let run = ws.train("run", &["--regime", "tel", "--seed", "1"]);
    for f in [
        "config.toml",
        "metrics.csv",
        "curves.svg",
        "timing.csv",
        "best.ckpt",
        "report.toml",
        "confusion.csv",
        "groups.csv",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 6);
    assert_eq!(
        fs::read_to_string(run.join("curves.svg"))
            .unwrap()
            .matches("<polyline")
            .count(),
        4
    );
    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(
        echo.contains("regime = \"tel\"")
            && echo.contains("seed = 1")
            && echo.contains("input_shape = [16, 30]")
    );
    let confusion = fs::read_to_string(run.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 3);
}

#[test]
fn cel_on_two_digit_toy_subset() {
    // 2 digits, 5 speakers, 5 clips each: 50 clips.
    let ws = workspace(&[3, 7], &["a", "b", "c", "d", "e"], 5, 1);
    let longer = TOY_CONFIG
        .replace("max_epochs = 6", "max_epochs = 20")
        .replace("early_stop_patience = 6", "early_stop_patience = 20");
    fs::write(&ws.config, longer).unwrap();
    let run = ws.train("cel", &["--regime", "cel", "--seed", "0"]);
    let acc: f64 = toml_value(&run.join("report.toml"), "val_accuracy")
        .parse()
        .unwrap();
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn same_seed_reruns_are_identical() {
    let ws = workspace(&[0, 1], &["ann", "bob"], 8, 2);
    let a = ws.train("a", &["--regime", "tel", "--seed", "1"]);
    let b = ws.train("b", &["--regime", "tel", "--seed", "1"]);
    for f in [
        "metrics.csv",
        "best.ckpt",
        "config.toml",
        "report.toml",
        "confusion.csv",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let c = ws.train("c", &["--regime", "tel", "--seed", "2"]);
    assert_ne!(
        fs::read(a.join("best.ckpt")).unwrap(),
        fs::read(c.join("best.ckpt")).unwrap()
    );
}

#[test]
fn config_echo_and_manifest_replay_a_run() {
    let ws = workspace(&[0, 1], &["ann", "bob"], 8, 2);
    let original = ws.train("orig", &["--regime", "triplet", "--seed", "5"]);
    let replay = ws.dir.path().join("replay");
    tel_ok(&[
        "train",
        "--manifest",
        s(&ws.manifest),
        "--config",
        s(&original.join("config.toml")),
        "--out",
        s(&replay),
        "--quiet",
    ]);
    for f in ["metrics.csv", "best.ckpt", "config.toml"] {
        assert_eq!(
            fs::read(original.join(f)).unwrap(),
            fs::read(replay.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn eval_reproduces_reported_accuracy() {
    let ws = workspace(&[0, 1], &["ann", "bob"], 8, 2);
    let run = ws.train("run", &["--regime", "tel", "--seed", "3"]);
    let out = tel_ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--manifest",
        s(&ws.manifest),
        "--split",
        "val",
        "--out",
        s(&ws.dir.path().join("eval")),
    ]);
    assert_eq!(
        field(&out, "accuracy"),
        toml_value(&run.join("report.toml"), "val_accuracy")
    );
    assert_eq!(
        fs::read(run.join("confusion.csv")).unwrap(),
        fs::read(ws.dir.path().join("eval/confusion.csv")).unwrap()
    );
}

#[test]
fn eval_through_a_narrower_channel_runs() {
    let ws = workspace(&[0, 1], &["ann", "bob"], 8, 2);
    let run = ws.train("run", &["--regime", "cel", "--seed", "3"]);
    let out = tel_ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--manifest",
        s(&ws.manifest),
        "--out",
        s(&ws.dir.path().join("narrow")),
        "--resample-via",
        "2000",
    ]);
    let acc: f64 = field(&out, "accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn embed_then_self_knn_is_perfect() {
    let ws = workspace(&[0, 1, 2], &["ann", "bob"], 6, 2);
    let run = ws.train("run", &["--regime", "triplet", "--seed", "4"]);
    let ckpt = run.join("best.ckpt");
    let tsv = ws.dir.path().join("emb.tsv");
    tel_ok(&[
        "embed",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&ws.manifest),
        "--split",
        "val",
        "--out",
        s(&tsv),
    ]);
    let text = fs::read_to_string(&tsv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 12);
    assert!(lines.iter().all(|l| l.split('\t').count() == 3 + 8));
    let again = ws.dir.path().join("emb2.tsv");
    tel_ok(&[
        "embed",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&ws.manifest),
        "--split",
        "val",
        "--out",
        s(&again),
    ]);
    assert_eq!(fs::read(&tsv).unwrap(), fs::read(&again).unwrap());

    let knn = |extra: &[&str]| {
        let mut args = vec![
            "knn",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&ws.manifest),
        ];
        args.extend_from_slice(extra);
        field(&tel_ok(&args), "knn_accuracy")
            .parse::<f64>()
            .unwrap()
    };
    assert_eq!(
        knn(&[
            "--reference-split",
            "val",
            "--query-split",
            "val",
            "-k",
            "1"
        ]),
        1.0
    );
    let loo = knn(&[
        "--reference-split",
        "train",
        "--query-split",
        "train",
        "--exclude-self",
    ]);
    assert!((0.0..=1.0).contains(&loo));
    let cross = knn(&["--metric", "cosine"]);
    assert!((0.0..=1.0).contains(&cross));
}

#[test]
fn disjoint_class_list_is_rejected() {
    let ws = workspace(&[0, 1], &["ann", "bob"], 6, 2);
    let run = ws.train("run", &["--regime", "cel"]);
    let other = workspace(&[5, 6], &["ann", "bob"], 6, 2);
    let out = tel(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--manifest",
        s(&other.manifest),
        "--out",
        s(&ws.dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[0, 1]") && err.contains("[5, 6]"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = tel(&[
        "train",
        "--manifest",
        s(&dir.path().join("nope.csv")),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.csv"));
    assert_eq!(tel(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        tel(&["train", "--manifest", "m", "--out", "r", "--regime", "xyz"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(tel(&[]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let ws = workspace(&[0, 1], &["ann", "bob"], 4, 1);
    let bad = ws.dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = tel(&[
        "train",
        "--manifest",
        s(&ws.manifest),
        "--config",
        s(&bad),
        "--out",
        s(&ws.dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn divergence_exits_with_three() {
    let ws = workspace(&[0, 1], &["ann", "bob"], 4, 1);
    fs::write(&ws.config, TOY_CONFIG.replace("lr = 0.01", "lr = 1e30")).unwrap();
    let out = tel(&[
        "train",
        "--manifest",
        s(&ws.manifest),
        "--config",
        s(&ws.config),
        "--out",
        s(&ws.dir.path().join("r")),
        "--quiet",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
