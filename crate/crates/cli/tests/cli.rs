use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use microcor_cli::{resolve_config, Cli};
use microcor_core::eval::{read_report, REPORT_JSONL};

const SMALL: &str = "\
# tiny pipeline, seconds not minutes
[data]
groups = 4
train = 96
test = 32
golden = 8

[pretrain]
epochs = 2

[encoder]
epochs = 2

[stage1]
epochs = 1

[stage2]
epochs = 2

[xi]
epochs = 1

[generate]
max_new_tokens = 6
";

fn microcor(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microcor"))
        .args(args)
        .env("MICROCOR_OUT", out)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = microcor(&["--set", "stage3.epochs=1", "datagen"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage3.epochs"));

    let file = dir.path().join("bad.toml");
    fs::write(&file, "[lm]\nwidth = 3\n").unwrap();
    let o = microcor(&["--config", file.to_str().unwrap(), "datagen"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lm.width"));
}

#[test]
fn malformed_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train-retriever", "--stage", "3"][..],
        &["eval-commenting", "--mode", "telepathy"],
        &["no-such-command"],
        &["eval-retrieval", "--k", "0"],
        &["--set", "pretrain.lr=fast", "pretrain-lm"],
    ] {
        let o = microcor(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        let line = stderr(&o);
        let json: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(json["error"], "config");
    }
}

#[test]
fn missing_artifact_exits_1_with_a_failure_marker() {
    let dir = tempfile::tempdir().unwrap();
    let o = microcor(&["build-index"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let json: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(json["error"], "runtime");
    assert_eq!(json["command"], "build-index");
    assert!(dir.path().join("build-index.failed").exists());
}

#[test]
fn flags_beat_environment_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "out = from-file\nseed = 4\n[stage2]\nepochs = 9\n").unwrap();
    let f = file.to_str().unwrap();

    let cli = Cli::parse_from(["microcor", "--config", f, "datagen"]);
    let cfg = resolve_config(&cli, None).unwrap();
    assert_eq!(cfg.out, Path::new("from-file"));
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.stage2.epochs, 9);

    let cfg = resolve_config(&cli, Some("from-env".into())).unwrap();
    assert_eq!(cfg.out, Path::new("from-env"));

    let cli = Cli::parse_from(["microcor", "--config", f, "--set", "out=from-set", "--set", "stage2.epochs=2", "datagen"]);
    let cfg = resolve_config(&cli, Some("from-env".into())).unwrap();
    assert_eq!(cfg.out, Path::new("from-set"));
    assert_eq!(cfg.stage2.epochs, 2);

    let cli = Cli::parse_from(["microcor", "--config", f, "--set", "out=from-set", "--out", "from-flag", "--seed", "11", "datagen"]);
    let cfg = resolve_config(&cli, Some("from-env".into())).unwrap();
    assert_eq!(cfg.out, Path::new("from-flag"));
    assert_eq!(cfg.seed, 11);

    let cli = Cli::parse_from(["microcor", "eval-retrieval", "--k", "2,3"]);
    assert_eq!(resolve_config(&cli, None).unwrap().ks, vec![2, 3]);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = microcor(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();

    let o = microcor(&["--config", c, "repro-all"], out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let report = read_report(&out.join(REPORT_JSONL)).unwrap();
    let modes: Vec<&str> = report.retrieval.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, ["zero-shot", "w/o adapter", "fused"]);
    let modes: Vec<&str> = report.commenting.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, ["no-retrieval", "rag", "unicorn", "oracle"]);
    assert!(out.join("report.txt").exists());

    let freeze = fs::read_to_string(out.join("freeze.jsonl")).unwrap();
    assert!(freeze.lines().count() >= 4);
    assert!(freeze.lines().all(|l| l.contains("\"identical\":true")));
    for m in ["lm", "encoder", "retriever-stage1", "retriever", "retriever-ablation", "entity-adapter"] {
        assert!(out.join("models").join(format!("{m}.ucrn")).exists(), "{m}");
    }

    // Re-evaluating one mode keeps the other rows.
    let o = microcor(&["--config", c, "eval-commenting", "--mode", "rag"], out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_report(&out.join(REPORT_JSONL)).unwrap(), report);

    let queries = out.join("queries.jsonl");
    let test = fs::read_to_string(out.join("data/examples.jsonl")).unwrap();
    let three: String = test.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(&queries, three).unwrap();
    let o = microcor(&["--config", c, "generate", "--query", queries.to_str().unwrap()], out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = fs::read_to_string(out.join("transcripts/generate.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    // An index built from other parameters is refused.
    fs::copy(out.join("models/retriever-ablation.ucrn"), out.join("models/retriever.ucrn")).unwrap();
    let o = microcor(&["--config", c, "generate", "--query", queries.to_str().unwrap()], out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("build-index"));
}
