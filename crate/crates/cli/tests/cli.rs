use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use labelfusion::synthetic;
use labelfusion::TaskMode;

const BIN: &str = env!("CARGO_BIN_EXE_labelfusion");

struct Workspace {
    dir: tempfile::TempDir,
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

impl Workspace {
    /// A toy task with a mock score table, a training CSV and a config.
    fn new(multi_label: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mode = TaskMode::from_multi_label(multi_label);
        let (ds, scores) = synthetic::toy(12, 3, mode, 5);
        fs::write(
            dir.path().join("scores.tsv"),
            synthetic::mock_table(ds.texts().into_iter().zip(&scores)),
        )
        .unwrap();
        let mut csv = String::from("id,text,red,green,blue\n");
        for (i, row) in ds.rows().iter().enumerate() {
            let bits: Vec<&str> = row
                .target
                .as_ref()
                .unwrap()
                .bits()
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            csv.push_str(&format!("{i},{},{}\n", quote(&row.text), bits.join(",")));
        }
        fs::write(dir.path().join("train.csv"), csv).unwrap();
        let config = format!(
            "llm_provider: mock
llm:
  mock_table: scores.tsv
label_columns: [red, green, blue]
multi_label: {multi_label}
cache_dir: cache
encoder:
  dim: 16
  buckets: 2048
  lr_small: 0.05
fusion:
  hidden_sizes: [16]
  lr_high: 0.3
  epochs: 150
  train_batch_size: 4
validation_fraction: 0.0
seed: 11
paths:
  train_csv: train.csv
  eval_csv: train.csv
  runs_dir: runs
  model_out: out/model.json
"
        );
        fs::write(dir.path().join("config.yaml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("RUST_LOG")
            .output()
            .unwrap()
    }

    fn train(&self, extra: &[&str]) -> String {
        let mut args = vec!["train", "--config", "config.yaml"];
        args.extend(extra);
        let out = self.run(&args);
        assert_success(&out);
        stdout(&out).trim().to_string()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn assert_success(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn assert_fails(o: &Output, code: i32, kind: &str) -> String {
    let err = stderr(o);
    assert_eq!(o.status.code(), Some(code), "{err}");
    let line = err.lines().find(|l| l.starts_with("error[")).expect("error line");
    assert!(line.starts_with(&format!("error[{kind}]: ")), "{line}");
    line.to_string()
}

fn edit(path: &Path, from: &str, to: &str) {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.contains(from), "{from:?} not in {}", path.display());
    fs::write(path, text.replacen(from, to, 1)).unwrap();
}

#[test]
fn train_saves_model_and_prints_run_id() {
    let ws = Workspace::new(false);
    let run_id = ws.train(&[]);
    assert!(ws.path("out/model.json").is_file());
    assert!(!run_id.is_empty() && !run_id.contains(char::is_whitespace));
    assert!(ws.path("runs").join(&run_id).join("metrics.json").is_file());
    assert!(ws.path("cache/manifest.json").is_file());
}

#[test]
fn misspelled_key_is_a_config_error_naming_it() {
    let ws = Workspace::new(false);
    edit(&ws.path("config.yaml"), "label_columns", "lable_columns");
    let line = assert_fails(&ws.run(&["train", "--config", "config.yaml"]), 1, "config");
    assert!(line.contains("lable_columns"), "{line}");
}

#[test]
fn override_typo_is_a_config_error_naming_it() {
    let ws = Workspace::new(false);
    let out = ws.run(&["train", "--config", "config.yaml", "--set", "fusion.epochz=2"]);
    let line = assert_fails(&out, 1, "config");
    assert!(line.contains("epochz"), "{line}");
}

#[test]
fn missing_train_csv_is_a_data_error() {
    let ws = Workspace::new(false);
    fs::remove_file(ws.path("train.csv")).unwrap();
    assert_fails(&ws.run(&["train", "--config", "config.yaml"]), 2, "data");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let ws = Workspace::new(false);
    assert_fails(&ws.run(&["train", "--config", "nope.yaml"]), 1, "config");
}

#[test]
fn usage_errors_exit_nonzero_with_one_line() {
    let ws = Workspace::new(false);
    let out = ws.run(&["frobnicate"]);
    assert_fails(&out, 1, "usage");
    assert_eq!(stderr(&out).lines().count(), 1);
    assert_success(&ws.run(&["--help"]));
}

#[test]
fn inline_predict_prints_one_line_per_text() {
    let ws = Workspace::new(false);
    ws.train(&[]);
    let out = ws.run(&["predict", "--model", "out/model.json", "red red red"]);
    assert_success(&out);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    let labels: Vec<String> = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(labels.len(), 1);
    assert!(["red", "green", "blue"].contains(&labels[0].as_str()));

    let out = ws.run(&["predict", "--config", "config.yaml", "one", "two"]);
    assert_success(&out);
    assert_eq!(stdout(&out).lines().count(), 2);
}

#[test]
fn predict_csv_round_trip() {
    let ws = Workspace::new(true);
    ws.train(&[]);
    let out = ws.run(&[
        "predict",
        "--config",
        "config.yaml",
        "--input",
        "train.csv",
        "--output",
        "preds/p.csv",
    ]);
    assert_success(&out);
    let csv = fs::read_to_string(ws.path("preds/p.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "row,text,score_red,score_green,score_blue,decided_red,decided_green,decided_blue"
    );
    assert_eq!(lines.count(), 12);

    let to_stdout = ws.run(&["predict", "--config", "config.yaml", "--input", "train.csv"]);
    assert_success(&to_stdout);
    assert_eq!(stdout(&to_stdout), csv);
}

#[test]
fn empty_input_gives_header_only() {
    let ws = Workspace::new(false);
    ws.train(&[]);
    fs::write(ws.path("empty.csv"), "").unwrap();
    let out = ws.run(&[
        "predict",
        "-m",
        "out/model.json",
        "-i",
        "empty.csv",
        "-o",
        "empty_out.csv",
    ]);
    assert_success(&out);
    let csv = fs::read_to_string(ws.path("empty_out.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("row,text,score_red"));

    fs::write(ws.path("header_only.csv"), "text\n").unwrap();
    let out = ws.run(&["predict", "-m", "out/model.json", "-i", "header_only.csv"]);
    assert_success(&out);
    assert_eq!(stdout(&out).lines().count(), 1);
}

#[test]
fn corrupted_model_is_a_model_format_error() {
    let ws = Workspace::new(false);
    ws.train(&[]);
    let model = ws.path("out/model.json");
    let text = fs::read_to_string(&model).unwrap();
    fs::write(&model, &text[..text.len() / 2]).unwrap();
    let line = assert_fails(&ws.run(&["predict", "-m", "out/model.json", "hello"]), 1, "config");
    assert!(line.contains("model format"), "{line}");

    fs::write(&model, "{\"format\": \"something-else\"}").unwrap();
    let line = assert_fails(&ws.run(&["predict", "-m", "out/model.json", "hello"]), 1, "config");
    assert!(line.contains("model format"), "{line}");
}

#[test]
fn evaluate_overfit_model_on_its_training_data() {
    let ws = Workspace::new(false);
    ws.train(&[]);
    let out = ws.run(&[
        "evaluate",
        "--model",
        "out/model.json",
        "--data",
        "train.csv",
        "--runs-dir",
        "fresh/runs",
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("accuracy: 1.0000 (exact_match)"), "{text}");
    assert!(text.contains("macro_f1: 1.0000"), "{text}");
    let run_id = text.lines().next().unwrap().strip_prefix("run_id: ").unwrap();
    assert!(ws.path("fresh/runs").join(run_id).join("metrics.json").is_file());
}

#[test]
fn evaluate_multilabel_reports_subset_accuracy() {
    let ws = Workspace::new(true);
    ws.train(&[]);
    let out = ws.run(&["evaluate", "--config", "config.yaml"]);
    assert_success(&out);
    assert!(stdout(&out).contains("(subset_accuracy)"), "{}", stdout(&out));
}

#[test]
fn evaluate_missing_label_column_names_it() {
    let ws = Workspace::new(false);
    ws.train(&[]);
    let csv = fs::read_to_string(ws.path("train.csv")).unwrap();
    let trimmed: String = csv
        .lines()
        .map(|l| {
            let cut = l.rfind(',').unwrap();
            format!("{}\n", &l[..cut])
        })
        .collect();
    fs::write(ws.path("no_blue.csv"), trimmed).unwrap();
    let out = ws.run(&["evaluate", "-m", "out/model.json", "-d", "no_blue.csv"]);
    let line = assert_fails(&out, 2, "data");
    assert!(line.contains("blue"), "{line}");
}

#[test]
fn compare_runs() {
    let ws = Workspace::new(false);
    let a = ws.train(&["--seed", "1", "--set", "fusion.epochs=3"]);
    let b = ws.train(&["--seed", "2", "--set", "fusion.epochs=3"]);

    let out = ws.run(&["compare", "--runs-dir", "runs", &a, &a]);
    assert_success(&out);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("run_id"));
    assert_eq!(lines[1], lines[2]);

    let out = ws.run(&["compare", "--config", "config.yaml", &a, &b]);
    assert_success(&out);
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    let n = rows[0].len();
    assert_eq!(rows[0][1..n - 2], rows[1][1..n - 2]);

    let line = assert_fails(
        &ws.run(&["compare", "--runs-dir", "runs", &a, "no-such-run"]),
        2,
        "data",
    );
    assert!(line.contains("no-such-run"), "{line}");
}

#[test]
fn same_seed_gives_identical_files() {
    let ws = Workspace::new(false);
    for tag in ["a", "b"] {
        let model = format!("paths.model_out={tag}/model.json");
        ws.train(&["--seed", "3", "--set", &model]);
        let out = ws.run(&[
            "predict",
            "-m",
            &format!("{tag}/model.json"),
            "-i",
            "train.csv",
            "-o",
            &format!("{tag}/preds.csv"),
        ]);
        assert_success(&out);
    }
    for f in ["model.json", "preds.csv"] {
        let a = fs::read(ws.path("a").join(f)).unwrap();
        let b = fs::read(ws.path("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    ws.train(&["--seed", "4", "--set", "paths.model_out=c/model.json"]);
    assert_ne!(
        fs::read(ws.path("a/model.json")).unwrap(),
        fs::read(ws.path("c/model.json")).unwrap()
    );
}

#[test]
fn edited_training_data_hits_a_stale_cache() {
    let ws = Workspace::new(false);
    ws.train(&[]);
    let csv = ws.path("train.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let second = text.lines().nth(1).unwrap().to_string();
    let (head, tail) = second.split_once(",\"").unwrap();
    fs::write(&csv, text.replacen(&second, &format!("{head},\"edited {tail}"), 1)).unwrap();
    assert_fails(&ws.run(&["train", "--config", "config.yaml"]), 4, "stale-cache");

    let out = ws.run(&["train", "--config", "config.yaml", "--set", "cache_policy=warn"]);
    assert_success(&out);
    assert!(stderr(&out).contains("WARN"), "{}", stderr(&out));
}

#[test]
fn unreachable_provider_exits_3() {
    let ws = Workspace::new(false);
    let out = Command::new(BIN)
        .args([
            "train",
            "--config",
            "config.yaml",
            "--set",
            "llm_provider={provider: openai, endpoint_url: 'http://127.0.0.1:9/v1', api_key_env: LF_CLI_TEST_KEY}",
            "--set",
            "llm.max_retries=0",
            "--set",
            "cache_dir=other_cache",
        ])
        .current_dir(ws.dir.path())
        .env("LF_CLI_TEST_KEY", "sk-test")
        .output()
        .unwrap();
    assert_fails(&out, 3, "provider");
}
