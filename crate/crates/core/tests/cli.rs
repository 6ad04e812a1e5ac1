use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cuts::imgio::{read_label_map, write_label_map, LabelMap};
use tempfile::TempDir;

fn cuts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cuts")).args(args).env("CUTS_THREADS", "1").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = r#"{
  "seed": 3,
  "train": { "epochs": 2 },
  "arch": { "channel_widths": [4, 4, 6, 8], "embed_dim": 8 },
  "mine": { "anchors_per_image": 24 },
  "io": { "resize": [32, 32] }
}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(images: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        fs::write(f.path("cfg.json"), SMALL).unwrap();
        if images > 0 {
            let o = cuts(&["synth", "--out", p(&f.path("data")), "--n", &images.to_string(), "--seed", "5"]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        }
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let cfg = self.path("cfg.json");
        let mut args = vec!["train", "--config", p(&cfg)];
        let data = self.path("data");
        let out = self.path(out);
        args.extend(["--data", p(&data), "--out", p(&out)]);
        args.extend(extra);
        cuts(&args)
    }
}

#[test]
fn train_on_empty_directory_is_a_data_error() {
    let f = Fixture::new(0);
    fs::create_dir_all(f.path("data")).unwrap();
    assert_eq!(code(&f.train("m.bin", &[])), 3);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let f = Fixture::new(1);
    fs::write(f.path("cfg.json"), r#"{"train": {"lamda": 0.1}}"#).unwrap();
    let o = f.train("m.bin", &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn zero_epochs_still_writes_checkpoint() {
    let f = Fixture::new(1);
    fs::write(f.path("cfg.json"), SMALL.replace(r#""epochs": 2"#, r#""epochs": 0"#)).unwrap();
    assert_eq!(code(&f.train("m.bin", &[])), 0);
    assert!(f.path("m.bin").exists());
}

#[test]
fn history_has_one_record_per_epoch() {
    let f = Fixture::new(2);
    assert_eq!(code(&f.train("m.bin", &[])), 0);
    let history = fs::read_to_string(f.path("m.bin.history.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for r in &records {
        let c = r["lc"].as_f64().unwrap();
        let rec = r["lr"].as_f64().unwrap();
        let comb = r["combined"].as_f64().unwrap();
        assert!((comb - (0.01 * c + 0.99 * rec)).abs() < 1e-6);
    }
}

#[test]
fn segment_writes_one_map_per_selector_and_is_deterministic() {
    let f = Fixture::new(2);
    assert_eq!(code(&f.train("m.bin", &[])), 0);
    let run = |out: &str| {
        let o = cuts(&[
            "segment",
            "--config",
            p(&f.path("cfg.json")),
            "--model",
            p(&f.path("m.bin")),
            "--data",
            p(&f.path("data/synth_0000.png")),
            "--out",
            p(&f.path(out)),
            "--selectors",
            "persistent,k3,count:4",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("seg_a");
    run("seg_b");
    for tag in ["persistent", "k3", "count-4"] {
        let a = fs::read(f.path(&format!("seg_a/synth_0000.{tag}.lbl"))).unwrap();
        let b = fs::read(f.path(&format!("seg_b/synth_0000.{tag}.lbl"))).unwrap();
        assert_eq!(a, b, "{tag}");
        assert!(f.path(&format!("seg_a/synth_0000.{tag}.png")).exists());
    }
    assert!(f.path("seg_a/synth_0000.trace.json").exists());
}

#[test]
fn eval_summary_is_the_mean_over_pairs() {
    let f = Fixture::new(0);
    let (pred, gt) = (f.path("pred"), f.path("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    let truth = LabelMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
    let cases = [vec![1, 1, 0, 0], vec![1, 0, 0, 0], vec![0, 0, 1, 1]];
    let dices = [1.0, 2.0 / 3.0, 0.0];
    for (i, c) in cases.iter().enumerate() {
        write_label_map(&LabelMap::new(1, 4, c.clone()).unwrap(), pred.join(format!("m{i}.lbl"))).unwrap();
        write_label_map(&truth, gt.join(format!("m{i}.lbl"))).unwrap();
    }
    let out = f.path("report.jsonl");
    let o = cuts(&["eval", "--data", p(&pred), "--gt", p(&gt), "--out", p(&out), "--mode", "binary"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    let mean = last["summary"]["mean"]["dice"].as_f64().unwrap();
    let expect = dices.iter().sum::<f64>() / 3.0;
    assert!((mean - expect).abs() < 1e-12, "{mean} vs {expect}");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn eval_with_mismatched_shapes_fails() {
    let f = Fixture::new(0);
    write_label_map(&LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap(), f.path("a.lbl")).unwrap();
    write_label_map(&LabelMap::new(3, 2, vec![0; 6]).unwrap(), f.path("b.lbl")).unwrap();
    let out = f.path("r.jsonl");
    let o = cuts(&["eval", "--data", p(&f.path("a.lbl")), "--gt", p(&f.path("b.lbl")), "--out", p(&out)]);
    assert_ne!(code(&o), 0);
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let f = Fixture::new(1);
    fs::write(
        f.path("cfg.json"),
        SMALL.replace(r#""epochs": 2"#, r#""epochs": 1"#).replace(r#""resize": [32, 32]"#, r#""heldout_images": 2"#),
    )
    .unwrap();
    let csv = f.path("sweep.csv");
    let o = cuts(&[
        "sweep-lambda",
        "--config",
        p(&f.path("cfg.json")),
        "--data",
        p(&f.path("data")),
        "--lambdas",
        "0,0.5,0.5",
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda,dice,hausdorff,ssim,ergas,rmse");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2], lines[3]);
}

#[test]
fn synth_writes_requested_count() {
    let f = Fixture::new(0);
    let o = cuts(&["synth", "--out", p(&f.path("none")), "--n", "0"]);
    assert_eq!(code(&o), 0);
    let o = cuts(&["synth", "--out", p(&f.path("two")), "--n", "2", "--seed", "9"]);
    assert_eq!(code(&o), 0);
    let lm = read_label_map(f.path("two/synth_0001.lbl")).unwrap();
    let mut labels = lm.distinct();
    labels.sort_unstable();
    assert_eq!(labels, vec![0, 1]);
    assert!(f.path("two/synth_0001.png").exists());
    assert!(!f.path("two/synth_0002.png").exists());
}

#[test]
fn bad_kind_is_a_config_error() {
    let f = Fixture::new(0);
    assert_eq!(code(&cuts(&["synth", "--out", p(&f.path("x")), "--kind", "stripes"])), 2);
}
