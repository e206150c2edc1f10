use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# shrunken pipeline for fast tests
size_pretrain = 96
size_generic_train = 64
size_generic_val = 8
size_generic_test = 8
size_replay = 16
size_concept_val = 8
size_concept_test = 12
pretrain_epochs = 2
epochs = 2
d_model = 16
d_ff = 32
";

fn kreplay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kreplay"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kreplay(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = kreplay(&["gen-data", "--override", "no_such_key=1", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nepochs = many\n").unwrap();
    let out = kreplay(&["gen-data", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = kreplay(&["gen-data"]);
    assert_eq!(code(&out), 2, "missing --out");
}

#[test]
fn missing_artifacts_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = kreplay(&["pretrain", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    let out = kreplay(&["finetune", "--base", p(&missing.join("best.ckpt")), "--out", p(dir.path())]);
    assert_eq!(code(&out), 4);
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let (cfg, data) = (p(&cfg), root.join("data"));
    let common = ["--config", cfg, "--data", p(&data)];
    let with = |cmd: &str, extra: &[&str]| -> String {
        let mut args = vec![cmd];
        args.extend(common);
        args.extend(extra);
        ok(&args)
    };

    let summary = with("gen-data", &["--out", p(&data)]);
    assert!(summary.contains("concept_test: 12"), "{summary}");
    with("pretrain", &["--out", p(&root.join("base"))]);
    let base = root.join("base/best.ckpt");
    let ft_line = with("finetune", &["--base", p(&base), "--out", p(&root.join("ft"))]);
    assert!(ft_line.starts_with("steps=16 "), "{ft_line}");
    let teacher = root.join("ft/best.ckpt");

    // replay switched off and zero weights leaves plain fine-tuning
    with(
        "kreplay-train",
        &[
            "--base", p(&base), "--teacher", p(&teacher), "--out", p(&root.join("kr0")),
            "--override", "use_replay=false", "--override", "lambda_k=0", "--override", "lambda_d=0",
        ],
    );
    for f in ["best.ckpt", "epoch-2.ckpt", "loss.csv"] {
        assert_eq!(
            std::fs::read(root.join("ft").join(f)).unwrap(),
            std::fs::read(root.join("kr0").join(f)).unwrap(),
            "{f}"
        );
    }

    with("kreplay-train", &["--base", p(&base), "--teacher", p(&teacher), "--out", p(&root.join("kr"))]);
    let ckpt = root.join("kr/best.ckpt");
    let report = with("eval", &["--checkpoint", p(&ckpt), "--out", p(&root.join("eval"))]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    for block in ["generic", "seen", "unseen"] {
        assert!(report[block]["cider"].is_number(), "{block}");
    }
    assert!(report["unseen"]["rec"].is_number());
    assert!(root.join("eval/report.csv").exists());

    let decode = |extra: &[&str]| -> Vec<serde_json::Value> {
        let mut e = vec!["--checkpoint", p(&ckpt), "--override", "image_ids=0,2,5"];
        e.extend(extra);
        with("decode", &e)
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let beam = decode(&["--out", p(&root.join("dec"))]);
    assert_eq!(beam.len(), 3);
    assert_eq!(beam[1]["image_id"], 2);
    assert_eq!(beam[0]["method"], "beam");
    assert_eq!(beam[0]["b"], 5);
    let saved = std::fs::read_to_string(root.join("dec/captions.jsonl")).unwrap();
    assert_eq!(saved.lines().count(), 3);

    let greedy = decode(&["--override", "eval_method=greedy"]);
    let narrow = decode(&["--override", "eval_beam_width=1"]);
    assert_eq!(greedy[0]["b"], 1);
    for (g, n) in greedy.iter().zip(&narrow) {
        assert_eq!(g["caption"], n["caption"]);
        assert_eq!(g["logprob"], n["logprob"]);
    }

    let mut args = vec!["decode"];
    args.extend(common);
    args.extend(["--checkpoint", p(&ckpt), "--override", "image_ids=999"]);
    assert_eq!(code(&kreplay(&args)), 4);
}
