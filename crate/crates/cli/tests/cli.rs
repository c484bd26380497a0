use std::path::Path;
use std::process::{Command, Output};

fn dualvla(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualvla"))
        .args(args)
        .env("DUALVLA_OUT", root)
        .output()
        .expect("binary runs")
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).into_owned();
    assert_eq!(s.lines().count(), 1, "expected one stderr line, got {s:?}");
    s.trim_end().to_string()
}

const SMALL: &[&str] = &[
    "--set",
    "data.n_episodes=40",
    "--set",
    "train.steps=6",
    "--set",
    "train.log_every=2",
    "--set",
    "train.checkpoint_every=3",
    "--set",
    "train.batch_size=2",
    "--set",
    "eval.episodes=3",
    "--set",
    "eval.seeds=0",
    "--set",
    "model.d_model=16",
    "--set",
    "head.d_model=16",
    "--quiet",
];

fn train(root: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--set"];
    let od = format!("out_dir={out}");
    args.push(&od);
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    dualvla(root, &args)
}

#[test]
fn gen_data_is_reproducible_and_reports_entropy() {
    let root = tempfile::tempdir().unwrap();
    let a = dualvla(root.path(), &["gen-data", "--alpha", "1", "--n", "60", "--seed", "7", "--out", "a.jsonl"]);
    assert!(a.status.success());
    let b = dualvla(root.path(), &["gen-data", "--alpha", "1", "--n", "60", "--seed", "7", "--out", "b.jsonl"]);
    assert!(b.status.success());
    let fa = std::fs::read(root.path().join("a.jsonl")).unwrap();
    let fb = std::fs::read(root.path().join("b.jsonl")).unwrap();
    assert_eq!(fa, fb);
    let manifest = std::fs::read_to_string(root.path().join("a.jsonl.manifest")).unwrap();
    let mut lines = manifest.lines();
    assert!(lines.next().unwrap().contains("\"format\":\"dualvla-manifest\""));
    let body: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(body["splits"]["train"]["h_l_given_v"], 0.0);
    let out = String::from_utf8_lossy(&a.stdout);
    assert!(out.lines().any(|l| l.starts_with("train") && l.contains("0.000000")));
}

#[test]
fn gen_data_ood_flag_marks_held_out_background() {
    let root = tempfile::tempdir().unwrap();
    let o = dualvla(root.path(), &["gen-data", "--alpha", "2", "--ood", "--n", "40", "--out", "d.jsonl"]);
    assert!(o.status.success());
    let manifest = std::fs::read_to_string(root.path().join("d.jsonl.manifest")).unwrap();
    let body: serde_json::Value = serde_json::from_str(manifest.lines().nth(1).unwrap()).unwrap();
    assert_eq!(body["ood_shift"], true);
    assert!(body["ood_background"].is_u64());
    assert!(body["splits"]["ood"]["episodes"].as_u64().unwrap() > 0);
}

#[test]
fn invalid_spec_names_the_field() {
    let root = tempfile::tempdir().unwrap();
    let o = dualvla(root.path(), &["gen-data", "--alpha", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let line = stderr_line(&o);
    assert!(line.starts_with("E_CONFIG: "), "{line}");
    assert!(line.contains("alpha"), "{line}");
}

#[test]
fn usage_errors_are_single_line_with_code() {
    let root = tempfile::tempdir().unwrap();
    let o = dualvla(root.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_USAGE: "));

    let o = dualvla(root.path(), &["train", "--set", "no.such.key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_CONFIG: "));

    let o = dualvla(root.path(), &["train", "--set", "missing-equals"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_USAGE: "));

    let o = dualvla(root.path(), &["eval", "--run", "nowhere"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr_line(&o).starts_with("E_IO: "));
}

#[test]
fn train_eval_diagnose_plot_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let o = train(root.path(), "run", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = root.path().join("run");
    for f in ["config.txt", "metrics.jsonl", "final.ckpt", "checkpoints/step-00000003.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().next().unwrap().contains("dualvla-metrics"));
    assert_eq!(metrics.lines().count(), 1 + 3);

    let o = dualvla(root.path(), &["eval", "--run", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.contains("expert") && l.contains("1.000")));
    for split in ["id", "ambiguous", "ood"] {
        for cond in ["full", "vision_only"] {
            assert!(out.lines().any(|l| l.starts_with(split) && l.contains(cond)), "{split} {cond}");
        }
    }
    let eval = std::fs::read_to_string(run.join("eval.jsonl")).unwrap();
    assert!(eval.lines().next().unwrap().contains("dualvla-eval"));

    let o = dualvla(root.path(), &["diagnose", "--run", "run", "--baseline", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("NLL") && out.contains("PPL") && out.contains("StdDev"));
    assert!(out.contains("this >= baseline"));
    let csv = std::fs::read_to_string(run.join("diagnose.csv")).unwrap();
    assert!(csv.starts_with("# {\"format\":\"dualvla-diagnose\""));

    let o = dualvla(root.path(), &["plot", "--run", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(run.join("metrics.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 3);
}

#[test]
fn identical_configs_give_identical_metrics() {
    let root = tempfile::tempdir().unwrap();
    assert!(train(root.path(), "a", &[]).status.success());
    assert!(train(root.path(), "b", &[]).status.success());
    let a = std::fs::read(root.path().join("a/metrics.jsonl")).unwrap();
    let b = std::fs::read(root.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    assert!(train(root.path(), "full", &[]).status.success());
    assert!(train(root.path(), "part", &[]).status.success());
    let o = train(root.path(), "part", &["--resume", "part/checkpoints/step-00000003.ckpt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(root.path().join("full/metrics.jsonl")).unwrap();
    let b = std::fs::read(root.path().join("part/metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    let a = std::fs::read(root.path().join("full/final.ckpt")).unwrap();
    let b = std::fs::read(root.path().join("part/final.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn foreign_checkpoint_is_a_contract_error() {
    let root = tempfile::tempdir().unwrap();
    assert!(train(root.path(), "a", &[]).status.success());
    assert!(train(root.path(), "b", &["--set", "train.lambda=0.5"]).status.success());
    let o = dualvla(root.path(), &["eval", "--run", "a", "--checkpoint", "b/final.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_line(&o).starts_with("E_CONTRACT: "));
}

#[test]
fn dataset_with_other_vocabulary_is_refused() {
    let root = tempfile::tempdir().unwrap();
    assert!(train(root.path(), "run", &[]).status.success());
    let g = dualvla(root.path(), &["gen-data", "--n", "20", "--set", "world.bins=8", "--out", "small.jsonl"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let data = root.path().join("small.jsonl");
    let o = dualvla(root.path(), &["eval", "--run", "run", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_line(&o).starts_with("E_CONTRACT: "));
}

#[test]
fn sweep_writes_one_run_per_value_and_a_summary() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--axis", "beta", "--values", "0,0.2", "--set", "out_dir=sw"];
    args.extend(SMALL.iter().filter(|a| **a != "--quiet"));
    let o = dualvla(root.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.path().join("sw/beta=0/final.ckpt").is_file());
    assert!(root.path().join("sw/beta=0.2/final.ckpt").is_file());
    let csv = std::fs::read_to_string(root.path().join("sw/sweep-beta.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert!(lines[0].contains("dualvla-sweep"));
    assert!(lines[1].starts_with("beta,final_total"));
    assert_eq!(lines.len(), 4);

    let o = dualvla(root.path(), &["sweep", "--axis", "gamma", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("E_USAGE: "));
}
