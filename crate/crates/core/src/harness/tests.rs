use super::*;
use crate::worldgen::Split;

fn tiny(out: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("model.d_model", "16"),
        ("model.n_heads", "2"),
        ("model.n_layers", "1"),
        ("model.num_queries", "2"),
        ("model.max_seq_len", "40"),
        ("head.d_model", "16"),
        ("head.n_heads", "2"),
        ("head.n_blocks", "1"),
        ("head.time_features", "4"),
        ("data.n_episodes", "20"),
        ("train.steps", "12"),
        ("train.batch_size", "4"),
        ("train.checkpoint_every", "5"),
        ("train.log_every", "1"),
        ("eval.episodes", "3"),
        ("eval.seeds", "0,1"),
        ("eval.euler_steps", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c.out_dir = out.to_path_buf();
    c
}

#[test]
fn config_text_round_trips_byte_identically() {
    let mut c = RunConfig::default();
    c.set("train.lr", "0.00031").unwrap();
    c.set("train.clip_norm", "none").unwrap();
    c.set("eval.seeds", "4,5").unwrap();
    c.set("data.rule", "uniform").unwrap();
    let text = c.to_text();
    let back = RunConfig::from_text(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_text(), text);
    assert_eq!(back.hash(), c.hash());
    for k in RunConfig::keys() {
        assert!(text.contains(&format!("\n{k} = ")), "{k} missing from canonical text");
    }
}

#[test]
fn config_rejects_unknown_duplicate_and_invalid_keys() {
    let code = |t: &str| RunConfig::from_text(t).unwrap_err().code();
    assert_eq!(code("train.lrr = 1"), "E_CONFIG");
    assert_eq!(code("train.lr = 1\ntrain.lr = 2"), "E_CONFIG");
    assert_eq!(code("train.lr = fast"), "E_CONFIG");
    assert_eq!(code("train.mode = both"), "E_CONFIG");
    assert_eq!(code("data.alpha = 0"), "E_CONFIG");
    assert_eq!(code("just words"), "E_CONFIG");
    let ok = RunConfig::from_text("# comment\n\ntrain.beta = 0.2\n").unwrap();
    assert_eq!(ok.train.beta, 0.2);
}

#[test]
fn hash_tracks_every_change() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.set("train.beta", "0.2").unwrap();
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash(), RunConfig::default().hash());
}

#[test]
fn metrics_writer_enforces_order_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    let mut w = MetricsWriter::create(&p, "abc").unwrap();
    let rec = |step| MetricsRecord {
        step,
        fm_post: 1.0,
        fm_prior: 0.5,
        llr: 0.1,
        total: 0.9,
        lp_prior: -1.0,
        lp_post: -1.1,
        lr: 1e-3,
        wall_clock: None,
        payload: None,
    };
    w.push(&rec(2)).unwrap();
    w.push(&rec(2)).unwrap();
    assert_eq!(w.push(&rec(1)).unwrap_err().code(), "E_CONTRACT");
    let (h, rs) = read_metrics(&p).unwrap();
    assert_eq!(h.config_hash, "abc");
    assert_eq!(h.version, METRICS_FORMAT_VERSION);
    assert_eq!(rs.len(), 2);
    assert!(metrics_csv(&rs).starts_with("step,"));
}

#[test]
fn identical_configs_give_identical_streams() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&tiny(d1.path()), &TrainOptions::default()).unwrap();
    train(&tiny(d2.path()), &TrainOptions::default()).unwrap();
    let read = |d: &tempfile::TempDir| std::fs::read(RunPaths::new(d.path()).metrics()).unwrap();
    assert_eq!(read(&d1), read(&d2));
    let cfg = RunConfig::load(&RunPaths::new(d1.path()).config()).unwrap();
    assert_eq!(cfg.hash(), tiny(d1.path()).hash());
}

#[test]
fn interrupted_run_resumes_bit_identically() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = tiny(d1.path());
    train(&full, &TrainOptions::default()).unwrap();
    let cut = tiny(d2.path());
    // Stop after step 7; the last checkpoint is step 5, so steps 6 and 7 are replayed.
    let stopped = TrainOptions {
        stop_after: Some(7),
        ..TrainOptions::default()
    };
    let (_, s) = train(&cut, &stopped).unwrap();
    assert_eq!(s.steps, 7);
    assert!(s.final_checkpoint.is_none());
    let resume = TrainOptions {
        resume: Some(RunPaths::new(d2.path()).checkpoint(5)),
        ..TrainOptions::default()
    };
    train(&cut, &resume).unwrap();
    let read = |d: &tempfile::TempDir, f: fn(&RunPaths) -> std::path::PathBuf| std::fs::read(f(&RunPaths::new(d.path()))).unwrap();
    assert_eq!(read(&d1, RunPaths::metrics), read(&d2, RunPaths::metrics));
    assert_eq!(read(&d1, RunPaths::final_checkpoint), read(&d2, RunPaths::final_checkpoint));
}

#[test]
fn foreign_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    train(&cfg, &TrainOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.set("train.beta", "0.5").unwrap();
    let err = restore_trainer(&other, &RunPaths::new(dir.path()).final_checkpoint()).err().unwrap();
    assert_eq!(err.code(), "E_CONTRACT");
}

#[test]
fn evaluation_and_diagnosis_cover_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (tr, _) = train(&cfg, &TrainOptions::default()).unwrap();
    let data = load_dataset(&cfg).unwrap();
    let d = diagnose(&cfg, &tr, &data).unwrap();
    assert_eq!(d.eval.expert.success_rate, 1.0);
    assert_eq!(d.eval.rows.len(), 6);
    assert_eq!(d.eval.get(Split::Ood, crate::infodiag::Condition::VisionOnly).unwrap().trials, 6);
    let train_row = &d.splits[0];
    assert_eq!(train_row.split, "train");
    assert_eq!(train_row.info.cmi, 0.0);
    assert!(train_row.pmi_discrepancy < 1e-12);
    let csv = diagnosis_csv(&d);
    assert_eq!(csv.lines().count(), 1 + d.splits.len());
    save_eval(&RunPaths::new(dir.path()).eval(), &cfg.hash(), &d.eval).unwrap();
}

#[test]
fn vocabulary_mismatch_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut other = cfg.clone();
    other.set("world.bins", "8").unwrap();
    let data = load_dataset(&other).unwrap();
    assert_eq!(check_compatible(&cfg, &data).unwrap_err().code(), "E_CONTRACT");
}

#[test]
fn sweep_writes_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.set("train.steps", "3").unwrap();
    let rows = sweep(&cfg, SweepAxis::Beta, &["0".into(), "0.2".into()]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].out_dir.ends_with("beta=0.2"));
    assert!(RunPaths::new(&rows[0].out_dir).eval().exists());
    let csv = sweep_csv(SweepAxis::Beta, &rows);
    assert!(csv.starts_with("beta,final_total"));
    assert!(sweep(&cfg, SweepAxis::Lambda, &[]).is_err());
}
