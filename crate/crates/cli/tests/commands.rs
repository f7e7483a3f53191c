use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dcfscan::ensemble::SyntheticPolicy;
use dcfscan::simulate::Scenario;
use dcfscan::{Mode, Verdict};
use dcfscan_cli::config::PipelineConfig;
use dcfscan_cli::*;
use serde_json::Value;
use tempfile::TempDir;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/sample_kb.jsonl")
}

fn config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.paths.kb_index = dir.join("kb.dcfidx");
    cfg.paths.report_dir = dir.join("reports");
    cfg.workers = 2;
    cfg
}

/// Synthetic corpus written to disk plus an index over its knowledge base.
fn synthetic_setup(dir: &Path, tweak: impl FnOnce(&mut PipelineConfig)) -> (PipelineConfig, PathBuf) {
    let mut cfg = config(dir);
    cfg.synthetic.kb_size = 120;
    cfg.synthetic.test_size = 40;
    tweak(&mut cfg);
    let syn = dir.join("syn");
    let r = cmd_generate_synthetic(&cfg, &syn).unwrap();
    cmd_build_kb(&cfg, &r.kb, None).unwrap();
    (cfg, r.test)
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn build_kb_matches_independent_recount() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path());
    let report = cmd_build_kb(&cfg, &fixture(), None).unwrap();

    // Recount straight from the JSON with the filter predicate written out.
    let mut per_binary: BTreeMap<String, usize> = BTreeMap::new();
    for line in fs::read_to_string(fixture()).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let instr = v["instr_count"].as_u64().unwrap();
        let cc = match v["cyclomatic_complexity"].as_u64() {
            Some(cc) => cc as i64,
            None => (v["cfg_edges"].as_i64().unwrap() - v["cfg_nodes"].as_i64().unwrap() + 2).max(1),
        };
        if instr >= 10 && cc >= 5 {
            *per_binary.entry(v["binary_id"].as_str().unwrap().to_string()).or_default() += 1;
        }
    }
    let expected: usize = per_binary.values().map(|&n| n.min(5)).sum();
    assert_eq!(expected, 7);
    assert_eq!(report.entries, expected);
    assert_eq!(report.parsed, 10);
    assert_eq!(report.excluded_by_filter, 3);

    let first = read(&cfg.paths.kb_index);
    cmd_build_kb(&cfg, &fixture(), None).unwrap();
    assert_eq!(first, read(&cfg.paths.kb_index));
}

#[test]
fn unlabeled_record_aborts_build() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path());
    let corpus = tmp.path().join("kb.jsonl");
    let mut text = fs::read_to_string(fixture()).unwrap();
    text.push_str(r#"{"binary_id":"x","function_id":"y","asm_text":"nop","instr_count":50,"cyclomatic_complexity":6}"#);
    text.push('\n');
    fs::write(&corpus, text).unwrap();
    let err = cmd_build_kb(&cfg, &corpus, None).unwrap_err();
    assert!(err.to_string().contains("x::y"), "{err}");
    assert_eq!(err.exit_code(), EXIT_DATA);
    assert!(!cfg.paths.kb_index.exists());
}

#[test]
fn unanimous_agents_give_malicious_binary() {
    let tmp = TempDir::new().unwrap();
    let (mut cfg, test) = synthetic_setup(tmp.path(), |c| c.synthetic.ambiguous_fraction = 0.0);
    cfg.ensemble.synthetic_policy = SyntheticPolicy::Fixed { p_malicious: 1.0 };
    let report = cmd_classify(&cfg, &test).unwrap();
    assert!(report.binaries.iter().all(|b| b.verdict == Verdict::Malicious));
    assert!(report.binaries.iter().all(|b| b.max_ecs == 0.0));

    let doc: Value = serde_json::from_slice(&read(&cfg.paths.report_dir.join("verdicts.json"))).unwrap();
    for f in doc["functions"].as_array().unwrap() {
        assert!(!f["neighbors"].as_array().unwrap().is_empty());
        assert_eq!(f["responses"].as_array().unwrap().len(), 5);
    }
}

#[test]
fn knn_only_skips_ensemble_stage() {
    let tmp = TempDir::new().unwrap();
    let (mut cfg, test) = synthetic_setup(tmp.path(), |c| c.synthetic.ambiguous_fraction = 0.0);
    cfg.mode = Mode::KnnOnly;
    cmd_classify(&cfg, &test).unwrap();
    let latency = fs::read_to_string(cfg.paths.report_dir.join("latency.csv")).unwrap();
    assert!(!latency.contains("ensemble"));
    assert!(latency.contains("retrieve"));
}

#[test]
fn ambiguous_splits_are_entropy_rejected() {
    let tmp = TempDir::new().unwrap();
    let (cfg, test) = synthetic_setup(tmp.path(), |c| c.synthetic.ambiguous_fraction = 1.0);
    cmd_classify(&cfg, &test).unwrap();
    let doc: Value = serde_json::from_slice(&read(&cfg.paths.report_dir.join("verdicts.json"))).unwrap();
    let mut split = 0;
    for f in doc["functions"].as_array().unwrap() {
        let p = f["p_hat"].as_f64().unwrap();
        if p == 0.4 || p == 0.6 {
            split += 1;
            assert!(f["ecs"].as_f64().unwrap() >= 0.97);
            assert_eq!(f["verdict"], "uncertain");
            assert_eq!(f["reason"], "entropy_reject");
        }
    }
    assert!(split > 0);
}

#[test]
fn commands_are_byte_reproducible() {
    let run = || {
        let tmp = TempDir::new().unwrap();
        let (mut cfg, test) = synthetic_setup(tmp.path(), |_| {});
        cfg.calibration.grid.k_values = vec![5, 10];
        cfg.calibration.grid.n_values = vec![5];
        cfg.calibration.grid.t_values = vec![0.7];
        cfg.calibration.grid.sigma_values = vec![0.7];
        cmd_evaluate(&cfg, &test).unwrap();
        let validation = tmp.path().join("syn/test.jsonl");
        cmd_calibrate(&cfg, &validation).unwrap();
        cmd_export_embeddings(&cfg, &test, None).unwrap();
        cmd_simulate(
            &cfg,
            &[Scenario {
                p_malicious: 0.5,
                w: 0.9,
                reps: 200,
                n_agents: None,
            }],
        )
        .unwrap();
        let dir = &cfg.paths.report_dir;
        let mut out = BTreeMap::new();
        for f in [
            "verdicts.json",
            "functions.csv",
            "binaries.csv",
            "evaluation.json",
            "tradeoff.csv",
            "scatter.csv",
            "calibration.csv",
            "chosen.toml",
            "embeddings.csv",
            "simulate.csv",
            "simulate.json",
        ] {
            out.insert(f, read(&dir.join(f)));
        }
        out.insert("kb", read(&cfg.paths.kb_index));
        out.insert("test.jsonl", read(&test));
        out
    };
    let a = run();
    let b = run();
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between runs");
    }
}

#[test]
fn calibrate_singleton_and_chosen_snippet() {
    let tmp = TempDir::new().unwrap();
    let (mut cfg, test) = synthetic_setup(tmp.path(), |_| {});
    cfg.calibration.grid = dcfscan::evaluation::SweepGrid {
        k_values: vec![10],
        sigma_values: vec![0.7],
        n_values: vec![5],
        t_values: vec![0.7],
        delta_high_values: vec![0.6],
        delta_low_values: vec![0.4],
        tau_values: vec![0.8],
    };
    let report = cmd_calibrate(&cfg, &test).unwrap();
    assert_eq!(report.configurations, 1);
    let csv = fs::read_to_string(cfg.paths.report_dir.join("calibration.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let chosen = fs::read_to_string(cfg.paths.report_dir.join("chosen.toml")).unwrap();
    let merged = PipelineConfig::from_toml(&chosen).unwrap();
    assert_eq!(merged.retrieval.k, 10);
    assert_eq!(merged.thresholds.tau_stable, 0.8);
}

#[test]
fn calibrate_tau_column_is_monotone() {
    let tmp = TempDir::new().unwrap();
    let (mut cfg, test) = synthetic_setup(tmp.path(), |_| {});
    let g = &mut cfg.calibration.grid;
    g.k_values = vec![10];
    g.sigma_values = vec![0.7];
    g.n_values = vec![5];
    g.t_values = vec![0.7];
    g.delta_high_values = vec![0.6];
    g.delta_low_values = vec![0.4];
    cmd_calibrate(&cfg, &test).unwrap();
    let mut rdr = csv::Reader::from_path(cfg.paths.report_dir.join("calibration.csv")).unwrap();
    let mut rows: Vec<(f64, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[7].parse().unwrap(), r[14].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in rows.windows(2) {
        assert!(w[1].1 <= w[0].1, "{rows:?}");
    }
}

#[test]
fn calibrate_rejects_overlapping_binaries() {
    let tmp = TempDir::new().unwrap();
    let (cfg, _) = synthetic_setup(tmp.path(), |_| {});
    let kb = tmp.path().join("syn/kb.jsonl");
    let err = cmd_calibrate(&cfg, &kb).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_DATA);
    assert!(err.to_string().contains("syn-kb-00000"), "{err}");
}

#[test]
fn simulate_examples() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path());
    let path = tmp.path().join("scenarios.toml");
    fs::write(
        &path,
        "[[scenario]]\np_malicious = 1.0\nw = 0.9\nreps = 1000\n\n\
         [[scenario]]\np_malicious = 0.5\nw = 0.9\nreps = 1000\nn_agents = 5\n\n\
         [[scenario]]\np_malicious = 0.9\nw = 0.5\nreps = 1000\nn_agents = 5\n",
    )
    .unwrap();
    let r = cmd_simulate(&cfg, &read_scenarios(&path).unwrap()).unwrap();
    assert_eq!((r[0].mean_ecs, r[0].malicious), (0.0, 1000));
    assert!(r[1].mean_ecs >= 0.80 && r[1].uncertain > 500, "{:?}", r[1]);
    assert_eq!(r[2].malicious, 0);
}

#[test]
fn export_embeddings_shape() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path());
    let corpus = tmp.path().join("three.jsonl");
    let text: String = fs::read_to_string(fixture()).unwrap().lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(&corpus, text).unwrap();
    let (path, rows) = cmd_export_embeddings(&cfg, &corpus, None).unwrap();
    assert_eq!(rows, 3);
    let csv = fs::read_to_string(path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 2 * cfg.embedding.dim + 3);
    assert_eq!(lines.count(), 3);
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dcfscan"))
}

#[test]
fn exit_codes_are_stable() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "workers = \"many\"\n").unwrap();
    let code = |args: &[&str]| {
        binary()
            .args(args)
            .env_remove("DCFSCAN_EMBEDDING_URL")
            .env_remove("DCFSCAN_GENERATION_URL")
            .output()
            .unwrap()
            .status
            .code()
    };
    let fx = fixture();
    let fx = fx.to_str().unwrap();
    let reports = tmp.path().join("r");
    let reports = reports.to_str().unwrap();
    assert_eq!(code(&["--config", bad.to_str().unwrap(), "classify", fx]), Some(EXIT_CONFIG));
    assert_eq!(code(&["frobnicate"]), Some(EXIT_CONFIG));
    let missing = tmp.path().join("none.dcfidx");
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, format!("[paths]\nkb_index = {:?}\n", missing.to_str().unwrap())).unwrap();
    assert_eq!(
        code(&["--config", cfg.to_str().unwrap(), "--report-dir", reports, "classify", fx]),
        Some(EXIT_DATA)
    );
    let remote = tmp.path().join("remote.toml");
    fs::write(
        &remote,
        "[embedding]\nmode = \"remote\"\nendpoint_url = \"http://127.0.0.1:9/embed\"\nretries = 1\ntimeout_ms = 500\n",
    )
    .unwrap();
    assert_eq!(
        code(&["--config", remote.to_str().unwrap(), "--report-dir", reports, "export-embeddings", fx]),
        Some(EXIT_TRANSPORT)
    );
    assert_eq!(code(&["--report-dir", reports, "export-embeddings", fx]), Some(EXIT_OK));
}
