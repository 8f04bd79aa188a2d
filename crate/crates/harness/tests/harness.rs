use std::fs;
use std::path::Path;
use std::process::Command;

use lfsda_harness::experiment::welfare_from_allocations;
use lfsda_harness::{
    load_pv_csv, load_pv_csv_for, resolve_pv, run_experiment, Condition, ExperimentConfig, HarnessError,
    PvSource,
};

fn small(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        agents: 4,
        slots: 8,
        iterations: 6,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|x| x.unwrap().iter().map(String::from).collect()));
    rows
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn pv_text(slots: usize, agents: usize) -> String {
    let mut s = String::from("slot");
    for i in 1..=agents {
        s += &format!(",agent_{i}");
    }
    s.push('\n');
    for t in 1..=slots {
        s += &t.to_string();
        for i in 0..agents {
            s += &format!(",{}", if (3..6).contains(&t) { 0.3 * i as f64 } else { 0.0 });
        }
        s.push('\n');
    }
    s
}

#[test]
fn pv_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pv = lfsda_harness::generate_pv_synthetic(4, 3, 24, 0.8, 0.6);
    let path = dir.path().join("pv.csv");
    pv.write_csv(&path).unwrap();
    assert_eq!(load_pv_csv_for(&path, 24, 3).unwrap(), pv);
}

#[test]
fn pv_csv_rejects_negative_cells() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pv.csv");
    write(&path, "slot,agent_1,agent_2\n1,0.5,0\n2,-0.1,0\n");
    let err = load_pv_csv(&path).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    match err {
        HarnessError::PvCell { row, column, .. } => assert_eq!((row, column.as_str()), (3, "agent_1")),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn pv_csv_rejects_short_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pv.csv");
    write(&path, &pv_text(23, 2));
    let err = load_pv_csv_for(&path, 24, 2).unwrap_err();
    assert!(matches!(err, HarnessError::PvShape { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn pv_csv_rejects_ragged_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pv.csv");
    write(&path, "slot,agent_1,agent_2\n1,0.5,0\n2,0.1\n");
    assert!(matches!(
        load_pv_csv(&path).unwrap_err(),
        HarnessError::PvShape { .. }
    ));
    write(&path, "slot,agent_1,agent_2\n1,0.5,zero\n");
    assert!(matches!(
        load_pv_csv(&path).unwrap_err(),
        HarnessError::PvCell { .. }
    ));
    write(&path, "time,agent_1\n1,0.5\n");
    assert!(matches!(
        load_pv_csv(&path).unwrap_err(),
        HarnessError::PvShape { .. }
    ));
}

#[test]
fn outputs_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_experiment(&cfg, &Condition::ALL).unwrap();
    let out = dir.path();

    let it = csv_rows(&out.join("iterations.csv"));
    assert_eq!(it[0].len(), 4 + cfg.slots);
    assert_eq!(&it[0][..4], ["k", "condition", "social_welfare", "max_imbalance"]);
    let count = |c: &str| it.iter().filter(|r| r[1] == c).count();
    assert!(count("lfsda") >= 1 && count("lfsda") <= cfg.iterations);
    assert_eq!(count("rtp"), count("rtp_compensated"));
    assert_eq!(count("without_trading"), 1);
    assert_eq!(count("optimal"), 1);

    let ratio = csv_rows(&out.join("welfare_ratio.csv"));
    assert_eq!(ratio.len(), cfg.agents + 1);
    let cons = csv_rows(&out.join("consumption.csv"));
    assert_eq!(cons.len(), 1 + 4 * cfg.agents * cfg.slots);
    let alloc = csv_rows(&out.join("allocations.csv"));
    assert_eq!(alloc[0].len(), 12);
    assert_eq!(alloc.len(), 1 + 4 * cfg.agents * cfg.slots);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for key in [
        "lfsda_welfare",
        "rtp_welfare",
        "rtp_compensated_welfare",
        "without_trading_welfare",
        "optimal_welfare",
        "optimal_duality_gap",
        "seed",
    ] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    for fig in [
        "fig3_pv",
        "fig4_social_welfare",
        "fig5_prices",
        "fig6_welfare_ratio",
        "fig7_consumption",
    ] {
        assert!(
            out.join("plots").join(format!("{fig}.csv")).is_file(),
            "missing {fig}"
        );
    }
    assert!(!out.join("failures.json").exists());
}

#[test]
fn summary_matches_allocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_experiment(&cfg, &Condition::ALL).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let pv = resolve_pv(&cfg).unwrap();
    let alloc = dir.path().join("allocations.csv");
    for (cond, key) in [
        ("lfsda", "lfsda_welfare"),
        ("rtp", "rtp_welfare"),
        ("without_trading", "without_trading_welfare"),
        ("optimal", "optimal_welfare"),
    ] {
        let (phi, compensated) = welfare_from_allocations(&cfg, &pv, cond, &alloc).unwrap();
        let reported = summary[key].as_f64().unwrap();
        assert!((phi - reported).abs() <= 1e-9, "{cond}: {phi} vs {reported}");
        if cond == "rtp" {
            let reported = summary["rtp_compensated_welfare"].as_f64().unwrap();
            assert!((compensated - reported).abs() <= 1e-9);
        }
    }
}

#[test]
fn zero_pv_gives_zero_welfare() {
    let dir = tempfile::tempdir().unwrap();
    let pv = dir.path().join("pv.csv");
    let mut text = String::from("slot,agent_1,agent_2,agent_3\n");
    for t in 1..=6 {
        text += &format!("{t},0,0,0\n");
    }
    write(&pv, &text);
    let cfg = ExperimentConfig {
        agents: 3,
        slots: 6,
        iterations: 5,
        output_dir: dir.path().join("out"),
        pv: PvSource::Csv { path: pv },
        // the default start equals the marginal utility at zero consumption,
        // where the optimum is degenerate
        initial_price: Some(12.0),
        ..ExperimentConfig::default()
    };
    let o = run_experiment(&cfg, &Condition::ALL).unwrap();
    for run in [&o.lfsda, &o.rtp, &o.without_trading] {
        let r = run.as_ref().unwrap().last().unwrap();
        assert!(
            r.social_welfare.abs() < 1e-7,
            "{:?}: {}",
            run.as_ref().unwrap().kind,
            r.social_welfare
        );
    }
    assert!(o.optimal.unwrap().welfare.abs() < 1e-7);
}

#[test]
fn runs_are_reproducible_and_parallel_agrees() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    run_experiment(&small(a.path()), &Condition::ALL).unwrap();
    run_experiment(&small(b.path()), &Condition::ALL).unwrap();
    let mut par = small(c.path());
    par.parallel = true;
    run_experiment(&par, &Condition::ALL).unwrap();
    for file in ["iterations.csv", "allocations.csv", "welfare_ratio.csv"] {
        let x = fs::read(a.path().join(file)).unwrap();
        assert_eq!(x, fs::read(b.path().join(file)).unwrap(), "{file}");
        assert_eq!(x, fs::read(c.path().join(file)).unwrap(), "{file} (parallel)");
    }
}

#[test]
fn relative_pv_path_resolves_against_config() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("pv.csv"), &pv_text(8, 2));
    let cfg_path = dir.path().join("exp.toml");
    write(
        &cfg_path,
        "agents = 2\nslots = 8\n[pv]\nkind = \"csv\"\npath = \"pv.csv\"\n",
    );
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    assert_eq!(resolve_pv(&cfg).unwrap().get(3, 1), 0.3);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lfsda"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    write(&bad, "gamma = 3.0\n");
    let status = cli().args(["run", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let missing = dir.path().join("nope.toml");
    let status = cli().args(["run", "--config"]).arg(&missing).status().unwrap();
    assert_eq!(status.code(), Some(3));

    write(&dir.path().join("pv.csv"), "slot,agent_1\n1,-1\n");
    let cfg = dir.path().join("pv.toml");
    write(
        &cfg,
        "agents = 1\nslots = 1\n[pv]\nkind = \"csv\"\npath = \"pv.csv\"\n",
    );
    let status = cli().args(["baseline", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn cli_runs_and_generates_pv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(&cfg, "agents = 3\nslots = 6\n");
    let out = dir.path().join("out");
    let status = cli()
        .args(["lfsda", "--iterations", "4", "--seed", "9", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["iteration_budget"], 4);

    let pv = dir.path().join("pv").join("caps.csv");
    let status = cli()
        .args(["gen-pv", "--seed", "9", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&pv)
        .status()
        .unwrap();
    assert!(status.success());
    let set = load_pv_csv_for(&pv, 6, 3).unwrap();
    assert_eq!(set, lfsda_harness::generate_pv_synthetic(9, 3, 6, 0.8, 0.6));
}
