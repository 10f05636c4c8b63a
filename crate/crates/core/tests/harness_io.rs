//! Result files, config parsing and the CSV projection.

use mucio::harness::{
    parse_jsonl, run_experiment, strip_wall_time, summarize_records, Experiment, ExperimentConfig, TrialRecord,
};

const TAMPER: &str = r#"{
    "experiment": {"kind": "tamper", "n": 60, "set": {"kind": "binomial-threshold", "t": 38},
                   "delta": 0.1, "mode": "multiplicative-abort", "oracle": "threshold"},
    "trials": 30, "seed": 17
}"#;

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text).expect("config parses")
}

#[test]
fn every_experiment_kind_parses() {
    let kinds = [
        TAMPER.to_string(),
        r#"{"experiment": {"kind": "oracle-check", "max_n": 4, "gamma": 0.3, "tau": 0.5, "sizing": "hoeffding",
            "prefixes": 20, "draws": 50, "min_measure": 0.2}, "trials": 2, "seed": 1}"#
            .into(),
        r#"{"experiment": {"kind": "reduce-l1", "n": 4, "sigma": 0.5, "set": "halfspace", "epsilon": 0.5,
            "delta": 0.2, "m_eval": 20, "m_max": 2, "m_g": 5}, "trials": 2, "seed": 1}"#
            .into(),
        r#"{"experiment": {"kind": "gauss-l2", "n": 16, "sigma": 1.0, "set": "dictator", "epsilon": 0.5,
            "delta": 0.2, "analytic": true, "m_eval": 1, "m_max": 8}, "trials": 2, "seed": 1}"#
            .into(),
        r#"{"experiment": {"kind": "sphere", "n": 16, "set": "hemisphere", "epsilon": 0.5, "delta": 0.2,
            "m_eval": 20, "m_max": 4}, "trials": 2, "seed": 1}"#
            .into(),
        r#"{"experiment": {"kind": "mcdiarmid", "n": 20, "function": {"kind": "sum"}, "epsilon": 0.5,
            "delta": 0.1, "oracle": {"kind": "linear-threshold"}, "mean_samples": 200, "band": 1.0},
            "trials": 2, "seed": 1}"#
            .into(),
        r#"{"experiment": {"kind": "cointoss", "parties": 21, "epsilon": 0.5, "delta": 0.1, "cap_factor": 3.0,
            "oracle": {"kind": "monte-carlo", "budget": {"m_eval": 50, "m_max": 2}}}, "trials": 2, "seed": 1}"#
            .into(),
        r#"{"experiment": {"kind": "lowerbound", "n": 36, "radius_exponent": 0.5, "queries": 50, "trials": 2,
            "epsilon": 0.5, "delta": 0.1, "cap_factor": 3.0, "budget": {"m_eval": 30, "m_max": 2}},
            "trials": 2, "seed": 1}"#
            .into(),
    ];
    let mut names = Vec::new();
    for text in &kinds {
        let c = config(text);
        let r = run_experiment(&c).unwrap_or_else(|e| panic!("{}: {e}", c.experiment.name()));
        assert_eq!(r.records.len(), c.trials);
        assert_eq!(r.summary.violations, 0, "{}", c.experiment.name());
        names.push(c.experiment.name());
    }
    assert_eq!(
        names,
        ["tamper", "oracle-check", "reduce-l1", "gauss-l2", "sphere", "mcdiarmid", "cointoss", "lowerbound"]
    );
}

#[test]
fn result_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let mut c = config(TAMPER);
    c.output = Some(path.clone());
    let r = run_experiment(&c).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), c.trials + 1);
    let back = parse_jsonl(&text).unwrap();
    assert_eq!(back, r);
}

#[test]
fn summary_recomputes_from_trial_lines() {
    let r = run_experiment(&config(TAMPER)).unwrap();
    let parsed = parse_jsonl(&r.to_jsonl()).unwrap();
    let recomputed = summarize_records(&parsed.summary.experiment, &parsed.records);
    assert_eq!(
        serde_json::to_string(&recomputed).unwrap(),
        serde_json::to_string(&parsed.summary).unwrap()
    );
}

#[test]
fn csv_projection_is_lossless() {
    let r = run_experiment(&config(TAMPER)).unwrap();
    let text = r.to_csv().unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut back = Vec::new();
    for row in reader.records() {
        let row = row.unwrap();
        let opt = |s: &str| (!s.is_empty()).then(|| s.parse::<f64>().unwrap());
        back.push(TrialRecord {
            trial: row[0].parse().unwrap(),
            success: row[1].parse().unwrap(),
            budget: row[2].parse().unwrap(),
            aborted: row[3].parse().unwrap(),
            cap_hit: row[4].parse().unwrap(),
            queries: row[5].parse().unwrap(),
            displacement: opt(&row[6]),
            violations: serde_json::from_str(&row[7]).unwrap(),
            extra: serde_json::from_str(&row[8]).unwrap(),
            wall_ms: opt(&row[9]),
        });
    }
    assert_eq!(back, r.records);
}

#[test]
fn identical_seeds_give_identical_files() {
    let c = config(TAMPER);
    let a = strip_wall_time(&run_experiment(&c).unwrap().to_jsonl());
    let b = strip_wall_time(&run_experiment(&c).unwrap().to_jsonl());
    assert_eq!(a, b);
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(a, strip_wall_time(&run_experiment(&other).unwrap().to_jsonl()));
}

#[test]
fn unknown_kind_is_a_config_error() {
    let bad = r#"{"experiment": {"kind": "teleport"}, "trials": 1, "seed": 0}"#;
    assert!(ExperimentConfig::from_json(bad).is_err());
    let missing = r#"{"experiment": {"kind": "tamper", "n": 10}, "trials": 1, "seed": 0}"#;
    assert!(ExperimentConfig::from_json(missing).is_err());
}

#[test]
fn trivial_set_without_declared_measure_is_rejected() {
    let text = TAMPER.replace(r#"{"kind": "binomial-threshold", "t": 38}"#, r#"{"kind": "whole"}"#);
    let c = config(&text);
    assert!(matches!(c.experiment, Experiment::Tamper(_)));
    assert!(run_experiment(&c).is_err());
}
