mod common;

use std::sync::Arc;

use fedsparse_core::harness::{emit_report, read_metrics_csv, run_systems, AblationMode, DomainData, MetricsReport, RunConfig};
use fedsparse_core::pool_service::{serve, PoolStore};
use fedsparse_core::synth::{make_heterogeneous_pair, DomainSpec};

fn pair(seed: u64) -> (DomainData, DomainData) {
    let base = DomainSpec {
        n_patients: 6,
        events_per_patient: 80,
        ..DomainSpec::default()
    };
    let (t, s) = make_heterogeneous_pair(&base, seed).unwrap();
    (
        DomainData::new("target", 4, t).unwrap(),
        DomainData::new("source", 4, s).unwrap(),
    )
}

fn small_config() -> RunConfig {
    RunConfig {
        epochs: 12,
        repeats: 1,
        seed: 3,
        label_index: Some(2),
        period: 20,
        ..RunConfig::default()
    }
}

fn run(config: &RunConfig, modes: &[AblationMode]) -> MetricsReport {
    let (t, s) = pair(config.seed);
    run_systems(config, &t, &[s], modes, false).unwrap()
}

#[test]
fn save_best_keeps_the_lowest_validation_epoch() {
    let report = run(&small_config(), &AblationMode::ALL);
    for r in &report.rows {
        let min = r.valid_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(r.valid_mse, min, "{}", r.system);
        let first = r.valid_trace.iter().position(|&v| v == min).unwrap() + 1;
        assert_eq!(r.best_epoch, first);
        assert!(r.test_mse.is_finite());
    }
}

#[test]
fn federation_runs_exactly_in_gate_active_epochs() {
    let config = RunConfig {
        epochs: 25,
        ..small_config()
    };
    let report = run(&config, &[AblationMode::Hfl, AblationMode::Always]);
    for r in &report.rows {
        let expected: Vec<usize> = match r.system.as_str() {
            "HFL" => {
                let active = common::gate_oracle(&r.valid_trace, config.patience);
                // the gate after epoch e governs epoch e + 1
                (2..=config.epochs).filter(|&e| active[e - 2]).collect()
            }
            _ => (1..=config.epochs).collect(),
        };
        assert_eq!(r.fl_epochs, expected, "{}", r.system);
    }
}

#[test]
fn zero_alpha_hfl_equals_no_federation() {
    let config = RunConfig {
        alpha: 0.0,
        ..small_config()
    };
    let report = run(&config, &[AblationMode::No, AblationMode::Hfl, AblationMode::Always]);
    let no = &report.rows[0];
    for r in &report.rows[1..] {
        assert_eq!(r.valid_trace, no.valid_trace, "{}", r.system);
        assert_eq!(r.test_mse.to_bits(), no.test_mse.to_bits());
    }
}

#[test]
fn pretrained_sources_are_shared_across_modes() {
    let config = RunConfig {
        pretrain_sources: true,
        ..small_config()
    };
    let report = run(&config, &AblationMode::ALL);
    assert_eq!(report.rows.len(), 4);
    let always = report.rows.iter().find(|r| r.system == "HFL-Always").unwrap();
    assert!(always.fl_rounds > 0);
    assert!(report.rows.iter().all(|r| r.init_digest == always.init_digest && r.data_digest == always.data_digest));
}

#[test]
fn tcp_pool_run_matches_in_memory_run() {
    let config = RunConfig {
        epochs: 6,
        ..small_config()
    };
    let mem = run(&config, &[AblationMode::Always]);
    let server = serve("127.0.0.1:0", Arc::new(PoolStore::new())).unwrap();
    let remote = RunConfig {
        pool: format!("tcp://{}", server.local_addr()),
        ..config.clone()
    };
    let tcp = run(&remote, &[AblationMode::Always]);
    assert_eq!(mem.rows[0].valid_trace, tcp.rows[0].valid_trace);
    assert_eq!(mem.rows[0].test_mse.to_bits(), tcp.rows[0].test_mse.to_bits());
    // a second run on the same server is namespaced and still identical
    let again = run(&remote, &[AblationMode::Always]);
    assert_eq!(again.rows[0].valid_trace, tcp.rows[0].valid_trace);

    let dir = tempfile::tempdir().unwrap();
    let file = RunConfig {
        pool: format!("file://{}", dir.path().display()),
        ..config
    };
    let f = run(&file, &[AblationMode::Always]);
    assert_eq!(f.rows[0].valid_trace, mem.rows[0].valid_trace);
}

#[test]
fn metrics_csv_parses_back() {
    let config = RunConfig {
        epochs: 3,
        repeats: 2,
        ..small_config()
    };
    let (t, s) = pair(1);
    let report = run_systems(&config, &t, &[s], &[AblationMode::No, AblationMode::Hfl], true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, dir.path()).unwrap();
    assert!(files.iter().any(|f| f.ends_with("summary.json")));
    let all = read_metrics_csv(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<_> = all.iter().filter(|r| r.repeat != "mean").collect();
    assert_eq!(rows.len(), report.rows.len());
    assert_eq!(all.len() - rows.len(), report.aggregates.len());
    for (csv, r) in rows.iter().zip(&report.rows) {
        assert_eq!(csv.system, r.system);
        assert_eq!(csv.repeat, r.repeat.to_string());
        assert_eq!(csv.init_digest, r.init_digest);
        assert_eq!(csv.test_mse, r.test_mse);
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["param_counts"]["DNN"], 133_057);
    assert_eq!(summary["ablation_fairness"]["identical_init_and_data"], true);
    let audit = std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), report.audit.len());
}

#[test]
fn runs_are_reproducible() {
    let a = run(&small_config(), &[AblationMode::Random]);
    let b = run(&small_config(), &[AblationMode::Random]);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.audit, b.audit);
}
