use super::*;
use crate::baselines::random_expected_accuracy;
use crate::dream::{build_generator, DreamConfig};
use crate::schema::{AttributeSchema, SplitCounts, SplitRole};
use crate::testkit::{synthetic_output_matrix, tiny_pool, SyntheticOutputs};

fn a(v: &[usize]) -> AttributeAssignment {
    AttributeAssignment(v.to_vec())
}

#[test]
fn perfect_predictions_score_one_hundred() {
    let t = vec![a(&[0, 1]), a(&[2, 0]), a(&[1, 1])];
    let row = attribute_accuracy(&t, &t).unwrap();
    assert_eq!(row.per_attribute, vec![100.0, 100.0]);
    assert_eq!(row.average, 100.0);
}

#[test]
fn constant_prediction_on_uniform_truths_counts_a_third() {
    let truths: Vec<_> = (0..300).map(|i| a(&[i % 3])).collect();
    let preds = vec![a(&[1]); 300];
    let row = attribute_accuracy(&preds, &truths).unwrap();
    // 100 of 300 match
    assert!((row.average - 100.0 / 3.0).abs() < 1e-12);
    assert_eq!(format!("{:.2}", row.average), "33.33");
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(attribute_accuracy(&[], &[]).is_err());
    assert!(attribute_accuracy(&[a(&[0])], &[a(&[0]), a(&[1])]).is_err());
    assert!(attribute_accuracy(&[a(&[0])], &[a(&[0, 1])]).is_err());
}

#[test]
fn methods_parse_and_label() {
    assert_eq!("kennen".parse::<Method>().unwrap(), Method::Kennen);
    assert_eq!(" DREAM ".parse::<Method>().unwrap(), Method::Dream);
    assert!("svm".parse::<Method>().is_err());
    assert_eq!(Method::Kennen.to_string(), "KENNEN*");
}

fn report(domain: &str, method: Method, cells: Vec<f64>) -> EvalReport {
    let row = AccuracyRow::from_cells(cells);
    EvalReport {
        domain: domain.into(),
        method,
        attributes: vec!["act".into(), "opt".into(), "bn".into()],
        per_attribute: row.per_attribute,
        average: row.average,
        trials: Vec::new(),
        config: serde_json::Value::Null,
    }
}

#[test]
fn summary_has_table_layout() {
    let reports = vec![
        report("photo", Method::Dream, vec![60.0, 50.0, 70.0]),
        report("photo", Method::Random, vec![25.0, 100.0 / 3.0, 50.0]),
    ];
    let text = render_summary(&reports);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "held-out domain: photo");
    let header: Vec<&str> = lines[1].split_whitespace().collect();
    assert_eq!(header, ["method", "act", "opt", "bn", "Avg"]);
    let random: Vec<&str> = lines[3].split_whitespace().collect();
    assert_eq!(random, ["Random", "25.00", "33.33", "50.00", "36.11"]);
}

#[test]
fn report_check_catches_drift() {
    let mut r = report("x", Method::Kennen, vec![10.0, 20.0, 30.0]);
    r.check().unwrap();
    r.average += 1e-9;
    assert!(r.check().is_err());
    let mut r = report("x", Method::Kennen, vec![10.0, 120.0, 30.0]);
    r.average = AccuracyRow::from_cells(r.per_attribute.clone()).average;
    assert!(r.check().is_err());
}

#[test]
fn reports_are_written_per_domain() {
    let reports = vec![
        report("a", Method::Dream, vec![1.0, 2.0, 3.0]),
        report("b", Method::Dream, vec![4.0, 5.0, 6.0]),
    ];
    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), &reports).unwrap();
    let back: Vec<EvalReport> = serde_json::from_slice(&std::fs::read(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(back, vec![reports[1].clone()]);
    assert!(dir.path().join("summary.txt").exists());
    assert!(write_reports(dir.path(), &[report("../x", Method::Dream, vec![1.0])]).is_err());
}

#[test]
fn feature_export_has_one_row_per_model_and_is_stable() {
    let schema = AttributeSchema::from_json(include_str!("../../../../assets/schemas/desk24.json")).unwrap();
    let o = synthetic_output_matrix(
        &schema,
        &[("art", 0.0), ("photo", 1.0)],
        5,
        &SyntheticOutputs {
            n_queries: 4,
            classes: 3,
            signal: 1.0,
            noise: 0.1,
            seed: 2,
        },
    );
    let g = build_generator(o.width(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    export_features(&g, &o, &p).unwrap();
    let first = std::fs::read(&p).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + o.len());
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(header.len(), 129);
    assert_eq!(header[0], "domain");
    assert_eq!(header[128], "f127");
    assert!(lines[1].starts_with("art,"));
    assert!(lines[10].starts_with("photo,"));
    export_features(&g, &o, &p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);
    assert!(export_features(&build_generator(5, 3).unwrap(), &o, &p).is_err());
}

#[test]
fn audit_refuses_early_target_reads() {
    let mut log = AuditLog::new();
    log.read("t", 0, Phase::Training, "s", "query images", 4).unwrap();
    log.read("t", 0, Phase::Scoring, "t", "test black boxes", 2).unwrap();
    assert_eq!(log.target_reads_before_scoring(), 0);
    assert!(log.read("t", 0, Phase::Training, "t", "query images", 4).is_err());
    assert_eq!(log.target_reads_before_scoring(), 1);
}

fn quick_config() -> LodoConfig {
    LodoConfig {
        n_queries: 4,
        query_seed: 3,
        trials: 2,
        dream: DreamConfig {
            alpha: 1e-3,
            beta: 1e-3,
            batch_size: 4,
            max_epochs: 3,
            ..Default::default()
        },
        lambda_grid: vec![0.1, 1.0],
        methods: vec![Method::Dream, Method::Kennen, Method::Random],
        targets: Vec::new(),
        score_roles: vec![SplitRole::Test],
    }
}

#[test]
fn lodo_reports_every_domain_and_keeps_targets_isolated() {
    let (pool, data) = tiny_pool(
        3,
        SplitCounts {
            train: 6,
            val: 2,
            test: 3,
        },
        5,
    );
    let cfg = quick_config();
    let mut audit = AuditLog::new();
    let reports = leave_one_domain_out(&pool, &data, &cfg, &mut audit).unwrap();
    assert_eq!(reports.len(), 9);
    for d in pool.domains() {
        assert_eq!(reports.iter().filter(|r| r.domain == d).count(), 3);
        assert_eq!(audit.scoring_reads(&d), cfg.trials);
    }
    assert_eq!(audit.target_reads_before_scoring(), 0);
    for r in &reports {
        r.check().unwrap();
        assert_eq!(r.trials.len(), 2);
        assert_ne!(r.trials[0].seeds, r.trials[1].seeds);
        if r.method == Method::Dream {
            assert!(r.trials.iter().all(|t| t.lambda.is_some()));
        }
        if r.method == Method::Random {
            assert_eq!(r.per_attribute, random_row());
            assert_eq!(r.per_attribute, random_expected_accuracy(&pool.schema).per_attribute);
        }
    }

    let all = LodoConfig {
        trials: 1,
        methods: vec![Method::Kennen],
        score_roles: vec![SplitRole::Train, SplitRole::Val, SplitRole::Test],
        ..cfg.clone()
    };
    let mut wide = AuditLog::new();
    leave_one_domain_out(&pool, &data, &all, &mut wide).unwrap();
    assert_eq!(wide.target_reads_before_scoring(), 0);
    assert!(wide
        .events
        .iter()
        .filter(|e| e.phase == Phase::Scoring)
        .all(|e| e.count == 11));

    let mut again = AuditLog::new();
    let second = leave_one_domain_out(&pool, &data, &cfg, &mut again).unwrap();
    assert_eq!(reports, second);
    assert_eq!(audit, again);
}

fn random_row() -> Vec<f64> {
    vec![25.0, 100.0 / 3.0, 50.0]
}

#[test]
fn two_domains_skip_dream_and_unknown_targets_fail() {
    let (pool, data) = tiny_pool(
        2,
        SplitCounts {
            train: 4,
            val: 2,
            test: 2,
        },
        8,
    );
    let cfg = LodoConfig {
        trials: 1,
        ..quick_config()
    };
    let reports = leave_one_domain_out(&pool, &data, &cfg, &mut AuditLog::new()).unwrap();
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|r| r.method != Method::Dream));

    let bad = LodoConfig {
        targets: vec!["nowhere".into()],
        ..cfg.clone()
    };
    assert!(leave_one_domain_out(&pool, &data, &bad, &mut AuditLog::new()).is_err());
    let gap = in_domain_gap(&pool, &data, "domain0", &LodoConfig { n_queries: 3, ..cfg }).unwrap();
    assert_eq!(gap.trials.len(), 1);
    assert!((gap.gap - (gap.in_domain.average - gap.cross_domain.average)).abs() < 1e-12);
}
