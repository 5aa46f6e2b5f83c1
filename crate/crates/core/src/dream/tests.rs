use super::*;
use crate::testkit::{synthetic_output_matrix, SyntheticOutputs};

fn table1() -> AttributeSchema {
    AttributeSchema::from_json(include_str!("../../../../assets/schemas/table1.json")).unwrap()
}

fn desk() -> AttributeSchema {
    AttributeSchema::from_json(include_str!("../../../../assets/schemas/desk24.json")).unwrap()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i}")).collect()
}

fn outputs(schema: &AttributeSchema, shifts: &[f32], rows: usize) -> OutputMatrix {
    let domains: Vec<(String, f32)> = shifts.iter().enumerate().map(|(i, &s)| (format!("d{i}"), s)).collect();
    let refs: Vec<(&str, f32)> = domains.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    synthetic_output_matrix(
        schema,
        &refs,
        rows,
        &SyntheticOutputs {
            n_queries: 6,
            classes: 3,
            signal: 1.0,
            noise: 0.2,
            seed: 4,
        },
    )
}

fn fast_config() -> DreamConfig {
    DreamConfig {
        alpha: 1e-3,
        beta: 1e-3,
        batch_size: 16,
        max_epochs: 40,
        epsilon: 0.0,
        ..Default::default()
    }
}

#[test]
fn init_dimensions_follow_the_schema() {
    let s = table1();
    let m = TrainedDream::init(&DreamConfig::default(), &names(2), &s, 700, "q").unwrap();
    assert_eq!(m.input_width(), 700);
    assert_eq!(m.generator.output_shape(), &[FEATURE_DIM]);
    assert_eq!(m.heads.graphs.len(), 9);
    assert_eq!(m.cardinalities(), s.cardinalities());
    assert_eq!(m.discriminators.len(), 2);
    for d in &m.discriminators {
        assert_eq!(d.output_shape(), &[1]);
    }
}

#[test]
fn same_seed_gives_identical_initial_parameters() {
    let s = table1();
    let a = TrainedDream::init(&DreamConfig::default(), &names(3), &s, 70, "q").unwrap();
    let b = TrainedDream::init(&DreamConfig::default(), &names(3), &s, 70, "q").unwrap();
    let all = |m: &TrainedDream| {
        let mut g: Vec<&LayerGraph> = vec![&m.generator];
        g.extend(&m.discriminators);
        g.extend(&m.heads.graphs);
        param_checksum(&g)
    };
    assert_eq!(all(&a), all(&b));
    let c = TrainedDream::init(
        &DreamConfig {
            seed: 1,
            ..Default::default()
        },
        &names(3),
        &s,
        70,
        "q",
    )
    .unwrap();
    assert_ne!(all(&a), all(&c));
}

#[test]
fn initial_weights_have_the_configured_spread() {
    let m = TrainedDream::init(&DreamConfig::default(), &names(2), &table1(), 700, "q").unwrap();
    let w: Vec<f32> = m
        .generator
        .params()
        .iter()
        .flat_map(|p| p.value.data().to_vec())
        .collect();
    let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    assert!(mean.abs() < 1e-3, "{mean}");
    assert!((std - 0.02).abs() < 1e-3, "{std}");
}

#[test]
fn single_domain_is_rejected() {
    assert!(TrainedDream::init(&DreamConfig::default(), &names(1), &table1(), 10, "q").is_err());
    let bad = DreamConfig {
        lambda: 0.0,
        ..Default::default()
    };
    assert!(TrainedDream::init(&bad, &names(2), &table1(), 10, "q").is_err());
}

#[test]
fn updates_are_isolated_between_players() {
    let s = desk();
    let o = outputs(&s, &[0.0, 1.0], 20);
    let mut m = TrainedDream::init(&fast_config(), &o.domains(), &s, o.width(), &o.query_hash).unwrap();
    let batches: Vec<Tensor> = ["d0", "d1"].iter().map(|d| o.tensor(&o.rows_of(d)[..8])).collect();
    let labels = label_columns(
        &o.rows_of("d0")[..8]
            .iter()
            .chain(&o.rows_of("d1")[..8])
            .map(|&r| &o.meta[r].assignment)
            .collect::<Vec<_>>(),
        s.len(),
    );
    let g_and_c = |m: &TrainedDream| {
        let mut v: Vec<&LayerGraph> = vec![&m.generator];
        v.extend(&m.heads.graphs);
        param_checksum(&v)
    };
    let ds = |m: &TrainedDream| param_checksum(&m.discriminators.iter().collect::<Vec<_>>());

    let (gc0, d0) = (g_and_c(&m), ds(&m));
    m.discriminator_step(&batches).unwrap();
    assert_eq!(g_and_c(&m), gc0, "discriminator step touched G or the heads");
    assert_ne!(ds(&m), d0);

    let d1 = ds(&m);
    m.generator_step(&batches, &labels).unwrap();
    assert_eq!(ds(&m), d1, "generator step touched a discriminator");
    assert_ne!(g_and_c(&m), gc0);
    for g in m.discriminators.iter().chain([&m.generator]).chain(&m.heads.graphs) {
        assert!(g.params().iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn heads_emit_distributions_and_infer_is_pure() {
    let s = table1();
    let m = TrainedDream::init(&DreamConfig::default(), &names(2), &s, 12, "q").unwrap();
    let v: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin() * 50.0).collect();
    let p = m.infer(&v).unwrap();
    for (probs, &n) in p.probs.iter().zip(&s.cardinalities()) {
        assert_eq!(probs.len(), n);
        let sum: f64 = probs.iter().map(|&x| x as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
    assert_eq!(m.infer(&v).unwrap(), p);
    assert!(m.infer(&v[..11]).is_err());
}

#[test]
fn training_reduces_meta_loss_and_round_trips() {
    let s = desk();
    let o = outputs(&s, &[0.0, 0.5], 40);
    let m = train(&o, &s, &fast_config()).unwrap();
    assert_eq!(m.stop, StopReason::MaxEpochs);
    let first = m.log.first().unwrap().l_c;
    let last = m.log.last().unwrap().l_c;
    assert!(last < 0.8 * first, "{first} -> {last}");

    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = TrainedDream::load(dir.path()).unwrap();
    let x = o.tensor(&[0, 5, 50]);
    assert_eq!(back.features(&x).unwrap(), m.features(&x).unwrap());
    assert_eq!(back.infer_batch(&x).unwrap(), m.infer_batch(&x).unwrap());
    assert_eq!(back.log, m.log);
    assert_eq!(back.query_hash, o.query_hash);
    // a training row reproduces its prediction exactly
    assert_eq!(back.infer(o.row(3)).unwrap(), m.infer(o.row(3)).unwrap());
}

#[test]
fn loaded_model_refuses_further_training() {
    let s = desk();
    let o = outputs(&s, &[0.0, 0.5], 10);
    let m = train(
        &o,
        &s,
        &DreamConfig {
            max_epochs: 1,
            ..fast_config()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let mut back = TrainedDream::load(dir.path()).unwrap();
    assert!(back.discriminator_step(&[o.tensor(&[0]), o.tensor(&[10])]).is_err());
}

#[test]
fn convergence_rule_stops_early() {
    let s = desk();
    let o = outputs(&s, &[0.0, 0.5], 10);
    let m = train(
        &o,
        &s,
        &DreamConfig {
            epsilon: 10.0,
            min_epochs: 0,
            patience: 1,
            ..fast_config()
        },
    )
    .unwrap();
    assert_eq!(m.stop, StopReason::Converged);
    assert_eq!(m.log.len(), 2);
}

#[test]
fn stopping_waits_for_min_epochs_and_patience() {
    let cfg = DreamConfig {
        epsilon: 0.1,
        min_epochs: 5,
        patience: 2,
        ..fast_config()
    };
    let mut rule = StopRule::default();
    // flat from the start: streak reaches 2 at epoch 3 but the floor is 5
    let flat: Vec<bool> = (1..=6).map(|e| rule.observe(e, 3.0, &cfg)).collect();
    assert_eq!(flat, [false, false, false, false, true, true]);
    let mut rule = StopRule::default();
    // a jump resets the streak
    let seq = [3.0, 3.0, 3.0, 3.0, 1.0, 1.0, 1.0];
    let got: Vec<bool> = seq
        .iter()
        .enumerate()
        .map(|(i, &l)| rule.observe(i + 10, l, &cfg))
        .collect();
    assert_eq!(got, [false, false, true, true, false, false, true]);
}

#[test]
fn sampling_with_replacement_when_domain_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = sample_batch(&[3, 4], 5, &mut rng);
    assert_eq!(b.len(), 5);
    assert!(b.iter().all(|r| [3, 4].contains(r)));
    let b = sample_batch(&[1, 2, 3, 4, 5, 6], 6, &mut rng);
    let mut sorted = b.clone();
    sorted.sort();
    assert_eq!(sorted, vec![1, 2, 3, 4, 5, 6]);
}
