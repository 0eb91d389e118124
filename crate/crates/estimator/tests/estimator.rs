use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timemoe_core::{compute_trajectory, generate, PlantSpec, Rule, TemporalOptions};
use timemoe_estimator::*;

fn quick(seed: u64) -> EstimatorConfig {
    EstimatorConfig {
        epochs: 10,
        align_steps: 100,
        seed,
        ..EstimatorConfig::default()
    }
}

/// Single-lag data set from explicit feature rows.
fn single(x1: Vec<f64>, d1: usize, x2: Vec<f64>, d2: usize, y: Vec<usize>, classes: usize) -> MultiLagData {
    MultiLagData::new(
        ["a".into(), "b".into()],
        d1,
        d2,
        classes,
        vec![LagSamples { lag: 1, x1, x2, y }],
    )
    .unwrap()
}

fn accuracy(probs: &[f64], y: &[usize], c: usize) -> f64 {
    let hits = y
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &probs[i * c..(i + 1) * c];
            (0..c).all(|k| row[k] <= row[l])
        })
        .count();
    hits as f64 / y.len() as f64
}

fn cross_entropy_bits(probs: &[f64], y: &[usize], c: usize) -> f64 {
    y.iter()
        .enumerate()
        .map(|(i, &l)| -probs[i * c + l].log2())
        .sum::<f64>()
        / y.len() as f64
}

fn gate_bundle(rule: Rule, seed: u64, n: usize) -> timemoe_core::SequenceBundle {
    generate(&PlantSpec::binary(&["a", "b"], rule, 0.0, n, seed)).unwrap()
}

#[test]
fn constant_labels_are_learned_and_carry_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1_000;
    let x1: Vec<f64> = (0..2 * n).map(|_| rng.gen()).collect();
    let x2: Vec<f64> = (0..2 * n).map(|_| rng.gen()).collect();
    let data = single(x1.clone(), 2, x2.clone(), 2, vec![0; n], 2);
    let m = fit(&data, EstimatorConfig { epochs: 40, ..quick(1) }).unwrap();
    for b in [Branch::First, Branch::Second, Branch::Joint] {
        let p = m.predict_proba(b, &x1, &x2, 1).unwrap();
        assert!(cross_entropy_bits(&p, &vec![0; n], 2) < 0.01);
    }
    let est = &lag_estimates(&m, &data, &[]).unwrap()[0];
    for v in [est.redundancy, est.unique1, est.unique2, est.synergy] {
        assert!(v.abs() <= 0.02, "{est:?}");
    }
}

#[test]
fn separable_classes_are_learned_within_fifty_epochs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut x1, mut x2, mut y) = (Vec::new(), Vec::new(), Vec::new());
    while y.len() < 1_000 {
        let v: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let score = v[0] + 0.5 * v[1] - v[2] + 0.25 * v[3];
        if score.abs() < 0.1 {
            continue;
        }
        x1.extend_from_slice(&v[..2]);
        x2.extend_from_slice(&v[2..]);
        y.push(usize::from(score > 0.0));
    }
    let data = single(x1.clone(), 2, x2.clone(), 2, y.clone(), 2);
    let cfg = EstimatorConfig {
        epochs: 50,
        holdout: 0.0,
        seed: 2,
        ..EstimatorConfig::default()
    };
    let m = train_discriminators(&data, cfg).unwrap();
    let p = m.predict_proba(Branch::Joint, &x1, &x2, 1).unwrap();
    let acc = accuracy(&p, &y, 2);
    assert!(acc > 0.99, "{acc}");
}

#[test]
fn independent_labels_give_maximal_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 4;
    let n = 4_000;
    let x1: Vec<f64> = (0..3 * n).map(|_| rng.gen()).collect();
    let x2: Vec<f64> = (0..3 * n).map(|_| rng.gen()).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let (hx1, hx2, hy) = (x1[..3 * 800].to_vec(), x2[..3 * 800].to_vec(), y[..800].to_vec());
    let data = single(x1[3 * 800..].to_vec(), 3, x2[3 * 800..].to_vec(), 3, y[800..].to_vec(), c);
    let m = train_discriminators(&data, quick(3)).unwrap();
    let p = m.predict_proba(Branch::Joint, &hx1, &hx2, 1).unwrap();
    let ce = cross_entropy_bits(&p, &hy, c);
    assert!((ce - 2.0).abs() < 0.1, "{ce}");
}

#[test]
fn smoothed_training_loss_does_not_increase() {
    let b = gate_bundle(
        Rule::LaggedXor {
            sources: ["a".into(), "b".into()],
            lag: 1,
        },
        4,
        2_000,
    );
    let data = MultiLagData::from_bundle(&b, (0, 1), &[1, 2]).unwrap();
    let m = train_discriminators(&data, EstimatorConfig { epochs: 20, seed: 4, ..quick(4) }).unwrap();
    let h = &m.history().discriminator;
    assert_eq!(h.len(), 20);
    let smooth: Vec<f64> = h.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    // Allow the optimizer's jitter at the irreducible-loss floor.
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + 1e-4, "{smooth:?}");
    }
    assert!(smooth.last().unwrap() < &(smooth[0] - 0.01), "{smooth:?}");
}

/// One-hot gates against the exact per-lag decomposition of the same data.
#[test]
fn one_hot_gates_match_exact_decomposition() {
    let rules = [
        Rule::LaggedXor {
            sources: ["a".into(), "b".into()],
            lag: 2,
        },
        Rule::LaggedCopy {
            source: "a".into(),
            lag: 2,
        },
        Rule::LaggedRedundant {
            sources: ["a".into(), "b".into()],
            lag: 2,
        },
    ];
    let exact_opts = TemporalOptions {
        markov_order: 0,
        ..TemporalOptions::default()
    };
    for (i, rule) in rules.into_iter().enumerate() {
        let b = gate_bundle(rule.clone(), 10 + i as u64, 3_000);
        let data = MultiLagData::from_bundle(&b, (0, 1), &[1, 2, 3]).unwrap();
        let m = fit(&data, quick(i as u64)).unwrap();
        let neural = estimate_rus_multilag(&m, &data, &[]).unwrap();
        let exact = compute_trajectory(&b, (0, 1), 3, &exact_opts).unwrap();
        for name in ["R", "U1", "U2", "S"] {
            let (nv, ev) = (neural.component(name).unwrap(), exact.component(name).unwrap());
            for (a, e) in nv.iter().zip(ev) {
                assert!((a - e).abs() <= 0.05f64.max(0.15 * e.abs()), "{rule:?} {name}: {nv:?} vs {ev:?}");
            }
        }
        assert!(neural.sum_identity_gap() < 1e-12);
    }
}

#[test]
fn lagged_copy_peaks_at_the_planted_lag() {
    let b = generate(&PlantSpec::binary(
        &["a", "b"],
        Rule::LaggedCopy {
            source: "a".into(),
            lag: 3,
        },
        0.1,
        3_000,
        5,
    ))
    .unwrap();
    let data = MultiLagData::from_bundle(&b, (0, 1), &[1, 2, 3, 4]).unwrap();
    let m = fit(&data, quick(5)).unwrap();
    let tr = estimate_rus_multilag(&m, &data, &[]).unwrap();
    let exact = compute_trajectory(&b, (0, 1), 4, &TemporalOptions::default()).unwrap();
    assert_eq!(tr.argmax_lag("U1"), Some(3));
    assert_eq!(exact.argmax_lag("U1"), Some(3));
}

#[test]
fn same_seed_same_estimates() {
    let b = gate_bundle(
        Rule::LaggedCopy {
            source: "b".into(),
            lag: 1,
        },
        6,
        800,
    );
    let data = MultiLagData::from_bundle(&b, (0, 1), &[1, 2]).unwrap();
    let cfg = EstimatorConfig {
        epochs: 3,
        align_steps: 20,
        seed: 6,
        ..EstimatorConfig::default()
    };
    let a = fit(&data, cfg.clone()).unwrap();
    let b2 = fit(&data, cfg).unwrap();
    assert_eq!(a.history(), b2.history());
    let ta = serde_json::to_string(&estimate_rus_multilag(&a, &data, &[]).unwrap()).unwrap();
    let tb = serde_json::to_string(&estimate_rus_multilag(&b2, &data, &[]).unwrap()).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn checkpoints_round_trip() {
    let b = gate_bundle(
        Rule::LaggedXor {
            sources: ["a".into(), "b".into()],
            lag: 1,
        },
        7,
        600,
    );
    let data = MultiLagData::from_bundle(&b, (0, 1), &[1]).unwrap();
    let m = fit(
        &data,
        EstimatorConfig {
            epochs: 2,
            align_steps: 10,
            seed: 7,
            ..EstimatorConfig::default()
        },
    )
    .unwrap();
    let path = std::env::temp_dir().join(format!("timemoe-estimator-{}.ckpt", std::process::id()));
    m.save(&path).unwrap();
    let back = EstimatorModel::load(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(back.stage(), Stage::Aligned);
    assert_eq!(back.history(), m.history());
    assert_eq!(
        lag_estimates(&back, &data, &[]).unwrap(),
        lag_estimates(&m, &data, &[]).unwrap()
    );
}

#[test]
fn estimation_requires_both_phases() {
    let b = gate_bundle(
        Rule::LaggedCopy {
            source: "a".into(),
            lag: 1,
        },
        8,
        300,
    );
    let data = MultiLagData::from_bundle(&b, (0, 1), &[1]).unwrap();
    let cfg = EstimatorConfig {
        epochs: 1,
        align_steps: 2,
        ..EstimatorConfig::default()
    };
    let mut m = EstimatorModel::new(2, 2, 2, &[1], cfg).unwrap();
    assert!(matches!(estimate_rus_multilag(&m, &data, &[]), Err(Error::State(_))));
    assert!(matches!(m.train_alignment(&data), Err(Error::State(_))));
    m.train_discriminators(&data).unwrap();
    assert!(matches!(estimate_rus_multilag(&m, &data, &[]), Err(Error::State(_))));
    m.train_alignment(&data).unwrap();
    assert!(estimate_rus_multilag(&m, &data, &[]).is_ok());
    assert!(matches!(estimate_rus_multilag(&m, &data, &[4]), Err(Error::Contract { .. })));
}

#[test]
fn trained_alignment_is_positive_and_needs_two_samples() {
    let b = gate_bundle(
        Rule::LaggedXor {
            sources: ["a".into(), "b".into()],
            lag: 1,
        },
        9,
        300,
    );
    let data = MultiLagData::from_bundle(&b, (0, 1), &[1]).unwrap();
    let m = fit(
        &data,
        EstimatorConfig {
            epochs: 1,
            align_steps: 5,
            ..EstimatorConfig::default()
        },
    )
    .unwrap();
    let s = &data.lags[0];
    let t = m.build_alignment(&s.x1[..8 * 2], &s.x2[..8 * 2], 1).unwrap();
    assert_eq!((t.n(), t.classes()), (8, 2));
    assert!((0..2).all(|k| t.slice(k).iter().all(|&v| v > 0.0)));
    assert!(m.build_alignment(&s.x1[..2], &s.x2[..2], 1).is_err());
    assert!(m.build_alignment(&s.x1[..4], &s.x2[..4], 9).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    let bad_label = MultiLagData::new(
        ["a".into(), "b".into()],
        1,
        1,
        2,
        vec![LagSamples {
            lag: 1,
            x1: vec![0.0],
            x2: vec![0.0],
            y: vec![2],
        }],
    );
    assert!(bad_label.is_err());
    let cfg = EstimatorConfig {
        holdout: 1.5,
        ..EstimatorConfig::default()
    };
    assert!(matches!(EstimatorModel::new(1, 1, 2, &[1], cfg), Err(Error::Config(_))));
    let weights = EstimatorConfig {
        lag_weights: Some(vec![1.0]),
        ..EstimatorConfig::default()
    };
    assert!(EstimatorModel::new(1, 1, 2, &[1, 2], weights).is_err());
}
