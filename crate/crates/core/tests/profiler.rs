mod common;

use common::{cascaded, entangled};
use tempo_prune::model::{forward, synth_corpus, synth_weights, ConfigHash, ModelConfig, Weights};
use tempo_prune::profiler::{calibrate, unit_scores, AASProfile};
use tempo_prune::Error;

fn profile(cfg: &ModelConfig, gamma: f64, beta: f64, samples: usize) -> AASProfile {
    let w = synth_weights(cfg, gamma, beta, cfg.seed).unwrap();
    let corpus = synth_corpus(cfg, samples, 99).unwrap();
    calibrate(cfg, &w, &corpus).unwrap()
}

#[test]
fn single_sample_profile_equals_direct_scores() {
    for cfg in [entangled(2, 3, 2, 8, 2, 3, false), cascaded(2, 3, 2, 8, 2, 1, 3, true)] {
        let w = synth_weights(&cfg, 0.5, 0.5, 1).unwrap();
        let corpus = synth_corpus(&cfg, 1, 5).unwrap();
        let prof = calibrate(&cfg, &w, &corpus).unwrap();
        let out = forward(&cfg, &w, &corpus[0], None, None).unwrap();
        assert_eq!(prof.values(), unit_scores(&cfg, &out.maps).unwrap());
        assert_eq!(prof.num_samples, 1);
    }
}

#[test]
fn duplicated_corpus_leaves_profile_unchanged() {
    let cfg = entangled(2, 3, 2, 8, 2, 4, false);
    let w = synth_weights(&cfg, 0.3, 0.2, 1).unwrap();
    let corpus = synth_corpus(&cfg, 3, 5).unwrap();
    let doubled: Vec<_> = corpus.iter().chain(&corpus).cloned().collect();
    let a = calibrate(&cfg, &w, &corpus).unwrap().values();
    let b = calibrate(&cfg, &w, &doubled).unwrap().values();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn strong_decay_gives_strictly_decreasing_scores() {
    let cfgs = [entangled(2, 4, 2, 8, 2, 8, false), cascaded(2, 4, 2, 8, 2, 1, 8, false)];
    for cfg in cfgs {
        let scores = profile(&cfg, 10.0, 0.0, 4).values();
        assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
    }
}

#[test]
fn scores_are_probabilities() {
    for cfg in [entangled(3, 4, 3, 8, 4, 3, true), cascaded(3, 4, 3, 8, 4, 2, 3, false)] {
        for s in profile(&cfg, 0.2, 0.1, 3).values() {
            assert!((0.0..=1.0).contains(&s));
        }
    }
}

#[test]
fn calibration_is_reproducible() {
    let cfg = cascaded(2, 3, 2, 8, 2, 1, 4, false);
    let a = profile(&cfg, 0.5, 0.5, 5);
    let b = profile(&cfg, 0.5, 0.5, 5);
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn larger_decay_never_raises_scores() {
    // Only the bias differs between the two weight sets; projections are
    // drawn from the same seed.
    for cfg in [entangled(2, 4, 2, 8, 2, 4, false), cascaded(2, 4, 2, 8, 2, 1, 4, false)] {
        let low = profile(&cfg, 1.0, 0.0, 4).values();
        let high = profile(&cfg, 2.0, 0.0, 4).values();
        for (u, (l, h)) in low.iter().zip(&high).enumerate() {
            assert!(h <= l, "unit {u}: {h} > {l}");
        }
    }
}

#[test]
fn empty_corpus_is_rejected() {
    let cfg = entangled(2, 2, 2, 4, 1, 1, false);
    let w = Weights::zeros(&cfg).unwrap();
    assert!(calibrate(&cfg, &w, &[]).is_err());
}

#[test]
fn profile_round_trips_and_checks_hash() {
    let cfg = entangled(2, 3, 2, 8, 2, 3, false);
    let prof = profile(&cfg, 0.5, 0.0, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.json");
    prof.save(&path).unwrap();
    assert_eq!(AASProfile::load(&path, Some(cfg.hash())).unwrap(), prof);
    assert!(matches!(
        AASProfile::load(&path, Some(ConfigHash(cfg.hash().0 ^ 1))),
        Err(Error::HashMismatch { .. })
    ));
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(AASProfile::load(&path, None), Err(Error::Malformed(_))));
}

#[test]
fn curve_csv_has_one_row_per_unit() {
    let cfg = cascaded(2, 3, 2, 8, 2, 1, 5, false);
    let prof = profile(&cfg, 1.0, 0.0, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aas_curve.csv");
    prof.write_curve_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("unit_index,aas"));
    assert_eq!(lines.count(), 5);
}
