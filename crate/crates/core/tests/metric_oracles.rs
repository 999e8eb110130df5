mod common;

use common::{metric_fixture, MetricFixture};
use latentset::metrics::{self, PROB_CLIP};

fn binary(fx: &MetricFixture) -> (Vec<bool>, Vec<f64>) {
    (fx.labels.iter().map(|&y| y == 1).collect(), fx.probs.iter().map(|p| p[1]).collect())
}

#[test]
fn ece_matches_reference() {
    for seed in 0..100 {
        let fx = metric_fixture(seed);
        for bins in [1, 5, 10, 15] {
            let got = metrics::ece(&fx.labels, &fx.probs, bins).unwrap();
            let want = common::ece_reference(&fx.labels, &fx.probs, bins);
            assert!((got - want).abs() <= 1e-12, "seed {seed} bins {bins}: {got} vs {want}");
        }
    }
}

#[test]
fn auroc_matches_pair_counting() {
    for seed in 0..100 {
        let fx = metric_fixture(seed);
        let (labels, scores) = binary(&fx);
        let got = metrics::auroc(&labels, &scores).unwrap();
        let want = common::auroc_reference(&labels, &scores);
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn auprc_matches_threshold_scan() {
    for seed in 0..100 {
        let fx = metric_fixture(seed);
        let (labels, scores) = binary(&fx);
        let got = metrics::auprc(&labels, &scores).unwrap();
        let want = common::auprc_reference(&labels, &scores);
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn nll_and_mse_match_reference() {
    for seed in 0..100 {
        let fx = metric_fixture(seed);
        let got = metrics::nll(&fx.labels, &fx.probs).unwrap();
        let want = common::nll_reference(&fx.labels, &fx.probs, PROB_CLIP);
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
        let got = metrics::mse(&fx.targets, &fx.means).unwrap();
        assert!((got - common::mse_reference(&fx.targets, &fx.means)).abs() <= 1e-12);
    }
}

#[test]
fn spearman_matches_reference() {
    for seed in 0..100 {
        let fx = metric_fixture(seed);
        let scores: Vec<f64> = fx.probs.iter().map(|p| p[1]).collect();
        let got = metrics::spearman(&scores, &fx.targets).unwrap();
        let want = common::spearman_reference(&scores, &fx.targets);
        match (got, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-12, "seed {seed}: {g} vs {w}"),
            (g, w) => assert_eq!(g, w, "seed {seed}"),
        }
        let ranks = metrics::average_ranks(&scores);
        assert_eq!(ranks, common::ranks_reference(&scores), "seed {seed}");
    }
}

#[test]
fn hand_checked_values() {
    // one positive above both negatives, one tied with a negative
    let labels = [true, true, false, false];
    let scores = [0.9, 0.4, 0.4, 0.1];
    assert_eq!(metrics::auroc(&labels, &scores).unwrap(), 0.875);
    // thresholds 0.9 (P=1, R=½) and 0.4 (P=⅔, R=1)
    assert!((metrics::auprc(&labels, &scores).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    assert_eq!(metrics::spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
    assert_eq!(metrics::spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
}
