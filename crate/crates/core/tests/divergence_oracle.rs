mod common;

use latentset::gaussian::{self, GaussianPosterior};

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let start = std::time::Instant::now();
    let gap = common::kl_oracle_gap(20, 4, 1_000_000);
    println!("worst relative gap {gap:.4e} in {:?}", start.elapsed());
    assert!(gap < 0.01);
}

#[test]
fn skl_and_w2_are_symmetric_and_zero_on_the_diagonal() {
    let mut r = common::rng(5);
    for _ in 0..50 {
        let a = common::random_posterior(&mut r, 4);
        let b = common::random_posterior(&mut r, 4);
        assert_eq!(gaussian::skl(&a, &b).unwrap(), gaussian::skl(&b, &a).unwrap());
        assert!((gaussian::w2_sq(&a, &b).unwrap() - gaussian::w2_sq(&b, &a).unwrap()).abs() < 1e-15);
        assert_eq!(gaussian::skl(&a, &a).unwrap(), 0.0);
        assert_eq!(gaussian::w2_sq(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn one_dimensional_kl_by_hand() {
    // KL(N(0,1) || N(1,4)) = ½(¼ + ¼ − 1 + ln 4)
    let a = GaussianPosterior::new(vec![0.0], vec![0.0]).unwrap();
    let b = GaussianPosterior::new(vec![1.0], vec![4f64.ln()]).unwrap();
    let want = 0.5 * (0.25 + 0.25 - 1.0 + 4f64.ln());
    assert!((gaussian::kl(&a, &b).unwrap() - want).abs() < 1e-15);
}

#[test]
fn product_of_likelihood_experts_equals_exact_posterior() {
    let gap = common::poe_gap(200);
    println!("worst PoE gap {gap:.3e}");
    assert!(gap < 1e-10);
}
