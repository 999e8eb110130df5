mod common;

use latentset::encoder::PatientRecord;
use latentset::metrics;
use latentset::synthdata::{Generator, GeneratorSpec, TaskSpec};
use latentset::viewgen::{sample_view, ViewPolicy};
use nalgebra::{DMatrix, DVector};

#[test]
fn latent_sample_mean_is_within_the_lln_bound() {
    let spec = GeneratorSpec {
        records: 100_000,
        seed: 3,
        ..GeneratorSpec::default()
    };
    let records = Generator::new(&spec).unwrap().generate();
    let n = records.len() as f64;
    let bound = 4.0 / n.sqrt();
    for i in 0..spec.latent_dim {
        let mean = records.iter().map(|r| r.z_true.as_ref().unwrap()[i]).sum::<f64>() / n;
        assert!(mean.abs() < bound, "coordinate {i}: {mean} vs bound {bound}");
    }
}

#[test]
fn posterior_error_matches_posterior_trace() {
    // E‖z − E[z|x]‖² = E tr Cov[z|x]; covariance depends only on the mask here.
    let spec = GeneratorSpec {
        records: 10_000,
        seed: 8,
        ..GeneratorSpec::default()
    };
    let g = Generator::new(&spec).unwrap();
    let mut err = 0.0;
    let mut trace = 0.0;
    for rec in g.generate() {
        let post = g.exact_posterior(&rec, None).unwrap();
        let z = DVector::from_column_slice(rec.z_true.as_ref().unwrap());
        err += (z - &post.mean).norm_squared();
        trace += post.trace();
    }
    let ratio = err / trace;
    println!("squared error / trace = {ratio:.4}");
    assert!((ratio - 1.0).abs() < 0.05);
}

#[test]
fn adding_modalities_never_increases_the_trace() {
    let g = Generator::new(&GeneratorSpec {
        records: 50,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let subsets: [&[bool]; 4] = [
        &[false, false, false],
        &[true, false, false],
        &[true, true, false],
        &[true, true, true],
    ];
    for rec in g.generate() {
        let traces: Vec<f64> = subsets
            .iter()
            .map(|m| g.exact_posterior(&rec, Some(m)).unwrap().trace())
            .collect();
        assert_eq!(traces[0], 8.0);
        for w in traces.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{traces:?}");
        }
    }
}

#[test]
fn scalar_posterior_by_hand() {
    // d=1, W=1, σ=1, x=2: precision 2, mean 1, variance ½
    let spec = GeneratorSpec {
        latent_dim: 1,
        modality_dims: vec![1],
        noise_std: vec![1.0],
        records: 1,
        ..GeneratorSpec::default()
    };
    let g = Generator::from_parts(&spec, vec![DMatrix::from_element(1, 1, 1.0)], DVector::from_element(1, 1.0), 0.0)
        .unwrap();
    let rec = PatientRecord {
        id: "x".into(),
        modalities: vec![vec![2.0]],
        mask: vec![true],
        label: Some(1.0),
        z_true: None,
    };
    let post = g.exact_posterior(&rec, None).unwrap();
    assert!((post.mean[0] - 1.0).abs() < 1e-15);
    assert!((post.covariance[(0, 0)] - 0.5).abs() < 1e-15);
    let prior = g.exact_posterior(&rec, Some(&[false])).unwrap();
    assert_eq!((prior.mean[0], prior.covariance[(0, 0)]), (0.0, 1.0));
}

#[test]
fn binary_labels_hit_the_requested_positive_rate() {
    let spec = GeneratorSpec {
        records: 20_000,
        task: TaskSpec::Binary {
            weight_norm: 3.0,
            positive_rate: 0.3,
        },
        ..GeneratorSpec::default()
    };
    let records = Generator::new(&spec).unwrap().generate();
    let rate = records.iter().filter(|r| r.label == Some(1.0)).count() as f64 / records.len() as f64;
    // binomial standard error ≈ 0.0032
    assert!((rate - 0.3).abs() < 0.015, "positive rate {rate}");
}

#[test]
fn bayes_predictor_is_informative_and_well_calibrated() {
    let spec = GeneratorSpec {
        records: 3000,
        ..GeneratorSpec::default()
    };
    let g = Generator::new(&spec).unwrap();
    let records = g.generate();
    let report = g.bayes_optimal_metrics(&records, 0.0, 200, 1).unwrap();
    let auroc = report.get("auroc").unwrap();
    let ece = report.get("ece").unwrap();
    println!("bayes auroc {auroc:.4} ece {ece:.4}");
    assert!(auroc > 0.8);
    assert!(ece < 0.03);
}

#[test]
fn uninformative_scores_give_chance_auroc() {
    // a constant predictor ranks every pair as a tie
    let labels: Vec<bool> = (0..1000).map(|i| i % 3 == 0).collect();
    assert_eq!(metrics::auroc(&labels, &vec![0.5; 1000]).unwrap(), 0.5);
}

#[test]
fn min_keep_holds_over_many_draws() {
    let spec = GeneratorSpec {
        records: 1,
        ..GeneratorSpec::default()
    };
    let rec = Generator::new(&spec).unwrap().record(0);
    for min_keep in 1..=3 {
        let policy = ViewPolicy {
            p_modality_drop: 0.9,
            min_keep,
            ..ViewPolicy::default()
        };
        let mut stream = policy.rng_for(5, &rec.id, 0);
        for _ in 0..100_000 / 3 {
            let v = sample_view(&rec, &policy, &mut stream).unwrap();
            assert!(v.modality_mask.iter().filter(|&&m| m).count() >= min_keep);
        }
    }
}
