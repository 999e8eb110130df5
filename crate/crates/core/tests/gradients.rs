mod common;

use common::{gradient_suite, GradFixture};
use latentset::model::TaskKind;
use latentset::objectives::{encode_for_training, loss_rec};

#[test]
fn every_loss_term_matches_central_differences() {
    let results = gradient_suite(2);
    let mut failures = Vec::new();
    for (term, check) in &results {
        println!(
            "{term:<28} worst {:.2e} at {} ({} checked, {} inactive)",
            check.worst, check.worst_param, check.checked, check.inactive
        );
        if !(check.worst < 1e-4) {
            failures.push(term.clone());
        }
        assert!(check.checked > 0, "{term}: no parameter reached the loss");
    }
    assert!(failures.is_empty(), "gradient mismatch in {failures:?}");
}

#[test]
fn masked_out_modality_gets_no_encoder_gradient() {
    let fx = GradFixture::new(TaskKind::Classification { classes: 2 }, 7);
    let rec = &fx.records[0];
    let mut view = latentset::viewgen::View::from_record(rec, Some(&[true, false, true])).unwrap();
    view.hold[0][0] = true;
    view.held_out[0][0] = rec.modalities[0][0];
    view.keep[0][0] = false;
    view.observed[0][0] = 0.0;
    let f = |t: &mut latentset::diffmath::Tape<f64>,
             m: &latentset::model::Model<f64>,
             enc: &latentset::model::EncoderVars,
             dec: &latentset::model::DecoderVars| {
        let q = encode_for_training(t, m, enc, &[&view], false).unwrap();
        loss_rec(t, m, dec, &q, &[&view], latentset::diffmath::Tensor::matrix(1, 4, fx.noise.a.row(0).to_vec()).unwrap()).unwrap()
    };
    let grads = common::analytic_gradient(&fx.model, &f);
    let mut touched_other = false;
    for (name, g) in &grads {
        if name.starts_with("enc.m1.") {
            assert!(g.iter().all(|&x| x == 0.0), "{name} has gradient");
        }
        if name.starts_with("enc.m0.") && g.iter().any(|&x| x != 0.0) {
            touched_other = true;
        }
    }
    assert!(touched_other);
}
