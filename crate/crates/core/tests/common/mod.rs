//! Helpers shared by the integration tests: a finite-difference gradient
//! harness, small random fixtures, and brute-force metric references.

#![allow(dead_code)]

use latentset::diffmath::{NodeId, Tape, Tensor};
use latentset::encoder::PatientRecord;
use latentset::gaussian::{self, PosteriorNodes};
use latentset::model::{DecoderVars, EncoderVars, Model, ModelConfig, TaskKind};
use latentset::objectives::{
    encode_for_training, loss_cons, loss_nce, loss_rec, loss_reg, loss_sup, loss_sup_mc,
    loss_total_with_noise, BatchNoise, ConsistencyMode, DivergenceKind, LossWeights,
    SimilarityInput, TrainingExample,
};
use latentset::viewgen::{paired_views, View, ViewPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// Gradient harness

/// `d=4, E=8` with three modalities, a hidden task head, decoder context and
/// the prior slot, so every parameter family is exercised.
pub fn grad_config(task: TaskKind) -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        embed_dim: 8,
        hidden_dim: 6,
        modality_dims: vec![3, 4, 2],
        head_hidden: 5,
        decoder_context: true,
        prior_slot: true,
        task,
    }
}

/// Every parameter redrawn from `N(0, 0.5²)`; log-variance biases spread over
/// `[-7, 4]` so that some σ fall outside the default `[0.05, 5]` band.
pub fn random_model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::init(cfg, seed);
    let mut r = rng(seed ^ 0xA5A5);
    model.encoder.for_each_mut(&mut |t| {
        for x in t.data_mut() {
            *x = 0.5 * r.sample::<f64, _>(StandardNormal);
        }
    });
    model.decoder.for_each_mut(&mut |t| {
        for x in t.data_mut() {
            *x = 0.5 * r.sample::<f64, _>(StandardNormal);
        }
    });
    let d = cfg.latent_dim;
    let bias = model.encoder.logvar.b.data_mut();
    for (i, b) in bias.iter_mut().enumerate() {
        *b = -7.0 + 11.0 * i as f64 / (d - 1) as f64;
    }
    model
}

pub fn random_records(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<PatientRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| PatientRecord {
            id: format!("r{i}"),
            modalities: cfg.modality_dims.iter().map(|&p| normals(&mut r, p)).collect(),
            mask: vec![true; cfg.modalities()],
            label: Some(match cfg.task {
                TaskKind::Classification { classes } => (i % classes) as f64,
                TaskKind::Regression => r.sample(StandardNormal),
            }),
            z_true: None,
        })
        .collect()
}

/// Two views per record, redrawn until both hold out at least one entry.
pub fn random_views(records: &[PatientRecord], seed: u64) -> Vec<(View, View)> {
    let policy = ViewPolicy {
        p_modality_drop: 0.3,
        p_feature_drop: 0.4,
        ..ViewPolicy::default()
    };
    records
        .iter()
        .map(|rec| {
            let mut stream = policy.rng_for(seed, &rec.id, 0);
            loop {
                let (a, b) = paired_views(rec, &policy, &mut stream).unwrap();
                if a.held_out_count() > 0 && b.held_out_count() > 0 {
                    return (a, b);
                }
            }
        })
        .collect()
}

pub fn flat_params(model: &Model<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    model.encoder.map(&mut |_, t| out.extend_from_slice(t.data()));
    model.decoder.map(&mut |_, t| out.extend_from_slice(t.data()));
    out
}

pub fn set_flat_params(model: &mut Model<f64>, values: &[f64]) {
    let mut it = values.iter();
    let mut fill = |t: &mut Tensor<f64>| {
        for x in t.data_mut() {
            *x = *it.next().expect("enough values");
        }
    };
    model.encoder.for_each_mut(&mut fill);
    model.decoder.for_each_mut(&mut fill);
}

pub type LossFn<'a> =
    dyn Fn(&mut Tape<f64>, &Model<f64>, &EncoderVars, &DecoderVars) -> NodeId + 'a;

pub fn loss_value(model: &Model<f64>, f: &LossFn<'_>) -> f64 {
    let mut tape = Tape::new();
    let enc = model.bind_encoder(&mut tape);
    let dec = model.bind_decoder(&mut tape);
    let l = f(&mut tape, model, &enc, &dec);
    tape.item(l)
}

/// Analytic gradient, one tensor per parameter, in [`flat_params`] order.
pub fn analytic_gradient(model: &Model<f64>, f: &LossFn<'_>) -> Vec<(String, Vec<f64>)> {
    let mut tape = Tape::new();
    let enc = model.bind_encoder(&mut tape);
    let dec = model.bind_decoder(&mut tape);
    let l = f(&mut tape, model, &enc, &dec);
    let grads = tape.backward(l).unwrap();
    let mut out = Vec::new();
    enc.map(&mut |name, &id| out.push((name, grads.get(id).data().to_vec())));
    dec.map(&mut |name, &id| out.push((name, grads.get(id).data().to_vec())));
    out
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)`.
    pub worst: f64,
    pub worst_param: String,
    /// Parameters whose gradient stays below the round-off floor in both
    /// computations.
    pub inactive: usize,
    pub checked: usize,
}

/// Compares the tape gradient with central differences of step `h`.
///
/// The relative error is taken per parameter tensor. Central differences
/// carry round-off of order `ε·|L|/h`, so tensors whose gradient norm stays
/// below `floor = 1e-8·max(1, |L|)` in both computations are counted as
/// inactive and must agree to that absolute level instead.
pub fn check_gradient(model: &Model<f64>, f: &LossFn<'_>, h: f64) -> GradCheck {
    let analytic = analytic_gradient(model, f);
    let floor = 1e-8 * loss_value(model, f).abs().max(1.0);
    let base = flat_params(model);
    let mut probe = model.clone();
    let mut offset = 0;
    let mut report = GradCheck {
        worst: 0.0,
        worst_param: String::new(),
        inactive: 0,
        checked: 0,
    };
    for (name, g) in &analytic {
        let mut numeric = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            let mut shifted = base.clone();
            shifted[offset + j] = base[offset + j] + h;
            set_flat_params(&mut probe, &shifted);
            let up = loss_value(&probe, f);
            shifted[offset + j] = base[offset + j] - h;
            set_flat_params(&mut probe, &shifted);
            let down = loss_value(&probe, f);
            numeric.push((up - down) / (2.0 * h));
        }
        offset += g.len();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = g.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(g).max(norm(&numeric));
        let err = if scale < floor {
            report.inactive += 1;
            if norm(&diff) < floor {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            report.checked += 1;
            norm(&diff) / scale
        };
        if err > report.worst || report.worst_param.is_empty() {
            report.worst = err;
            report.worst_param = name.clone();
        }
    }
    report
}

/// Fixed fixture for one gradient check: model, records, views, noise.
pub struct GradFixture {
    pub model: Model<f64>,
    pub records: Vec<PatientRecord>,
    pub views: Vec<(View, View)>,
    pub noise: BatchNoise<f64>,
    pub extra_noise: Vec<Tensor<f64>>,
}

pub const GRAD_BATCH: usize = 4;

impl GradFixture {
    pub fn new(task: TaskKind, seed: u64) -> Self {
        let cfg = grad_config(task);
        let records = random_records(&cfg, GRAD_BATCH, seed);
        let views = random_views(&records, seed);
        let mut r = rng(seed ^ 0x5151);
        let noise = BatchNoise::draw(&mut r, GRAD_BATCH, cfg.latent_dim);
        let extra_noise = (0..3)
            .map(|_| BatchNoise::<f64>::draw(&mut r, GRAD_BATCH, cfg.latent_dim).a)
            .collect();
        Self {
            model: random_model(&cfg, seed),
            records,
            views,
            noise,
            extra_noise,
        }
    }

    pub fn views_a(&self) -> Vec<&View> {
        self.views.iter().map(|(a, _)| a).collect()
    }

    pub fn views_b(&self) -> Vec<&View> {
        self.views.iter().map(|(_, b)| b).collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.label.unwrap()).collect()
    }
}

fn posterior(
    tape: &mut Tape<f64>,
    m: &Model<f64>,
    enc: &EncoderVars,
    views: &[&View],
) -> PosteriorNodes {
    encode_for_training(tape, m, enc, views, false).unwrap().posterior
}

/// Named loss terms over a fixture, each a pure function of the parameters.
pub fn loss_terms(fx: &GradFixture) -> Vec<(&'static str, Box<LossFn<'_>>)> {
    let mut terms: Vec<(&'static str, Box<LossFn<'_>>)> = Vec::new();
    terms.push((
        "rec",
        Box::new(|t, m, enc, dec| {
            let va = fx.views_a();
            let q = encode_for_training(t, m, enc, &va, false).unwrap();
            loss_rec(t, m, dec, &q, &va, fx.noise.a.clone()).unwrap()
        }),
    ));
    for (name, kind) in [
        ("cons_skl", DivergenceKind::Skl),
        ("cons_w2", DivergenceKind::W2),
        ("cons_kl", DivergenceKind::KlForward),
    ] {
        terms.push((
            name,
            Box::new(move |t, m, enc, _| {
                let qa = posterior(t, m, enc, &fx.views_a());
                let qb = posterior(t, m, enc, &fx.views_b());
                loss_cons(t, qa, qb, kind).unwrap()
            }),
        ));
    }
    terms.push((
        "nce_means",
        Box::new(|t, m, enc, _| {
            let qa = posterior(t, m, enc, &fx.views_a());
            let qb = posterior(t, m, enc, &fx.views_b());
            loss_nce(t, qa.mean, qb.mean, 0.1).unwrap()
        }),
    ));
    terms.push((
        "nce_samples",
        Box::new(|t, m, enc, _| {
            let qa = posterior(t, m, enc, &fx.views_a());
            let qb = posterior(t, m, enc, &fx.views_b());
            let za = gaussian::sample_nodes(t, qa, fx.noise.a.clone()).unwrap();
            let zb = gaussian::sample_nodes(t, qb, fx.noise.b.clone()).unwrap();
            loss_nce(t, za, zb, 0.1).unwrap()
        }),
    ));
    terms.push((
        "reg",
        Box::new(|t, m, enc, _| {
            let q = posterior(t, m, enc, &fx.views_a());
            loss_reg(t, q).unwrap()
        }),
    ));
    terms.push((
        "var",
        Box::new(|t, m, enc, _| {
            let q = posterior(t, m, enc, &fx.views_a());
            gaussian::var_penalty_nodes(t, q, 0.05, 5.0).unwrap()
        }),
    ));
    terms.push((
        "sup",
        Box::new(|t, m, enc, dec| {
            let q = posterior(t, m, enc, &fx.views_a());
            let z = gaussian::sample_nodes(t, q, fx.noise.a.clone()).unwrap();
            loss_sup(t, m, dec, z, &fx.labels(), 1.0).unwrap()
        }),
    ));
    terms.push((
        "sup_mc",
        Box::new(|t, m, enc, dec| {
            let q = posterior(t, m, enc, &fx.views_a());
            loss_sup_mc(t, m, dec, q, &fx.extra_noise, &fx.labels()).unwrap()
        }),
    ));
    for (name, consistency, similarity) in [
        ("total_pairwise", ConsistencyMode::Pairwise, SimilarityInput::Means),
        ("total_prototype", ConsistencyMode::Prototype, SimilarityInput::Samples),
    ] {
        terms.push((
            name,
            Box::new(move |t, m, enc, dec| {
                let batch: Vec<TrainingExample<'_>> = fx
                    .records
                    .iter()
                    .zip(&fx.views)
                    .map(|(record, (a, b))| TrainingExample {
                        record,
                        a: a.clone(),
                        b: b.clone(),
                    })
                    .collect();
                let weights = LossWeights {
                    lambda_sup: 0.5,
                    consistency,
                    similarity,
                    ..LossWeights::default()
                };
                loss_total_with_noise(t, m, enc, dec, &batch, &weights, fx.noise.clone())
                    .unwrap()
                    .total
            }),
        ));
    }
    terms
}

/// Worst gradient check over every loss term, for both task kinds and
/// `instances` random fixtures each. Returns `(term, report)` pairs.
pub fn gradient_suite(instances: u64) -> Vec<(String, GradCheck)> {
    let mut out = Vec::new();
    for task in [TaskKind::Classification { classes: 2 }, TaskKind::Regression] {
        let tag = match task {
            TaskKind::Classification { .. } => "cls",
            TaskKind::Regression => "reg",
        };
        for seed in 0..instances {
            let fx = GradFixture::new(task.clone(), 100 + seed);
            for (name, f) in loss_terms(&fx) {
                out.push((format!("{tag}/{name}/{seed}"), check_gradient(&fx.model, &*f, 1e-5)));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Brute-force metric references

pub fn ece_reference(labels: &[usize], probs: &[Vec<f64>], bins: usize) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..labels.len())
            .filter(|&i| {
                let p = &probs[i];
                let mut best = 0;
                for c in 1..p.len() {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                let conf = p[best];
                conf >= lo && (conf < hi || b == bins - 1)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut hits = 0usize;
        let mut conf_sum = 0.0;
        for &i in &members {
            let p = &probs[i];
            let mut best = 0;
            for c in 1..p.len() {
                if p[c] > p[best] {
                    best = c;
                }
            }
            conf_sum += p[best];
            if best == labels[i] {
                hits += 1;
            }
        }
        let k = members.len() as f64;
        total += (k / n) * (hits as f64 / k - conf_sum / k).abs();
    }
    total
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn auroc_reference(labels: &[bool], scores: &[f64]) -> f64 {
    let mut twice_wins = 0u64;
    let mut pairs = 0u64;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    twice_wins += 2;
                } else if scores[i] == scores[j] {
                    twice_wins += 1;
                }
            }
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

/// Step-wise average precision over the distinct score thresholds.
pub fn auprc_reference(labels: &[bool], scores: &[f64]) -> f64 {
    let positives = labels.iter().filter(|&&y| y).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let flagged: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = flagged.iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / flagged.len() as f64);
        prev_recall = recall;
    }
    ap
}

pub fn nll_reference(labels: &[usize], probs: &[Vec<f64>], clip: f64) -> f64 {
    let s: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&y, p)| -(p[y].max(clip).min(1.0 - clip)).ln())
        .sum();
    s / labels.len() as f64
}

pub fn mse_reference(t: &[f64], m: &[f64]) -> f64 {
    t.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64
}

/// Rank of each value: count of strictly smaller values plus the mid-point
/// of its tie group.
pub fn ranks_reference(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_reference(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (ranks_reference(a), ranks_reference(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Random metric fixture: 2–50 records, coarse probabilities so that ties
/// and exact bin edges occur.
pub struct MetricFixture {
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub means: Vec<f64>,
}

pub fn metric_fixture(seed: u64) -> MetricFixture {
    let mut r = rng(seed);
    let n = r.gen_range(2..=50);
    let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let coarse = seed % 2 == 0;
    let probs = (0..n)
        .map(|_| {
            let p1: f64 = if coarse {
                r.gen_range(0..=20) as f64 / 20.0
            } else {
                r.gen()
            };
            vec![1.0 - p1, p1]
        })
        .collect();
    MetricFixture {
        labels,
        probs,
        targets: normals(&mut r, n),
        means: normals(&mut r, n),
    }
}

// ---------------------------------------------------------------------------
// Divergence and product-of-experts oracles

use latentset::gaussian::{GaussianPosterior, StandardPrior};
use latentset::synthdata::{Generator, GeneratorSpec, WeightStructure};

fn log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (ln_2pi + v.ln() + (x - m) * (x - m) / v))
        .sum()
}

/// `E_a[log a(x) − log b(x)]` from `samples` draws of `x ~ a`.
pub fn kl_monte_carlo(a: &GaussianPosterior<f64>, b: &GaussianPosterior<f64>, samples: usize, seed: u64) -> f64 {
    let va: Vec<f64> = a.log_var().iter().map(|l| l.exp()).collect();
    let vb: Vec<f64> = b.log_var().iter().map(|l| l.exp()).collect();
    let mut r = rng(seed);
    let mut x = vec![0.0; a.dim()];
    let mut total = 0.0;
    for _ in 0..samples {
        for i in 0..x.len() {
            let e: f64 = r.sample(StandardNormal);
            x[i] = a.mean()[i] + va[i].sqrt() * e;
        }
        total += log_density(&x, a.mean(), &va) - log_density(&x, b.mean(), &vb);
    }
    total / samples as f64
}

pub fn random_posterior(r: &mut impl Rng, d: usize) -> GaussianPosterior<f64> {
    let mean = (0..d).map(|_| r.gen_range(-1.5..1.5)).collect();
    let log_var = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    GaussianPosterior::new(mean, log_var).unwrap()
}

/// Worst relative gap between closed-form KL and a Monte Carlo estimate over
/// `pairs` random diagonal pairs in dimension `d`.
pub fn kl_oracle_gap(pairs: usize, d: usize, samples: usize) -> f64 {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for p in 0..pairs {
        let a = random_posterior(&mut r, d);
        let b = random_posterior(&mut r, d);
        let exact = gaussian::kl(&a, &b).unwrap();
        let mc = kl_monte_carlo(&a, &b, samples, 7000 + p as u64);
        worst = worst.max((mc - exact).abs() / exact);
    }
    worst
}

/// Largest absolute gap, over mean and variance entries, between the
/// product of per-modality likelihood experts and the full exact posterior
/// on a diagonal generator.
pub fn poe_gap(records: usize) -> f64 {
    let spec = GeneratorSpec {
        weights: WeightStructure::Diagonal { min: 0.4, max: 1.6 },
        records,
        seed: 11,
        ..GeneratorSpec::default()
    };
    let g = Generator::new(&spec).unwrap();
    let d = spec.latent_dim;
    let mut worst: f64 = 0.0;
    for rec in g.generate() {
        let experts: Vec<_> = (0..spec.modalities())
            .map(|m| g.likelihood_expert(&rec, m).unwrap())
            .collect();
        let fused = gaussian::poe_fuse(&experts, StandardPrior::new(d)).unwrap();
        let exact = g.exact_posterior(&rec, None).unwrap();
        for i in 0..d {
            worst = worst.max((fused.mean()[i] - exact.mean[i]).abs());
            worst = worst.max((fused.log_var()[i].exp() - exact.covariance[(i, i)]).abs());
        }
    }
    worst
}
