//! Model configuration and parameter layout.
//!
//! Parameter containers are generic over their slot type `T`: the same
//! layout holds values (`Tensor<S>`), tape handles (`NodeId`) or gradients.
//! Traversal order is fixed and doubles as the checkpoint order.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffmath::{NodeId, Tape, Tensor};
use crate::rng;
use crate::scalar::Scalar;

/// Prediction target of the task head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TaskKind {
    Classification { classes: usize },
    /// Heteroscedastic regression: the head emits (mean, log-variance).
    Regression,
}

impl TaskKind {
    pub fn head_outputs(&self) -> usize {
        match self {
            TaskKind::Classification { classes } => *classes,
            TaskKind::Regression => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent dimension `d`.
    pub latent_dim: usize,
    /// Shared embedding width `E`.
    pub embed_dim: usize,
    /// Hidden width `H` of the modality encoders and reconstruction decoders.
    pub hidden_dim: usize,
    /// Feature count `p_m` of each modality.
    pub modality_dims: Vec<usize>,
    /// Hidden width of the task head; 0 makes the head affine in `z`.
    pub head_hidden: usize,
    /// Feed the fused embedding of observed content to the reconstruction decoder.
    pub decoder_context: bool,
    /// Add a learned, always-present slot to attention pooling. Its weight
    /// shrinks as more modalities are observed, which lets the fused
    /// embedding (and hence the posterior variance) depend on how much
    /// evidence there is. Off, pooling is a convex combination of the
    /// observed modalities only.
    pub prior_slot: bool,
    pub task: TaskKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            embed_dim: 32,
            hidden_dim: 64,
            modality_dims: vec![16, 16, 16],
            head_hidden: 32,
            decoder_context: false,
            prior_slot: false,
            task: TaskKind::Classification { classes: 2 },
        }
    }
}

impl ModelConfig {
    pub fn modalities(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.latent_dim == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err("model dims must be positive".into());
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return Err("need at least one modality, each with positive dim".into());
        }
        if let TaskKind::Classification { classes } = self.task {
            if classes < 2 {
                return Err("classification needs at least 2 classes".into());
            }
        }
        Ok(())
    }
}

/// `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: T,
    pub b: T,
}

/// Two-layer perceptron with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Dense<T>,
    pub out: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout<T> {
    /// One MLP per modality, input `2·p_m` (values then keep flags).
    pub modalities: Vec<Mlp<T>>,
    /// Attention query, `[E, 1]`.
    pub query: T,
    pub key: T,
    pub value: T,
    /// Embedding of the always-present pooling slot, `[1, E]`.
    pub prior: Option<T>,
    pub mu: Dense<T>,
    pub logvar: Dense<T>,
}

/// Per-modality reconstruction decoder `(z [, context]) → p_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconLayout<T> {
    pub from_latent: T,
    pub from_context: Option<T>,
    pub bias: T,
    pub out: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHeadLayout<T> {
    pub hidden: Option<Dense<T>>,
    pub out: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayout<T> {
    pub recon: Vec<ReconLayout<T>>,
    pub task: TaskHeadLayout<T>,
}

pub type EncoderParams<S> = EncoderLayout<Tensor<S>>;
pub type DecoderParams<S> = DecoderLayout<Tensor<S>>;
pub type EncoderVars = EncoderLayout<NodeId>;
pub type DecoderVars = DecoderLayout<NodeId>;

type Visitor<'a, T, U> = dyn FnMut(String, &'a T) -> U + 'a;

impl<T> Dense<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut Visitor<'a, T, U>) -> Dense<U> {
        Dense {
            w: f(format!("{p}.w"), &self.w),
            b: f(format!("{p}.b"), &self.b),
        }
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl<T> Mlp<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut Visitor<'a, T, U>) -> Mlp<U> {
        Mlp {
            hidden: self.hidden.map(&format!("{p}.hidden"), f),
            out: self.out.map(&format!("{p}.out"), f),
        }
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.hidden.for_each_mut(f);
        self.out.for_each_mut(f);
    }
}

impl<T> EncoderLayout<T> {
    /// Maps every slot in canonical order, passing its dotted name.
    pub fn map<'a, U>(&'a self, f: &mut Visitor<'a, T, U>) -> EncoderLayout<U> {
        EncoderLayout {
            modalities: self
                .modalities
                .iter()
                .enumerate()
                .map(|(m, mlp)| mlp.map(&format!("enc.m{m}"), f))
                .collect(),
            query: f("agg.query".into(), &self.query),
            key: f("agg.key".into(), &self.key),
            value: f("agg.value".into(), &self.value),
            prior: self.prior.as_ref().map(|p| f("agg.prior".into(), p)),
            mu: self.mu.map("head.mu", f),
            logvar: self.logvar.map("head.logvar", f),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for mlp in &mut self.modalities {
            mlp.for_each_mut(f);
        }
        f(&mut self.query);
        f(&mut self.key);
        f(&mut self.value);
        if let Some(p) = &mut self.prior {
            f(p);
        }
        self.mu.for_each_mut(f);
        self.logvar.for_each_mut(f);
    }
}

impl<T> DecoderLayout<T> {
    pub fn map<'a, U>(&'a self, f: &mut Visitor<'a, T, U>) -> DecoderLayout<U> {
        DecoderLayout {
            recon: self
                .recon
                .iter()
                .enumerate()
                .map(|(m, r)| {
                    let p = format!("dec.m{m}");
                    ReconLayout {
                        from_latent: f(format!("{p}.from_latent"), &r.from_latent),
                        from_context: r
                            .from_context
                            .as_ref()
                            .map(|c| f(format!("{p}.from_context"), c)),
                        bias: f(format!("{p}.bias"), &r.bias),
                        out: r.out.map(&format!("{p}.out"), f),
                    }
                })
                .collect(),
            task: self.task_map(f),
        }
    }

    /// Maps only the task head, leaving reconstruction decoders out.
    pub fn task_map<'a, U>(&'a self, f: &mut Visitor<'a, T, U>) -> TaskHeadLayout<U> {
        TaskHeadLayout {
            hidden: self.task.hidden.as_ref().map(|h| h.map("task.hidden", f)),
            out: self.task.out.map("task.out", f),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for r in &mut self.recon {
            f(&mut r.from_latent);
            if let Some(c) = &mut r.from_context {
                f(c);
            }
            f(&mut r.bias);
            r.out.for_each_mut(f);
        }
        self.task_for_each_mut(f);
    }

    pub fn task_for_each_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        if let Some(h) = &mut self.task.hidden {
            h.for_each_mut(f);
        }
        self.task.out.for_each_mut(f);
    }
}

/// Every trainable array of the model plus the calibration temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<S>,
    pub decoder: DecoderParams<S>,
    /// Logit temperature fitted during calibration; 1 otherwise.
    pub temperature: S,
}

fn glorot<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..fan_in * fan_out)
        .map(|_| S::lit(dist.sample(rng)))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape matches data")
}

fn dense<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Dense<Tensor<S>> {
    Dense {
        w: glorot(rng, fan_in, fan_out),
        b: Tensor::zeros(&[fan_out]),
    }
}

impl<S: Scalar> Model<S> {
    /// Seeded initialization. The log-variance head starts at zero weights and
    /// zero bias, so every initial posterior has unit variance.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "init");
        let (d, e, h) = (config.latent_dim, config.embed_dim, config.hidden_dim);
        let encoder = EncoderLayout {
            modalities: config
                .modality_dims
                .iter()
                .map(|&p| Mlp {
                    hidden: dense(&mut r, 2 * p, h),
                    out: dense(&mut r, h, e),
                })
                .collect(),
            query: glorot(&mut r, e, 1),
            key: glorot(&mut r, e, e),
            value: glorot(&mut r, e, e),
            prior: config.prior_slot.then(|| Tensor::zeros(&[1, e])),
            mu: dense(&mut r, e, d),
            logvar: Dense {
                w: Tensor::zeros(&[e, d]),
                b: Tensor::zeros(&[d]),
            },
        };
        let recon = config
            .modality_dims
            .iter()
            .map(|&p| ReconLayout {
                from_latent: glorot(&mut r, d, h),
                from_context: config.decoder_context.then(|| glorot(&mut r, e, h)),
                bias: Tensor::zeros(&[h]),
                out: dense(&mut r, h, p),
            })
            .collect();
        let outputs = config.task.head_outputs();
        let task = if config.head_hidden > 0 {
            TaskHeadLayout {
                hidden: Some(dense(&mut r, d, config.head_hidden)),
                out: dense(&mut r, config.head_hidden, outputs),
            }
        } else {
            TaskHeadLayout {
                hidden: None,
                out: dense(&mut r, d, outputs),
            }
        };
        Self {
            config: config.clone(),
            encoder,
            decoder: DecoderLayout { recon, task },
            temperature: S::one(),
        }
    }

    /// All arrays in checkpoint order with their names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.encoder.map(&mut |n, t: &Tensor<S>| out.push((n, t.clone())));
        self.decoder.map(&mut |n, t: &Tensor<S>| out.push((n, t.clone())));
        out.push(("calib.temperature".into(), Tensor::vector(vec![self.temperature])));
        out
    }

    /// Overwrites arrays in checkpoint order; shapes must already match.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor<S>>) -> Result<(), String> {
        let expected = self.named_tensors();
        if tensors.len() != expected.len() {
            return Err(format!(
                "expected {} arrays, got {}",
                expected.len(),
                tensors.len()
            ));
        }
        for ((name, want), got) in expected.iter().zip(&tensors) {
            if want.shape() != got.shape() {
                return Err(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    want.shape(),
                    got.shape()
                ));
            }
        }
        let mut it = tensors.into_iter();
        self.encoder
            .for_each_mut(&mut |t| *t = it.next().expect("length checked"));
        self.decoder
            .for_each_mut(&mut |t| *t = it.next().expect("length checked"));
        self.temperature = it.next().expect("length checked").data()[0];
        Ok(())
    }

    pub fn bind_encoder(&self, tape: &mut Tape<S>) -> EncoderVars {
        self.encoder.map(&mut |_, t| tape.leaf(t.clone()))
    }

    pub fn bind_decoder(&self, tape: &mut Tape<S>) -> DecoderVars {
        self.decoder.map(&mut |_, t| tape.leaf(t.clone()))
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
