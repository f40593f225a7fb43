//! Whole-model finite-difference verification of the analytic backward pass.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Activation;
use crate::attributes::AttributeSet;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::numerics::{finite_diff_gradient, gradient_check, GradientReport, Tensor};
use crate::objective::{backward, total_loss, RegularizerConfig};
use crate::rnn::EncodedExample;
use crate::vocab::{Vocabulary, END, START, UNK};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub num_attributes: usize,
    pub caption_len: usize,
    pub mode: Mode,
    pub activation: Activation,
    pub tied: bool,
    pub freeze_embedding: bool,
    pub regularizer: RegularizerConfig,
    pub step: f64,
    pub tolerance: f64,
    /// Fault injection: perturb the analytic gradient of this tensor.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            hidden_dim: 8,
            input_dim: 8,
            embed_dim: 6,
            vocab_size: 20,
            feature_dim: 5,
            num_attributes: 3,
            caption_len: 5,
            mode: Mode::Att,
            activation: Activation::Tanh,
            tied: true,
            freeze_embedding: false,
            regularizer: RegularizerConfig::default(),
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub size: usize,
    pub report: GradientReport,
    pub max_absolute_error: f64,
}

impl TensorCheck {
    /// Relative error within `tolerance`, or absolute error below `abs_floor`.
    /// The second clause covers coordinates whose true gradient is so small
    /// that central differences are limited by rounding in the loss.
    pub fn within(&self, tolerance: f64, abs_floor: f64) -> bool {
        self.report.max_relative_error <= tolerance || self.max_absolute_error <= abs_floor
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.report.max_relative_error <= self.tolerance)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.report.max_relative_error)
            .fold(0.0, f64::max)
    }
}

/// A random tiny model, vocabulary, and training example for the options.
pub fn tiny_instance(opts: &GradcheckOptions) -> Result<(ModelConfig, ModelParams, EncodedExample)> {
    if opts.vocab_size < 4 + opts.num_attributes {
        return Err(Error::arg("vocabulary too small for the requested attributes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let words = [START, END, UNK]
        .into_iter()
        .map(str::to_string)
        .chain((3..opts.vocab_size).map(|i| format!("w{i}")))
        .collect();
    let vocab = Vocabulary::from_words(words)?;
    let config = ModelConfig {
        vocab_size: opts.vocab_size,
        embed_dim: opts.embed_dim,
        input_dim: opts.input_dim,
        hidden_dim: opts.hidden_dim,
        feature_dim: opts.feature_dim,
        activation: opts.activation,
        mode: opts.mode,
        concat_slots: opts.num_attributes,
        tied: opts.tied,
        freeze_embedding: opts.freeze_embedding,
    };
    let mut params = ModelParams::init(&config, &vocab, &mut rng, None)?;
    // Move gates and biases off their structured starting values so every
    // coordinate is exercised.
    for (name, t) in params.named_mut() {
        if matches!(name, "w_xA" | "w_YA" | "lstm.b") {
            *t = Tensor::uniform(t.shape(), 1.0, &mut rng);
        }
    }
    let content = opts.vocab_size - 3;
    let attr_ids: Vec<usize> = sample(&mut rng, content, opts.num_attributes)
        .into_iter()
        .map(|i| i + 3)
        .collect();
    let mut caption: Vec<usize> = (0..opts.caption_len.saturating_sub(1))
        .map(|_| rng.random_range(3..opts.vocab_size))
        .collect();
    caption.push(Vocabulary::END_ID);
    let features = (0..opts.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let attrs = if opts.mode.uses_attributes() {
        AttributeSet::from_ids(&attr_ids)
    } else {
        AttributeSet::default()
    };
    Ok((config, params, EncodedExample { features, attrs, caption }))
}

/// Compares the analytic gradient of every trainable tensor against
/// central differences of the full loss.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (config, params, example) = tiny_instance(opts)?;
    let reg = opts.regularizer;
    let (_, cache) = total_loss(&example, &params, &config, &reg)?;
    let mut grads = backward(&cache, &params, &config, &reg)?;
    if let Some(name) = &opts.corrupt {
        let t = grads
            .get_mut(name)
            .ok_or_else(|| Error::arg(format!("no tensor named `{name}`")))?;
        for v in t.data_mut() {
            *v = *v * 1.5 + 1e-3;
        }
    }

    let mut tensors = Vec::new();
    for (name, tensor) in params.named() {
        let analytic = grads.get(name).expect("same layout").data().to_vec();
        let loss_at = |values: &[f64]| {
            let mut probe = params.clone();
            probe
                .get_mut(name)
                .expect("same layout")
                .data_mut()
                .copy_from_slice(values);
            total_loss(&example, &probe, &config, &reg)
                .map(|(l, _)| l.total)
                .unwrap_or(f64::NAN)
        };
        let numeric = if name == "E" && config.freeze_embedding {
            vec![0.0; tensor.len()]
        } else {
            finite_diff_gradient(loss_at, tensor.data(), opts.step)?
        };
        let max_absolute_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        tensors.push(TensorCheck {
            name,
            size: tensor.len(),
            report: gradient_check(&analytic, &numeric)?,
            max_absolute_error,
        });
    }
    Ok(GradcheckReport {
        tensors,
        tolerance: opts.tolerance,
    })
}
