//! Model configuration and the full trainable parameter set.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Activation, InputAttentionParams, InputPath, OutputAttentionParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rnn::LstmParams;
use crate::vocab::{init_embedding, init_scale, Vocabulary};

/// How attributes reach the recurrent network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    /// Input and output attention.
    #[default]
    #[serde(rename = "ATT")]
    Att,
    /// Input attention only.
    #[serde(rename = "ATT-IN")]
    AttInput,
    /// Output attention only.
    #[serde(rename = "ATT-OUT")]
    AttOutput,
    /// Elementwise max of attribute embeddings at every input step.
    #[serde(rename = "MAX")]
    Max,
    /// Concatenated attribute embeddings at every input step.
    #[serde(rename = "CON")]
    Con,
    /// No attributes; image feature only.
    #[serde(rename = "NONE")]
    None,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Att,
        Mode::AttInput,
        Mode::AttOutput,
        Mode::Max,
        Mode::Con,
        Mode::None,
    ];

    pub fn input_path(self, concat_slots: usize) -> InputPath {
        match self {
            Mode::Att | Mode::AttInput => InputPath::Attend,
            Mode::AttOutput | Mode::None => InputPath::Plain,
            Mode::Max => InputPath::Max,
            Mode::Con => InputPath::Concat(concat_slots),
        }
    }

    pub fn output_attention(self) -> bool {
        matches!(self, Mode::Att | Mode::AttOutput)
    }

    pub fn uses_attributes(self) -> bool {
        self != Mode::None
    }

    /// Attribute count used when the config does not set one.
    pub fn default_attribute_count(self) -> usize {
        match self {
            Mode::Max | Mode::Con => 3,
            _ => 10,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Att => "ATT",
            Mode::AttInput => "ATT-IN",
            Mode::AttOutput => "ATT-OUT",
            Mode::Max => "MAX",
            Mode::Con => "CON",
            Mode::None => "NONE",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// d
    pub embed_dim: usize,
    /// m
    pub input_dim: usize,
    /// n
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub activation: Activation,
    pub mode: Mode,
    pub concat_slots: usize,
    /// Output projection reuses `E` when set; otherwise a separate `E_out`.
    pub tied: bool,
    pub freeze_embedding: bool,
}

impl ModelConfig {
    pub fn input_path(&self) -> InputPath {
        self.mode.input_path(self.concat_slots)
    }

    /// Width of `u` in `x_t = W_xY u`.
    pub fn input_width(&self) -> usize {
        match self.mode {
            Mode::Con => self.embed_dim * (1 + self.concat_slots),
            _ => self.embed_dim,
        }
    }

    pub fn gate_width(&self) -> usize {
        match self.mode {
            Mode::Con => self.embed_dim * self.concat_slots,
            _ => self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size", "needs at least one non-reserved word"));
        }
        if self.mode == Mode::Con && self.concat_slots == 0 {
            return Err(Error::config("concat_slots", "must be at least 1"));
        }
        Ok(())
    }
}

/// Every trainable tensor of the captioner.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `E`, d × |Y|
    pub embedding: Tensor,
    /// Separate output projection when weights are untied, d × |Y|.
    pub output_embedding: Option<Tensor>,
    /// `W_xv`, m × feature_dim
    pub w_xv: Tensor,
    pub input: InputAttentionParams,
    pub output: OutputAttentionParams,
    pub lstm: LstmParams,
}

impl ModelParams {
    /// Scaled-uniform initialization; attribute gates start at one.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab: &Vocabulary,
        rng: &mut R,
        pretrained: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::arg("vocabulary size differs from model config"));
        }
        let (d, m, n, f) = (
            config.embed_dim,
            config.input_dim,
            config.hidden_dim,
            config.feature_dim,
        );
        let embedding = init_embedding(vocab, d, rng, pretrained)?.0;
        let output_embedding =
            (!config.tied).then(|| Tensor::uniform(&[d, vocab.len()], init_scale(d, vocab.len()), rng));
        let w_xv = Tensor::uniform(&[m, f], init_scale(f, m), rng);
        let width = config.input_width();
        let input = InputAttentionParams {
            u: Tensor::uniform(&[d, d], init_scale(d, d), rng),
            w_xy: Tensor::uniform(&[m, width], init_scale(width, m), rng),
            w_xa: Tensor::filled(&[config.gate_width()], 1.0),
        };
        let output = OutputAttentionParams {
            v: Tensor::uniform(&[n, d], init_scale(d, n), rng),
            w_yh: Tensor::uniform(&[d, n], init_scale(n, d), rng),
            w_ya: Tensor::filled(&[n], 1.0),
        };
        let lstm = LstmParams::init(m, n, rng);
        Ok(ModelParams {
            embedding,
            output_embedding,
            w_xv,
            input,
            output,
            lstm,
        })
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, m, n, v) = (config.embed_dim, config.input_dim, config.hidden_dim, config.vocab_size);
        ModelParams {
            embedding: Tensor::zeros(&[d, v]),
            output_embedding: (!config.tied).then(|| Tensor::zeros(&[d, v])),
            w_xv: Tensor::zeros(&[m, config.feature_dim]),
            input: InputAttentionParams {
                u: Tensor::zeros(&[d, d]),
                w_xy: Tensor::zeros(&[m, config.input_width()]),
                w_xa: Tensor::zeros(&[config.gate_width()]),
            },
            output: OutputAttentionParams {
                v: Tensor::zeros(&[n, d]),
                w_yh: Tensor::zeros(&[d, n]),
                w_ya: Tensor::zeros(&[n]),
            },
            lstm: LstmParams::zeros(m, n),
        }
    }

    /// A parameter set of the same shapes, all zero. Used for gradients.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        ModelParams {
            embedding: z(&self.embedding),
            output_embedding: self.output_embedding.as_ref().map(z),
            w_xv: z(&self.w_xv),
            input: InputAttentionParams {
                u: z(&self.input.u),
                w_xy: z(&self.input.w_xy),
                w_xa: z(&self.input.w_xa),
            },
            output: OutputAttentionParams {
                v: z(&self.output.v),
                w_yh: z(&self.output.w_yh),
                w_ya: z(&self.output.w_ya),
            },
            lstm: LstmParams {
                w: z(&self.lstm.w),
                b: z(&self.lstm.b),
            },
        }
    }

    /// Matrix used for the output logits.
    pub fn output_matrix(&self) -> &Tensor {
        self.output_embedding.as_ref().unwrap_or(&self.embedding)
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("E", &self.embedding)];
        if let Some(t) = &self.output_embedding {
            out.push(("E_out", t));
        }
        out.extend([
            ("W_xv", &self.w_xv),
            ("U", &self.input.u),
            ("W_xY", &self.input.w_xy),
            ("w_xA", &self.input.w_xa),
            ("V", &self.output.v),
            ("W_Yh", &self.output.w_yh),
            ("w_YA", &self.output.w_ya),
            ("lstm.W", &self.lstm.w),
            ("lstm.b", &self.lstm.b),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("E", &mut self.embedding)];
        if let Some(t) = &mut self.output_embedding {
            out.push(("E_out", t));
        }
        out.extend([
            ("W_xv", &mut self.w_xv),
            ("U", &mut self.input.u),
            ("W_xY", &mut self.input.w_xy),
            ("w_xA", &mut self.input.w_xa),
            ("V", &mut self.output.v),
            ("W_Yh", &mut self.output.w_yh),
            ("w_YA", &mut self.output.w_ya),
            ("lstm.W", &mut self.lstm.w),
            ("lstm.b", &mut self.lstm.b),
        ]);
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.named_mut() {
            t.scale(factor);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: Mode, tied: bool) -> (ModelConfig, Vocabulary) {
        let vocab = build_vocabulary(&[vec!["a", "b", "c", "d"]], 1).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 3,
            input_dim: 4,
            hidden_dim: 5,
            feature_dim: 2,
            activation: Activation::Tanh,
            mode,
            concat_slots: 3,
            tied,
            freeze_embedding: false,
        };
        (config, vocab)
    }

    #[test]
    fn shapes_follow_config() {
        let (config, vocab) = setup(Mode::Att, true);
        let p = ModelParams::init(&config, &vocab, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert_eq!(p.embedding.shape(), &[3, 7]);
        assert_eq!(p.input.w_xy.shape(), &[4, 3]);
        assert_eq!(p.output.v.shape(), &[5, 3]);
        assert_eq!(p.lstm.w.shape(), &[20, 9]);
        assert!(p.input.w_xa.data().iter().all(|&w| w == 1.0));
        assert_eq!(p.named().len(), 10);

        let (config, vocab) = setup(Mode::Con, false);
        let p = ModelParams::init(&config, &vocab, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert_eq!(p.input.w_xy.shape(), &[4, 12]);
        assert_eq!(p.input.w_xa.shape(), &[9]);
        assert_eq!(p.named().len(), 11);
        let z = ModelParams::zeros(&config);
        assert!(z.named().iter().zip(p.named()).all(|((na, a), (nb, b))| na == &nb && a.shape() == b.shape()));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("fancy".parse::<Mode>().is_err());
    }
}
