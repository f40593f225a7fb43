//! Recurrent backbone: image injection at `t = 0`, the LSTM transition, and
//! the per-step orchestration of both attention layers. Includes full
//! backpropagation through time.

use rand::Rng;

use crate::attention::{
    input_step_backward, input_step_forward, output_step_backward, output_step_forward, AttentionGrads,
    InputStepCache, OutputStepCache,
};
use crate::attributes::AttributeSet;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{sigmoid, Tensor};
use crate::vocab::{init_scale, TokenId, Vocabulary};

/// Gate weights over `[x; h]` stacked as input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// 4n × (m + n)
    pub w: Tensor,
    /// 4n
    pub b: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w: Tensor::zeros(&[4 * hidden, input + hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform weights, zero biases except the forget gate, which starts at 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = Tensor::uniform(&[4 * hidden, input + hidden], init_scale(input + hidden, hidden), rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        LstmParams { w, b }
    }

    pub fn hidden_size(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input_size(&self) -> usize {
        self.w.cols() - self.hidden_size()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub t: usize,
}

impl RnnState {
    pub fn zeros(hidden: usize) -> Self {
        RnnState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
            t: 0,
        }
    }
}

/// `x_0 = W_xv v`.
pub fn init_input(v: &[f64], w_xv: &Tensor) -> Result<Vec<f64>> {
    w_xv.matvec(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCache {
    pub xh: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

pub fn lstm_step(state: &RnnState, x: &[f64], params: &LstmParams) -> Result<RnnState> {
    lstm_step_cached(state, x, params).map(|(s, _)| s)
}

pub fn lstm_step_cached(state: &RnnState, x: &[f64], params: &LstmParams) -> Result<(RnnState, LstmCache)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite LSTM input".into()));
    }
    let n = params.hidden_size();
    if state.h.len() != n || x.len() != params.input_size() {
        return Err(Error::arg("LSTM input or state has the wrong size"));
    }
    let xh: Vec<f64> = x.iter().chain(&state.h).copied().collect();
    let mut pre = params.w.matvec(&xh)?;
    for (p, b) in pre.iter_mut().zip(params.b.data()) {
        *p += b;
    }
    let i: Vec<f64> = pre[..n].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = pre[n..2 * n].iter().map(|&v| sigmoid(v)).collect();
    let o: Vec<f64> = pre[2 * n..3 * n].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = pre[3 * n..].iter().map(|&v| v.tanh()).collect();
    let c: Vec<f64> = (0..n).map(|k| f[k] * state.c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..n).map(|k| o[k] * tanh_c[k]).collect();
    let next = RnnState { h, c, t: state.t + 1 };
    let cache = LstmCache {
        xh,
        i,
        f,
        o,
        g,
        c_prev: state.c.clone(),
        tanh_c,
    };
    Ok((next, cache))
}

/// Backward through one LSTM step. Returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_step_backward(
    cache: &LstmCache,
    grad_h: &[f64],
    grad_c: &[f64],
    params: &LstmParams,
    grads: &mut LstmParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = params.hidden_size();
    let m = params.input_size();
    let mut grad_pre = vec![0.0; 4 * n];
    let mut grad_c_prev = vec![0.0; n];
    for k in 0..n {
        let dc = grad_c[k] + grad_h[k] * cache.o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
        let d_o = grad_h[k] * cache.tanh_c[k];
        let d_i = dc * cache.g[k];
        let d_f = dc * cache.c_prev[k];
        let d_g = dc * cache.i[k];
        grad_c_prev[k] = dc * cache.f[k];
        grad_pre[k] = d_i * cache.i[k] * (1.0 - cache.i[k]);
        grad_pre[n + k] = d_f * cache.f[k] * (1.0 - cache.f[k]);
        grad_pre[2 * n + k] = d_o * cache.o[k] * (1.0 - cache.o[k]);
        grad_pre[3 * n + k] = d_g * (1.0 - cache.g[k] * cache.g[k]);
    }
    grads.w.add_outer(&grad_pre, &cache.xh, 1.0);
    for (gb, gp) in grads.b.data_mut().iter_mut().zip(&grad_pre) {
        *gb += gp;
    }
    let grad_xh = params.w.matvec_t(&grad_pre)?;
    Ok((grad_xh[..m].to_vec(), grad_xh[m..].to_vec(), grad_c_prev))
}

/// Image feature, attribute set, and target caption (END-terminated ids).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub features: Vec<f64>,
    pub attrs: AttributeSet,
    pub caption: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepInput {
    /// `t = 0`: `x_0 = W_xv v`.
    Image,
    /// `t > 0`: word-and-attribute input.
    Word(InputStepCache),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub input: StepInput,
    pub x: Vec<f64>,
    pub lstm: LstmCache,
    pub h: Vec<f64>,
    pub output: OutputStepCache,
}

impl StepCache {
    pub fn alpha(&self) -> Option<&[f64]> {
        match &self.input {
            StepInput::Word(c) => c.alpha.as_deref(),
            StepInput::Image => None,
        }
    }

    pub fn beta(&self) -> Option<&[f64]> {
        self.output.beta.as_deref()
    }

    pub fn probs(&self) -> &[f64] {
        &self.output.probs
    }
}

/// Forward values for a whole teacher-forced caption.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCache {
    pub features: Vec<f64>,
    pub targets: Vec<TokenId>,
    pub steps: Vec<StepCache>,
}

impl SequenceCache {
    pub fn distributions(&self) -> Vec<&[f64]> {
        self.steps.iter().map(StepCache::probs).collect()
    }

    /// α rows for `t ≥ 1` (empty when input attention is off).
    pub fn alpha_rows(&self) -> Vec<Vec<f64>> {
        self.steps.iter().filter_map(|s| s.alpha().map(<[f64]>::to_vec)).collect()
    }

    /// β rows for every step (empty when output attention is off).
    pub fn beta_rows(&self) -> Vec<Vec<f64>> {
        self.steps.iter().filter_map(|s| s.beta().map(<[f64]>::to_vec)).collect()
    }
}

fn check_attrs(config: &ModelConfig, attrs: &AttributeSet) -> Result<()> {
    if config.mode.uses_attributes() && attrs.is_empty() {
        return Err(Error::arg(format!("mode {} needs a non-empty attribute set", config.mode)));
    }
    if let Some(&bad) = attrs.ids().iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::arg(format!("attribute id {bad} outside the vocabulary")));
    }
    Ok(())
}

/// Zero state, `x_0` from the image, then one step per caption token with
/// the ground-truth previous word fed back (teacher forcing).
pub fn forward_sequence(example: &EncodedExample, params: &ModelParams, config: &ModelConfig) -> Result<SequenceCache> {
    let caption = &example.caption;
    if caption.last() != Some(&Vocabulary::END_ID) {
        return Err(Error::arg("caption must be non-empty and end with END"));
    }
    check_attrs(config, &example.attrs)?;
    let path = config.input_path();
    let attend_out = config.mode.output_attention();
    let mut state = RnnState::zeros(config.hidden_dim);
    let mut steps = Vec::with_capacity(caption.len());
    for t in 0..caption.len() {
        let (x, input) = if t == 0 {
            (init_input(&example.features, &params.w_xv)?, StepInput::Image)
        } else {
            let (x, c) = input_step_forward(&path, caption[t - 1], &example.attrs, &params.embedding, &params.input)?;
            (x, StepInput::Word(c))
        };
        let (next, lstm) = lstm_step_cached(&state, &x, &params.lstm)?;
        let output = output_step_forward(
            attend_out,
            &next.h,
            &example.attrs,
            &params.embedding,
            params.output_matrix(),
            &params.output,
            config.activation,
        )?;
        steps.push(StepCache {
            input,
            x,
            lstm,
            h: next.h.clone(),
            output,
        });
        state = next;
    }
    Ok(SequenceCache {
        features: example.features.clone(),
        targets: caption.clone(),
        steps,
    })
}

/// Gradients arriving at one step from the loss.
#[derive(Debug, Clone, Default)]
pub struct StepUpstream {
    pub grad_logits: Vec<f64>,
    pub grad_alpha: Option<Vec<f64>>,
    pub grad_beta: Option<Vec<f64>>,
}

/// Backpropagation through time over a cached sequence.
pub fn backward_sequence(
    cache: &SequenceCache,
    upstream: &[StepUpstream],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ModelParams> {
    if upstream.len() != cache.steps.len() {
        return Err(Error::State("upstream gradients do not match the cached steps".into()));
    }
    let mut grads = params.zeros_like();
    let path = config.input_path();
    let n = config.hidden_dim;
    let mut grad_h_next = vec![0.0; n];
    let mut grad_c_next = vec![0.0; n];

    let ModelParams {
        embedding: g_e,
        output_embedding: g_out,
        w_xv: g_wxv,
        input: g_in,
        output: g_outp,
        lstm: g_lstm,
    } = &mut grads;
    let mut sinks = AttentionGrads {
        e: g_e,
        out_embedding: g_out.as_mut(),
        input: g_in,
        output: g_outp,
    };

    for (step, up) in cache.steps.iter().zip(upstream).rev() {
        let mut grad_h = output_step_backward(
            &step.output,
            &step.h,
            &up.grad_logits,
            up.grad_beta.as_deref(),
            params.output_matrix(),
            &params.output,
            config.activation,
            &mut sinks,
        )?;
        for (a, b) in grad_h.iter_mut().zip(&grad_h_next) {
            *a += b;
        }
        let (grad_x, grad_h_prev, grad_c_prev) =
            lstm_step_backward(&step.lstm, &grad_h, &grad_c_next, &params.lstm, g_lstm)?;
        match &step.input {
            StepInput::Image => g_wxv.add_outer(&grad_x, &cache.features, 1.0),
            StepInput::Word(c) => {
                input_step_backward(&path, c, &grad_x, up.grad_alpha.as_deref(), &params.input, &mut sinks)?
            }
        }
        grad_h_next = grad_h_prev;
        grad_c_next = grad_c_prev;
    }
    if config.freeze_embedding {
        grads.embedding.fill(0.0);
    }
    Ok(grads)
}
