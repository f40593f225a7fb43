//! Input and output semantic attention over attribute words.
//!
//! Input side, for `t > 0`:
//!
//! ```text
//! α_i ∝ exp((E y_{t−1})ᵀ U (E y^i))
//! x_t = W_xY (E y_{t−1} + diag(w_xA) Σ_i α_i E y^i)
//! ```
//!
//! Output side, for every `t`:
//!
//! ```text
//! r_i = V σ(E y^i)                    (attribute activation in state space)
//! β_i ∝ exp(h_tᵀ r_i)
//! p_t = softmax(Eᵀ W_Yh (h_t + diag(w_YA) Σ_i β_i r_i))
//! ```
//!
//! The attended sum on the output side is taken over `r_i` rather than
//! `σ(E y^i)` so that it lives in the `n`-dimensional state space and can be
//! added to `h_t` when `n ≠ d`. With `n = d` and `V = I` the two coincide.
//!
//! Only the factored `Eᵀ U E` form of the input bilinear score is ever
//! built; the `|Y| × |Y|` matrix it stands for is not materialized.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attributes::AttributeSet;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, hadamard, softmax, softmax_backward, Tensor};
use crate::vocab::{embed, TokenId};

/// Nonlinearity applied to attribute embeddings before the output-side score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::arg(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

/// `U` (d×d), `W_xY` (m×d, wider for concatenation fusion) and the gate `w_xA`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputAttentionParams {
    pub u: Tensor,
    pub w_xy: Tensor,
    pub w_xa: Tensor,
}

/// `V` (n×d), `W_Yh` (d×n) and the gate `w_YA` (n).
#[derive(Debug, Clone, PartialEq)]
pub struct OutputAttentionParams {
    pub v: Tensor,
    pub w_yh: Tensor,
    pub w_ya: Tensor,
}

/// A probability vector aligned with an attribute list.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights(pub Vec<f64>);

impl AttentionWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn non_empty(attrs: &AttributeSet) -> Result<&[TokenId]> {
    if attrs.is_empty() {
        return Err(Error::arg("attention over an empty attribute set"));
    }
    Ok(attrs.ids())
}

fn aligned(attrs: &AttributeSet, weights: &AttentionWeights) -> Result<()> {
    if attrs.len() != weights.len() {
        return Err(Error::arg(format!(
            "{} attention weights for {} attributes",
            weights.len(),
            attrs.len()
        )));
    }
    Ok(())
}

/// Softmax over attribute scores whose normalizer is summed in token-id
/// order, so reordering the attribute list permutes the weights exactly.
fn attribute_softmax(scores: &[f64], ids: &[TokenId]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::arg("attention over an empty attribute set"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("attention score is not finite".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = id_order(ids).into_iter().map(|i| p[i]).sum();
    p.iter_mut().for_each(|w| *w /= total);
    Ok(p)
}

/// `Σ_i w_i v_i` accumulated in token-id order.
fn attribute_sum<V: AsRef<[f64]>>(ids: &[TokenId], weights: &[f64], vectors: &[V], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in id_order(ids) {
        axpy(&mut out, weights[i], vectors[i].as_ref());
    }
    out
}

fn id_order(ids: &[TokenId]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    order
}

/// `α_i ∝ exp((E y_prev)ᵀ U (E y^i))`.
pub fn input_scores(
    prev_token: TokenId,
    attrs: &AttributeSet,
    e: &Tensor,
    u: &Tensor,
) -> Result<AttentionWeights> {
    let ids = non_empty(attrs)?;
    let e_prev = embed(e, prev_token)?;
    let g = u.matvec_t(&e_prev)?;
    let scores = ids
        .iter()
        .map(|&id| embed(e, id).map(|ei| dot(&g, &ei)))
        .collect::<Result<Vec<f64>>>()?;
    attribute_softmax(&scores, ids).map(AttentionWeights)
}

/// `x_t = W_xY (E y_prev + diag(w_xA) Σ_i α_i E y^i)`.
pub fn input_vector(
    prev_token: TokenId,
    attrs: &AttributeSet,
    alpha: &AttentionWeights,
    e: &Tensor,
    params: &InputAttentionParams,
) -> Result<Vec<f64>> {
    aligned(attrs, alpha)?;
    let d = e.rows();
    if params.w_xa.len() != d || params.w_xy.cols() != d {
        return Err(Error::arg("input attention parameters do not match embedding size"));
    }
    let mut u = embed(e, prev_token)?;
    let embeds = attrs.ids().iter().map(|&id| embed(e, id)).collect::<Result<Vec<_>>>()?;
    let attended = attribute_sum(attrs.ids(), alpha.as_slice(), &embeds, d);
    for ((ui, wi), ai) in u.iter_mut().zip(params.w_xa.data()).zip(&attended) {
        *ui += wi * ai;
    }
    params.w_xy.matvec(&u)
}

/// `β_i ∝ exp(hᵀ V σ(E y^i))`.
pub fn output_scores(
    h: &[f64],
    attrs: &AttributeSet,
    e: &Tensor,
    v: &Tensor,
    activation: Activation,
) -> Result<AttentionWeights> {
    let ids = non_empty(attrs)?;
    if v.rows() != h.len() {
        return Err(Error::arg("V row count differs from hidden size"));
    }
    let scores = ids
        .iter()
        .map(|&id| {
            let s: Vec<f64> = embed(e, id)?.into_iter().map(|x| activation.apply(x)).collect();
            Ok(dot(h, &v.matvec(&s)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    attribute_softmax(&scores, ids).map(AttentionWeights)
}

/// `p_t = softmax(Eᵀ W_Yh (h + diag(w_YA) Σ_i β_i V σ(E y^i)))`.
///
/// `out_embedding` is `E` itself when weights are tied.
pub fn output_distribution(
    h: &[f64],
    attrs: &AttributeSet,
    beta: &AttentionWeights,
    e: &Tensor,
    out_embedding: &Tensor,
    params: &OutputAttentionParams,
    activation: Activation,
) -> Result<Vec<f64>> {
    aligned(attrs, beta)?;
    let n = h.len();
    if params.w_ya.len() != n || params.v.rows() != n || params.w_yh.cols() != n {
        return Err(Error::arg("output attention parameters do not match hidden size"));
    }
    let mut z = h.to_vec();
    let projected = attrs
        .ids()
        .iter()
        .map(|&id| {
            let s: Vec<f64> = embed(e, id)?.into_iter().map(|x| activation.apply(x)).collect();
            params.v.matvec(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let attended = attribute_sum(attrs.ids(), beta.as_slice(), &projected, n);
    for ((zi, wi), ai) in z.iter_mut().zip(params.w_ya.data()).zip(&attended) {
        *zi += wi * ai;
    }
    let k = params.w_yh.matvec(&z)?;
    softmax(&out_embedding.matvec_t(&k)?)
}

/// How attribute information enters the input `x_t` for `t > 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum InputPath {
    /// Previous word only.
    Plain,
    /// Attention-weighted sum of attribute embeddings.
    Attend,
    /// Elementwise max over the embeddings of the given attributes.
    Max,
    /// Concatenation of this many attribute embeddings, zero-padded.
    Concat(usize),
}

/// Everything the input-side backward pass needs from one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStepCache {
    pub prev: TokenId,
    pub attr_ids: Vec<TokenId>,
    pub e_prev: Vec<f64>,
    pub attr_embeds: Vec<Vec<f64>>,
    /// `Uᵀ E y_prev`
    pub query: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    /// Fused or attended attribute vector before gating.
    pub fused: Vec<f64>,
    /// For max fusion: which attribute supplied each coordinate.
    pub argmax: Vec<usize>,
    /// Pre-projection input `u`, so that `x = W_xY u`.
    pub u: Vec<f64>,
}

pub fn input_step_forward(
    path: &InputPath,
    prev: TokenId,
    attrs: &AttributeSet,
    e: &Tensor,
    params: &InputAttentionParams,
) -> Result<(Vec<f64>, InputStepCache)> {
    let d = e.rows();
    let e_prev = embed(e, prev)?;
    let ids: Vec<TokenId> = attrs.ids().to_vec();
    let attr_embeds = ids
        .iter()
        .map(|&id| embed(e, id))
        .collect::<Result<Vec<_>>>()?;
    let mut cache = InputStepCache {
        prev,
        attr_ids: ids,
        e_prev,
        attr_embeds,
        query: Vec::new(),
        alpha: None,
        fused: Vec::new(),
        argmax: Vec::new(),
        u: Vec::new(),
    };
    match path {
        InputPath::Plain => {
            cache.u = cache.e_prev.clone();
        }
        InputPath::Attend => {
            if cache.attr_ids.is_empty() {
                return Err(Error::arg("attention over an empty attribute set"));
            }
            cache.query = params.u.matvec_t(&cache.e_prev)?;
            let scores: Vec<f64> = cache.attr_embeds.iter().map(|ei| dot(&cache.query, ei)).collect();
            let alpha = attribute_softmax(&scores, &cache.attr_ids)?;
            let fused = attribute_sum(&cache.attr_ids, &alpha, &cache.attr_embeds, d);
            cache.u = gated_sum(&cache.e_prev, params.w_xa.data(), &fused);
            cache.alpha = Some(alpha);
            cache.fused = fused;
        }
        InputPath::Max => {
            if cache.attr_ids.is_empty() {
                return Err(Error::arg("max fusion over an empty attribute set"));
            }
            let mut fused = cache.attr_embeds[0].clone();
            let mut argmax = vec![0; d];
            for (i, ei) in cache.attr_embeds.iter().enumerate().skip(1) {
                for r in 0..d {
                    if ei[r] > fused[r] {
                        fused[r] = ei[r];
                        argmax[r] = i;
                    }
                }
            }
            cache.u = gated_sum(&cache.e_prev, params.w_xa.data(), &fused);
            cache.fused = fused;
            cache.argmax = argmax;
        }
        InputPath::Concat(slots) => {
            let mut fused = vec![0.0; slots * d];
            for (slot, ei) in cache.attr_embeds.iter().take(*slots).enumerate() {
                fused[slot * d..(slot + 1) * d].copy_from_slice(ei);
            }
            let mut u = cache.e_prev.clone();
            u.extend(hadamard(params.w_xa.data(), &fused));
            cache.u = u;
            cache.fused = fused;
        }
    }
    let x = params.w_xy.matvec(&cache.u)?;
    Ok((x, cache))
}

fn gated_sum(base: &[f64], gate: &[f64], v: &[f64]) -> Vec<f64> {
    base.iter()
        .zip(gate)
        .zip(v)
        .map(|((b, g), x)| b + g * x)
        .collect()
}

/// Gradient sinks for the tensors the attention layers touch.
pub struct AttentionGrads<'a> {
    pub e: &'a mut Tensor,
    pub out_embedding: Option<&'a mut Tensor>,
    pub input: &'a mut InputAttentionParams,
    pub output: &'a mut OutputAttentionParams,
}

/// Backward through one input step. `grad_alpha` is any extra gradient
/// arriving directly on `α` (the regularizer's).
pub fn input_step_backward(
    path: &InputPath,
    cache: &InputStepCache,
    grad_x: &[f64],
    grad_alpha: Option<&[f64]>,
    params: &InputAttentionParams,
    grads: &mut AttentionGrads<'_>,
) -> Result<()> {
    let d = cache.e_prev.len();
    grads.input.w_xy.add_outer(grad_x, &cache.u, 1.0);
    let grad_u = params.w_xy.matvec_t(grad_x)?;
    let mut grad_prev = grad_u[..d].to_vec();
    match path {
        InputPath::Plain => {}
        InputPath::Attend => {
            let alpha = cache
                .alpha
                .as_ref()
                .ok_or_else(|| Error::State("input cache lacks attention weights".into()))?;
            for (r, g) in grads.input.w_xa.data_mut().iter_mut().enumerate() {
                *g += grad_u[r] * cache.fused[r];
            }
            let grad_fused = hadamard(&grad_u, params.w_xa.data());
            let mut grad_alpha_total: Vec<f64> = cache
                .attr_embeds
                .iter()
                .map(|ei| dot(&grad_fused, ei))
                .collect();
            if let Some(extra) = grad_alpha {
                axpy(&mut grad_alpha_total, 1.0, extra);
            }
            let grad_scores = softmax_backward(alpha, &grad_alpha_total);
            let u_rows: Vec<Vec<f64>> = cache
                .attr_embeds
                .iter()
                .map(|ei| params.u.matvec(ei))
                .collect::<Result<_>>()?;
            for (i, &id) in cache.attr_ids.iter().enumerate() {
                let ds = grad_scores[i];
                grads.input.u.add_outer(&cache.e_prev, &cache.attr_embeds[i], ds);
                axpy(&mut grad_prev, ds, &u_rows[i]);
                let mut grad_ei: Vec<f64> = grad_fused.iter().map(|g| alpha[i] * g).collect();
                axpy(&mut grad_ei, ds, &cache.query);
                grads.e.add_to_column(id, &grad_ei, 1.0);
            }
        }
        InputPath::Max => {
            for (r, g) in grads.input.w_xa.data_mut().iter_mut().enumerate() {
                *g += grad_u[r] * cache.fused[r];
            }
            for r in 0..d {
                let id = cache.attr_ids[cache.argmax[r]];
                let cols = grads.e.cols();
                grads.e.data_mut()[r * cols + id] += grad_u[r] * params.w_xa.data()[r];
            }
        }
        InputPath::Concat(_) => {
            let gated = &grad_u[d..];
            for (j, g) in grads.input.w_xa.data_mut().iter_mut().enumerate() {
                *g += gated[j] * cache.fused[j];
            }
            for (slot, &id) in cache.attr_ids.iter().take(cache.fused.len() / d).enumerate() {
                let grad_e: Vec<f64> = (0..d)
                    .map(|r| gated[slot * d + r] * params.w_xa.data()[slot * d + r])
                    .collect();
                grads.e.add_to_column(id, &grad_e, 1.0);
            }
        }
    }
    grads.e.add_to_column(cache.prev, &grad_prev, 1.0);
    Ok(())
}

/// Everything the output-side backward pass needs from one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputStepCache {
    pub attr_ids: Vec<TokenId>,
    /// `σ(E y^i)`
    pub activated: Vec<Vec<f64>>,
    /// `V σ(E y^i)`
    pub projected: Vec<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    /// `Σ_i β_i V σ(E y^i)`
    pub attended: Vec<f64>,
    /// `h + diag(w_YA) · attended`
    pub z: Vec<f64>,
    /// `W_Yh z`
    pub k: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn output_step_forward(
    attend: bool,
    h: &[f64],
    attrs: &AttributeSet,
    e: &Tensor,
    out_embedding: &Tensor,
    params: &OutputAttentionParams,
    activation: Activation,
) -> Result<OutputStepCache> {
    let n = h.len();
    let mut cache = OutputStepCache {
        attr_ids: Vec::new(),
        activated: Vec::new(),
        projected: Vec::new(),
        beta: None,
        attended: vec![0.0; n],
        z: h.to_vec(),
        k: Vec::new(),
        probs: Vec::new(),
    };
    if attend {
        if attrs.is_empty() {
            return Err(Error::arg("attention over an empty attribute set"));
        }
        cache.attr_ids = attrs.ids().to_vec();
        for &id in &cache.attr_ids {
            let s: Vec<f64> = embed(e, id)?.into_iter().map(|x| activation.apply(x)).collect();
            let r = params.v.matvec(&s)?;
            cache.activated.push(s);
            cache.projected.push(r);
        }
        let scores: Vec<f64> = cache.projected.iter().map(|r| dot(h, r)).collect();
        let beta = attribute_softmax(&scores, &cache.attr_ids)?;
        cache.attended = attribute_sum(&cache.attr_ids, &beta, &cache.projected, n);
        cache.z = gated_sum(h, params.w_ya.data(), &cache.attended);
        cache.beta = Some(beta);
    }
    cache.k = params.w_yh.matvec(&cache.z)?;
    let logits = out_embedding.matvec_t(&cache.k)?;
    cache.probs = softmax(&logits)?;
    Ok(cache)
}

/// Backward through one output step; returns `dL/dh`.
#[allow(clippy::too_many_arguments)]
pub fn output_step_backward(
    cache: &OutputStepCache,
    h: &[f64],
    grad_logits: &[f64],
    grad_beta: Option<&[f64]>,
    out_embedding: &Tensor,
    params: &OutputAttentionParams,
    activation: Activation,
    grads: &mut AttentionGrads<'_>,
) -> Result<Vec<f64>> {
    match grads.out_embedding.as_deref_mut() {
        Some(out) => out.add_outer(&cache.k, grad_logits, 1.0),
        None => grads.e.add_outer(&cache.k, grad_logits, 1.0),
    }
    let grad_k = out_embedding.matvec(grad_logits)?;
    grads.output.w_yh.add_outer(&grad_k, &cache.z, 1.0);
    let grad_z = params.w_yh.matvec_t(&grad_k)?;
    let mut grad_h = grad_z.clone();

    let Some(beta) = cache.beta.as_ref() else {
        return Ok(grad_h);
    };
    for (r, g) in grads.output.w_ya.data_mut().iter_mut().enumerate() {
        *g += grad_z[r] * cache.attended[r];
    }
    let grad_attended = hadamard(&grad_z, params.w_ya.data());
    let mut grad_beta_total: Vec<f64> = cache
        .projected
        .iter()
        .map(|r| dot(&grad_attended, r))
        .collect();
    if let Some(extra) = grad_beta {
        axpy(&mut grad_beta_total, 1.0, extra);
    }
    let grad_scores = softmax_backward(beta, &grad_beta_total);
    for (i, &id) in cache.attr_ids.iter().enumerate() {
        axpy(&mut grad_h, grad_scores[i], &cache.projected[i]);
        let mut grad_r: Vec<f64> = grad_attended.iter().map(|g| beta[i] * g).collect();
        axpy(&mut grad_r, grad_scores[i], h);
        grads.output.v.add_outer(&grad_r, &cache.activated[i], 1.0);
        let grad_s = params.v.matvec_t(&grad_r)?;
        let grad_pre: Vec<f64> = grad_s
            .iter()
            .zip(&cache.activated[i])
            .map(|(g, s)| g * activation.derivative_from_output(*s))
            .collect();
        grads.e.add_to_column(id, &grad_pre, 1.0);
    }
    Ok(grad_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn attrs(ids: &[TokenId]) -> AttributeSet {
        AttributeSet::from_ids(ids)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn zero_bilinear_gives_uniform_input_weights() {
        let e = t(&[2, 4], &[0.1, 0.5, -0.3, 0.9, 1.0, -1.0, 0.2, 0.7]);
        let a = input_scores(0, &attrs(&[1, 2, 3]), &e, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(a.0.iter().all(|&w| w == 1.0 / 3.0));
        let single = input_scores(0, &attrs(&[2]), &e, &Tensor::identity(2)).unwrap();
        assert_eq!(single.0, vec![1.0]);
        assert!(input_scores(0, &attrs(&[]), &e, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn hand_evaluated_input_attention() {
        // prev embeds to [1], attributes to [2] and [1]; U = [ln 2].
        let e = t(&[1, 3], &[1.0, 2.0, 1.0]);
        let u = t(&[1, 1], &[2f64.ln()]);
        let alpha = input_scores(0, &attrs(&[1, 2]), &e, &u).unwrap();
        assert_abs_diff_eq!(alpha.0[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(alpha.0[1], 1.0 / 3.0, epsilon = 1e-12);

        let params = InputAttentionParams {
            u,
            w_xy: t(&[1, 1], &[1.0]),
            w_xa: t(&[1], &[1.0]),
        };
        let w = AttentionWeights(vec![2.0 / 3.0, 1.0 / 3.0]);
        let x = input_vector(0, &attrs(&[1, 2]), &w, &e, &params).unwrap();
        assert_abs_diff_eq!(x[0], 8.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_input_gate_ignores_attributes() {
        let e = t(&[2, 4], &[0.1, 0.5, -0.3, 0.9, 1.0, -1.0, 0.2, 0.7]);
        let params = InputAttentionParams {
            u: Tensor::identity(2),
            w_xy: t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]),
            w_xa: Tensor::zeros(&[2]),
        };
        let a = attrs(&[1, 3]);
        let alpha = input_scores(2, &a, &e, &params.u).unwrap();
        let x = input_vector(2, &a, &alpha, &e, &params).unwrap();
        assert_eq!(x, params.w_xy.matvec(&e.column(2)).unwrap());
    }

    #[test]
    fn hand_evaluated_output_attention() {
        let e = t(&[1, 3], &[0.0, 2.0, 1.0]);
        let v = t(&[1, 1], &[2f64.ln()]);
        let beta = output_scores(&[1.0], &attrs(&[1, 2]), &e, &v, Activation::Identity).unwrap();
        assert_abs_diff_eq!(beta.0[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(beta.0[1], 1.0 / 3.0, epsilon = 1e-12);

        let zero_v = output_scores(&[1.0], &attrs(&[1, 2]), &e, &Tensor::zeros(&[1, 1]), Activation::Tanh).unwrap();
        assert_eq!(zero_v.0, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_evaluated_output_distribution() {
        // E = [1 2 3], W_Yh = [1], gate closed, h = ln 2 → logits (ln2, 2ln2, 3ln2).
        let e = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let params = OutputAttentionParams {
            v: t(&[1, 1], &[1.0]),
            w_yh: t(&[1, 1], &[1.0]),
            w_ya: t(&[1], &[0.0]),
        };
        let h = [2f64.ln()];
        let a = attrs(&[0]);
        let beta = output_scores(&h, &a, &e, &params.v, Activation::Tanh).unwrap();
        let p = output_distribution(&h, &a, &beta, &e, &e, &params, Activation::Tanh).unwrap();
        for (pi, want) in p.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert_abs_diff_eq!(*pi, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn step_forward_matches_public_ops() {
        let e = t(&[2, 5], &[0.1, 0.5, -0.3, 0.9, 0.2, 1.0, -1.0, 0.2, 0.7, -0.4]);
        let input = InputAttentionParams {
            u: t(&[2, 2], &[0.3, -0.2, 0.5, 1.1]),
            w_xy: t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]),
            w_xa: t(&[2], &[0.7, 1.3]),
        };
        let a = attrs(&[1, 3, 4]);
        let alpha = input_scores(2, &a, &e, &input.u).unwrap();
        let x = input_vector(2, &a, &alpha, &e, &input).unwrap();
        let (x2, cache) = input_step_forward(&InputPath::Attend, 2, &a, &e, &input).unwrap();
        assert_eq!(cache.alpha.as_ref().unwrap(), &alpha.0);
        for (p, q) in x.iter().zip(&x2) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-14);
        }

        let output = OutputAttentionParams {
            v: t(&[3, 2], &[0.2, 0.1, -0.3, 0.4, 0.9, -0.6]),
            w_yh: t(&[2, 3], &[0.5, -0.1, 0.2, 0.3, 0.8, -0.7]),
            w_ya: t(&[3], &[1.0, 0.5, -0.5]),
        };
        let h = [0.2, -0.4, 0.6];
        let beta = output_scores(&h, &a, &e, &output.v, Activation::Tanh).unwrap();
        let p = output_distribution(&h, &a, &beta, &e, &e, &output, Activation::Tanh).unwrap();
        let cache = output_step_forward(true, &h, &a, &e, &e, &output, Activation::Tanh).unwrap();
        for (p, q) in p.iter().zip(&cache.probs) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-14);
        }
    }

    #[test]
    fn max_fusion_input_path() {
        let e = t(&[2, 3], &[0.0, 1.0, 0.0, 0.0, -2.0, 5.0]);
        let params = InputAttentionParams {
            u: Tensor::zeros(&[2, 2]),
            w_xy: Tensor::identity(2),
            w_xa: t(&[2], &[1.0, 1.0]),
        };
        let (x, cache) = input_step_forward(&InputPath::Max, 0, &attrs(&[1, 2]), &e, &params).unwrap();
        assert_eq!(cache.fused, vec![1.0, 5.0]);
        assert_eq!(x, vec![1.0, 5.0]);
    }
}
