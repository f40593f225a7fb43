//! Training loss: caption negative log-likelihood plus the attention
//! completeness/sparsity regularizer on both attention matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rnn::{backward_sequence, forward_sequence, EncodedExample, SequenceCache, StepUpstream};
use crate::vocab::TokenId;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Non-negative matrix with rows indexed by time step and columns by attribute.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionMatrix {
    rows: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::arg("attention matrix rows differ in length"));
            }
        }
        if rows.iter().flatten().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::arg("attention matrix entries must be finite and non-negative"));
        }
        Ok(AttentionMatrix { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub p: f64,
    pub q: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            p: 2.0,
            q: 0.5,
            lambda_alpha: 1.0,
            lambda_beta: 1.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::config("regularizer.p", "must be finite and > 1"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config("regularizer.q", "must lie in (0, 1)"));
        }
        if !(self.lambda_alpha >= 0.0 && self.lambda_alpha.is_finite()) {
            return Err(Error::config("regularizer.lambda_alpha", "must be finite and >= 0"));
        }
        if !(self.lambda_beta >= 0.0 && self.lambda_beta.is_finite()) {
            return Err(Error::config("regularizer.lambda_beta", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `−Σ_t log max(p_t(Y_t), 1e-12)`.
pub fn nll<D: AsRef<[f64]>>(distributions: &[D], targets: &[TokenId]) -> Result<f64> {
    if distributions.len() != targets.len() {
        return Err(Error::arg(format!(
            "{} distributions for {} targets",
            distributions.len(),
            targets.len()
        )));
    }
    distributions
        .iter()
        .zip(targets)
        .map(|(p, &y)| {
            let p = p.as_ref();
            p.get(y)
                .map(|&py| -py.max(PROB_FLOOR).ln())
                .ok_or_else(|| Error::arg(format!("target {y} outside distribution of {}", p.len())))
        })
        .sum()
}

/// `[Σ_i (Σ_t A_ti)^p]^{1/p} + Σ_t [Σ_i A_ti^q]^{1/q}`.
pub fn attention_regularizer(a: &AttentionMatrix, p: f64, q: f64) -> f64 {
    let completeness = column_sums(a)
        .iter()
        .map(|s| s.powf(p))
        .sum::<f64>()
        .powf(1.0 / p);
    let sparsity: f64 = a.rows.iter().map(|row| row_q_norm(row, q)).sum();
    completeness + sparsity
}

fn column_sums(a: &AttentionMatrix) -> Vec<f64> {
    let mut sums = vec![0.0; a.num_cols()];
    for row in &a.rows {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

fn row_q_norm(row: &[f64], q: f64) -> f64 {
    row.iter().map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q)
}

/// Gradient of [`attention_regularizer`] with respect to every entry.
/// Entries at exactly zero get gradient zero on the sparsity term.
pub fn attention_regularizer_gradient(a: &AttentionMatrix, p: f64, q: f64) -> Vec<Vec<f64>> {
    let sums = column_sums(a);
    let norm = sums.iter().map(|s| s.powf(p)).sum::<f64>().powf(1.0 / p);
    let col_grad: Vec<f64> = sums
        .iter()
        .map(|&s| {
            if norm > 0.0 {
                s.powf(p - 1.0) * norm.powf(1.0 - p)
            } else {
                0.0
            }
        })
        .collect();
    a.rows
        .iter()
        .map(|row| {
            let r = row_q_norm(row, q);
            row.iter()
                .zip(&col_grad)
                .map(|(&v, &cg)| {
                    let sparse = if v > 0.0 { v.powf(q - 1.0) * r.powf(1.0 - q) } else { 0.0 };
                    cg + sparse
                })
                .collect()
        })
        .collect()
}

/// Loss components for one example.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub nll: f64,
    pub g_alpha: f64,
    pub g_beta: f64,
    pub total: f64,
    pub tokens: usize,
}

pub fn total_loss(
    example: &EncodedExample,
    params: &ModelParams,
    config: &ModelConfig,
    reg: &RegularizerConfig,
) -> Result<(LossBreakdown, SequenceCache)> {
    let cache = forward_sequence(example, params, config)?;
    let breakdown = loss_from_cache(&cache, reg)?;
    Ok((breakdown, cache))
}

pub fn loss_from_cache(cache: &SequenceCache, reg: &RegularizerConfig) -> Result<LossBreakdown> {
    let nll = nll(&cache.distributions(), &cache.targets)?;
    let g_alpha = attention_regularizer(&AttentionMatrix::new(cache.alpha_rows())?, reg.p, reg.q);
    let g_beta = attention_regularizer(&AttentionMatrix::new(cache.beta_rows())?, reg.p, reg.q);
    Ok(LossBreakdown {
        nll,
        g_alpha,
        g_beta,
        total: nll + reg.lambda_alpha * g_alpha + reg.lambda_beta * g_beta,
        tokens: cache.targets.len(),
    })
}

/// Gradient of [`total_loss`] for every trainable tensor.
pub fn backward(
    cache: &SequenceCache,
    params: &ModelParams,
    config: &ModelConfig,
    reg: &RegularizerConfig,
) -> Result<ModelParams> {
    if cache.steps.is_empty() {
        return Err(Error::State("backward called without a forward cache".into()));
    }
    let alpha = AttentionMatrix::new(cache.alpha_rows())?;
    let beta = AttentionMatrix::new(cache.beta_rows())?;
    let mut grad_alpha = attention_regularizer_gradient(&alpha, reg.p, reg.q).into_iter();
    let mut grad_beta = attention_regularizer_gradient(&beta, reg.p, reg.q).into_iter();
    let scaled = |row: Vec<f64>, lambda: f64| row.into_iter().map(|g| g * lambda).collect::<Vec<_>>();

    let upstream = cache
        .steps
        .iter()
        .zip(&cache.targets)
        .map(|(step, &y)| {
            let mut grad_logits = step.probs().to_vec();
            if step.probs()[y] >= PROB_FLOOR {
                grad_logits[y] -= 1.0;
            } else {
                // The floor makes the log term constant here.
                grad_logits.iter_mut().for_each(|g| *g = 0.0);
            }
            StepUpstream {
                grad_logits,
                grad_alpha: step.alpha().map(|_| scaled(grad_alpha.next().unwrap_or_default(), reg.lambda_alpha)),
                grad_beta: step.beta().map(|_| scaled(grad_beta.next().unwrap_or_default(), reg.lambda_beta)),
            }
        })
        .collect::<Vec<_>>();
    backward_sequence(cache, &upstream, params, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, gradient_check};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> AttentionMatrix {
        AttentionMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn nll_examples() {
        let perfect = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(nll(&perfect, &[1, 0]).unwrap(), 0.0);
        let uniform = vec![vec![0.25; 4]; 2];
        assert_abs_diff_eq!(nll(&uniform, &[0, 3]).unwrap(), 2.0 * 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(nll(&uniform, &[0, 3]).unwrap(), 2.77259, epsilon = 1e-5);
        assert!(nll(&uniform, &[0]).is_err());
        let zero = vec![vec![0.0, 1.0]];
        assert_abs_diff_eq!(nll(&zero, &[0]).unwrap(), -(1e-12f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn regularizer_hand_values() {
        assert_abs_diff_eq!(attention_regularizer(&m(&[&[1.0]]), 2.0, 0.5), 2.0, epsilon = 1e-12);
        let v = attention_regularizer(&m(&[&[0.5, 0.5]]), 2.0, 0.5);
        assert_abs_diff_eq!(v, 0.5f64.sqrt() + 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 2.70711, epsilon = 1e-5);
        assert_eq!(attention_regularizer(&AttentionMatrix::default(), 2.0, 0.5), 0.0);
        assert!(AttentionMatrix::new(vec![vec![-0.1]]).is_err());
        assert!(AttentionMatrix::new(vec![vec![0.1], vec![0.1, 0.2]]).is_err());
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let rows: Vec<Vec<f64>> = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.05, 0.05, 0.9]];
        let flat: Vec<f64> = rows.concat();
        let f = |x: &[f64]| {
            let a = AttentionMatrix::new(x.chunks(3).map(<[f64]>::to_vec).collect()).unwrap();
            attention_regularizer(&a, 2.0, 0.5)
        };
        let numeric = finite_diff_gradient(f, &flat, 1e-6).unwrap();
        let analytic: Vec<f64> = attention_regularizer_gradient(&AttentionMatrix::new(rows).unwrap(), 2.0, 0.5)
            .concat();
        let r = gradient_check(&analytic, &numeric).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn regularizer_config_validation() {
        assert!(RegularizerConfig::default().validate().is_ok());
        let bad = RegularizerConfig { p: 1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "regularizer.p"));
        let bad = RegularizerConfig { q: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, 2..8).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn homogeneous_of_degree_one(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..2.0, 4), 1..6),
            c in 0.01f64..20.0,
        ) {
            let a = AttentionMatrix::new(rows.clone()).unwrap();
            let scaled = AttentionMatrix::new(rows.iter().map(|r| r.iter().map(|x| c * x).collect()).collect()).unwrap();
            let lhs = attention_regularizer(&scaled, 2.0, 0.5);
            let rhs = c * attention_regularizer(&a, 2.0, 0.5);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        }

        #[test]
        fn q_norm_of_a_distribution_is_at_least_one(row in row_strategy(), q in 0.1f64..0.9) {
            prop_assert!(row_q_norm(&row, q) >= 1.0 - 1e-12);
            let mut onehot = vec![0.0; row.len()];
            onehot[0] = 1.0;
            prop_assert!((row_q_norm(&onehot, q) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn equal_column_sums_minimize_completeness(
            cols in 2usize..6, total in 0.5f64..10.0, bump in 0.01f64..0.4, which in 0usize..5,
        ) {
            let even = vec![total / cols as f64; cols];
            let mut skew = even.clone();
            let j = which % cols;
            let delta = bump * even[0];
            skew[j] += delta;
            skew[(j + 1) % cols] -= delta;
            let norm = |v: &[f64]| v.iter().map(|s| s * s).sum::<f64>().sqrt();
            let a = AttentionMatrix::new(vec![even.clone()]).unwrap();
            let b = AttentionMatrix::new(vec![skew.clone()]).unwrap();
            prop_assert!(norm(&even) < norm(&skew));
            // Completeness term dominates the comparison once the sparsity
            // term is removed by splitting mass across identical rows.
            let ca = attention_regularizer(&a, 2.0, 0.5) - row_q_norm(&even, 0.5);
            let cb = attention_regularizer(&b, 2.0, 0.5) - row_q_norm(&skew, 0.5);
            prop_assert!(ca < cb);
        }

        #[test]
        fn non_negative_and_zero_only_at_zero(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..5),
        ) {
            let a = AttentionMatrix::new(rows.clone()).unwrap();
            let g = attention_regularizer(&a, 2.0, 0.5);
            let all_zero = rows.iter().flatten().all(|&x| x == 0.0);
            prop_assert!(g >= 0.0);
            prop_assert_eq!(g == 0.0, all_zero);
        }
    }
}
