//! Minibatch RMSProp training, attribute resolution, and batch decoding.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attributes::{default_stopwords, knn_attributes, noisy_oracle_attributes, AttributeSet, NeighborIndex, RankedWords};
use crate::config::{AttributeSource, RunConfig};
use crate::data::{example_rng, TrainingExample};
use crate::decode::{beam_decode, greedy_decode, AttentionTrace, Caption, Captioner, Ensemble};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{rmsprop_step, RmsPropState};
use crate::objective::{backward, total_loss, LossBreakdown};
use crate::rnn::EncodedExample;
use crate::vocab::{build_vocabulary, Vocabulary};

/// Vocabulary over every training caption.
pub fn training_vocabulary(train: &[TrainingExample], min_count: usize) -> Result<Vocabulary> {
    let corpus: Vec<Vec<String>> = train.iter().flat_map(|e| e.captions.clone()).collect();
    build_vocabulary(&corpus, min_count)
}

/// Where the attributes of a split come from.
pub struct AttributeContext<'a> {
    pub config: &'a RunConfig,
    pub vocab: &'a Vocabulary,
    /// Retrieval corpus for the k-NN source.
    pub train: &'a [TrainingExample],
    /// Precomputed attributes that take precedence over the source.
    pub file: Option<&'a HashMap<u64, RankedWords>>,
}

impl AttributeContext<'_> {
    /// Attribute sets for `examples`. With `exclude_self`, k-NN retrieval
    /// skips the example's own id, which matters when `examples` is the
    /// retrieval corpus itself.
    pub fn resolve(&self, examples: &[TrainingExample], exclude_self: bool) -> Result<Vec<AttributeSet>> {
        let config = self.config;
        if !config.model.mode.uses_attributes() {
            return Ok(vec![AttributeSet::default(); examples.len()]);
        }
        let k = config.attribute_count();
        let finish = |id: u64, words: &RankedWords| -> Result<AttributeSet> {
            let set = AttributeSet::from_ranked_words(words, self.vocab, k)?;
            if set.is_empty() {
                return Err(Error::arg(format!("example {id} has no in-vocabulary attributes")));
            }
            Ok(set)
        };
        if let Some(file) = self.file {
            return examples
                .iter()
                .map(|e| {
                    let words = file
                        .get(&e.id)
                        .ok_or_else(|| Error::arg(format!("attribute file has no entry for example {}", e.id)))?;
                    finish(e.id, words)
                })
                .collect();
        }
        match config.attributes.source {
            AttributeSource::Gt => examples.iter().map(|e| finish(e.id, &e.gt_attrs)).collect(),
            AttributeSource::NoisyOracle => examples
                .iter()
                .map(|e| {
                    let gt = finish(e.id, &e.gt_attrs)?;
                    let mut rng = example_rng(config.run.seed ^ 0x006e_6f69_7379, e.id);
                    noisy_oracle_attributes(&gt, self.vocab, config.attributes.precision, &mut rng, k)
                })
                .collect(),
            AttributeSource::Knn => {
                let index = NeighborIndex::build(self.train.iter().map(|e| (e.id, e.features.as_slice())))?;
                let store: HashMap<u64, Vec<Vec<String>>> =
                    self.train.iter().map(|e| (e.id, e.captions.clone())).collect();
                let corpus: Vec<Vec<String>> = self.train.iter().flat_map(|e| e.captions.clone()).collect();
                let stopwords = default_stopwords(&corpus, config.attributes.stopwords_top);
                examples
                    .par_iter()
                    .map(|e| {
                        let words = knn_attributes(
                            &e.features,
                            &index,
                            &store,
                            config.attributes.neighbors,
                            k,
                            &stopwords,
                            exclude_self.then_some(e.id),
                        )?;
                        finish(e.id, &words)
                    })
                    .collect()
            }
        }
    }
}

/// One encoded training pair per (image, caption).
pub fn encode_pairs(examples: &[TrainingExample], attrs: &[AttributeSet], vocab: &Vocabulary) -> Vec<EncodedExample> {
    examples
        .iter()
        .zip(attrs)
        .flat_map(|(e, a)| {
            e.captions.iter().map(move |c| EncodedExample {
                features: e.features.clone(),
                attrs: a.clone(),
                caption: vocab.encode_caption(c),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub nll_per_token: f64,
    /// Mean regularizer values per caption.
    pub g_alpha: f64,
    pub g_beta: f64,
    pub seconds: f64,
}

impl EpochStats {
    pub const HEADER: &'static str = "epoch\tstep\tnll_per_token\tg_alpha\tg_beta\tseconds";

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.steps, self.nll_per_token, self.g_alpha, self.g_beta, self.seconds
        )
    }
}

/// Sum of per-example losses and gradients over a batch. Per-example work
/// runs in parallel; the reduction runs in batch order so the result does
/// not depend on the number of threads.
pub fn batch_gradient(
    batch: &[&EncodedExample],
    params: &ModelParams,
    model: &ModelConfig,
    config: &RunConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    let parts = batch
        .par_iter()
        .map(|ex| {
            let (loss, cache) = total_loss(ex, params, model, &config.regularizer)?;
            let grads = backward(&cache, params, model, &config.regularizer)?;
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = LossBreakdown::default();
    let mut sum = params.zeros_like();
    for (loss, grads) in parts {
        total.nll += loss.nll;
        total.g_alpha += loss.g_alpha;
        total.g_beta += loss.g_beta;
        total.total += loss.total;
        total.tokens += loss.tokens;
        sum.add_assign(&grads);
    }
    Ok((total, sum))
}

pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub config: &'a RunConfig,
    pub params: ModelParams,
    states: Vec<RmsPropState>,
    order_rng: ChaCha8Rng,
    steps: usize,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &'a RunConfig, model: ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&model, vocab, &mut init_rng, config.model.pretrained_embedding.as_deref())?;
        let o = &config.optimizer;
        let states = params
            .named()
            .iter()
            .map(|(_, t)| RmsPropState::new(t.shape(), o.decay, o.learning_rate, o.epsilon))
            .collect::<Result<Vec<_>>>()?;
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
        order_rng.set_stream(1);
        Ok(Trainer {
            model,
            config,
            params,
            states,
            order_rng,
            steps: 0,
            epoch: 0,
        })
    }

    /// One optimizer update from the mean gradient of `batch`.
    pub fn step(&mut self, batch: &[&EncodedExample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::arg("empty minibatch"));
        }
        let (loss, mut grads) = batch_gradient(batch, &self.params, &self.model, self.config)?;
        grads.scale(1.0 / batch.len() as f64);
        if let Some(c) = self.config.optimizer.clip {
            for (_, t) in grads.named_mut() {
                t.data_mut().iter_mut().for_each(|g| *g = g.clamp(-c, c));
            }
        }
        for (((_, p), (_, g)), state) in self
            .params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(&mut self.states)
        {
            rmsprop_step(p, g, state)?;
        }
        if !self.params.is_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite at step {}", self.steps + 1)));
        }
        self.steps += 1;
        Ok(loss)
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn epoch(&mut self, data: &[EncodedExample]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::arg("no training examples"));
        }
        let start = Instant::now();
        let mut order: Vec<&EncodedExample> = data.iter().collect();
        order.shuffle(&mut self.order_rng);
        let mut total = LossBreakdown::default();
        for batch in order.chunks(self.config.optimizer.batch_size) {
            let loss = self.step(batch)?;
            total.nll += loss.nll;
            total.g_alpha += loss.g_alpha;
            total.g_beta += loss.g_beta;
            total.tokens += loss.tokens;
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            steps: self.steps,
            nll_per_token: total.nll / total.tokens as f64,
            g_alpha: total.g_alpha / n,
            g_beta: total.g_beta / n,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the configured number of epochs, calling `on_epoch` after each.
    pub fn fit<F>(&mut self, data: &[EncodedExample], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&EpochStats, &ModelParams) -> Result<()>,
    {
        for _ in 0..self.config.optimizer.epochs {
            let stats = self.epoch(data)?;
            on_epoch(&stats, &self.params)?;
        }
        Ok(())
    }
}

/// Summed regularizer values over `data`, with `nll` as the mean per token.
pub fn evaluate_loss(data: &[EncodedExample], params: &ModelParams, model: &ModelConfig, config: &RunConfig) -> Result<LossBreakdown> {
    let losses = data
        .par_iter()
        .map(|ex| total_loss(ex, params, model, &config.regularizer).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = LossBreakdown::default();
    for l in losses {
        acc.nll += l.nll;
        acc.g_alpha += l.g_alpha;
        acc.g_beta += l.g_beta;
        acc.total += l.total;
        acc.tokens += l.tokens;
    }
    if acc.tokens > 0 {
        acc.nll /= acc.tokens as f64;
    }
    Ok(acc)
}

/// A trained model with its shape, for decoding.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub params: &'a ModelParams,
    pub model: &'a ModelConfig,
}

/// Decodes every example, in parallel, with one model or an ensemble.
/// Beam search applies to single models only.
pub fn decode_examples(
    members: &[Member<'_>],
    examples: &[TrainingExample],
    attrs: &[AttributeSet],
    max_len: usize,
    beam_width: usize,
    log_space: bool,
) -> Result<Vec<(Caption, AttentionTrace)>> {
    if members.is_empty() {
        return Err(Error::arg("no models to decode with"));
    }
    examples
        .par_iter()
        .zip(attrs)
        .map(|(ex, a)| {
            let captioners = members
                .iter()
                .map(|m| Captioner::new(m.params, m.model, &ex.features, a))
                .collect::<Result<Vec<_>>>()?;
            if captioners.len() == 1 {
                let (greedy, trace) = greedy_decode(&captioners[0], a.ids(), max_len)?;
                if beam_width > 1 {
                    return Ok((beam_decode(&captioners[0], beam_width, max_len)?, trace));
                }
                Ok((greedy, trace))
            } else {
                let ensemble = Ensemble::new(captioners, log_space)?;
                greedy_decode(&ensemble, a.ids(), max_len)
            }
        })
        .collect()
}

/// Mean per-step entropy of the input attention rows over a set of traces.
pub fn mean_alpha_entropy(traces: &[AttentionTrace]) -> Option<f64> {
    let rows: Vec<&Vec<f64>> = traces.iter().flat_map(|t| &t.steps).filter_map(|s| s.alpha.as_ref()).collect();
    if rows.is_empty() {
        return None;
    }
    let total: f64 = rows
        .iter()
        .map(|r| -r.iter().filter(|&&a| a > 0.0).map(|a| a * a.ln()).sum::<f64>())
        .sum();
    Some(total / rows.len() as f64)
}
