//! Shared training-and-scoring harness for the integration tests.

#![allow(dead_code)]

use semcap::attributes::AttributeSet;
use semcap::config::RunConfig;
use semcap::data::{Dataset, TrainingExample};
use semcap::decode::{AttentionTrace, Caption};
use semcap::metrics::{corpus_bleu, cider, MAX_ORDER};
use semcap::model::{ModelConfig, ModelParams};
use semcap::rnn::EncodedExample;
use semcap::train::{decode_examples, encode_pairs, training_vocabulary, AttributeContext, EpochStats, Member, Trainer};
use semcap::vocab::Vocabulary;

pub struct Trained {
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub params: ModelParams,
    pub pairs: Vec<EncodedExample>,
    pub log: Vec<EpochStats>,
}

/// Trains on `data.train`; `stop` ends training early after an epoch.
pub fn train(config: &RunConfig, data: &Dataset, mut stop: impl FnMut(&EpochStats) -> bool) -> Trained {
    let vocab = training_vocabulary(&data.train, config.model.min_count).unwrap();
    let ctx = AttributeContext { config, vocab: &vocab, train: &data.train, file: None };
    let attrs = ctx.resolve(&data.train, true).unwrap();
    let pairs = encode_pairs(&data.train, &attrs, &vocab);
    let model = config.model_config(vocab.len(), data.train[0].features.len()).unwrap();
    let mut trainer = Trainer::new(config, model.clone(), &vocab, config.run.seed).unwrap();
    let mut log = Vec::new();
    for _ in 0..config.optimizer.epochs {
        let s = trainer.epoch(&pairs).unwrap();
        log.push(s);
        if stop(&s) {
            break;
        }
    }
    Trained { vocab, model, params: trainer.params, pairs, log }
}

pub fn attributes_for(config: &RunConfig, t: &Trained, data: &Dataset, split: &[TrainingExample], is_train: bool) -> Vec<AttributeSet> {
    let ctx = AttributeContext { config, vocab: &t.vocab, train: &data.train, file: None };
    ctx.resolve(split, is_train).unwrap()
}

pub fn decode(config: &RunConfig, t: &Trained, data: &Dataset, split: &[TrainingExample], is_train: bool) -> Vec<(Caption, AttentionTrace)> {
    let attrs = attributes_for(config, t, data, split, is_train);
    let member = Member { params: &t.params, model: &t.model };
    decode_examples(&[member], split, &attrs, config.run.max_len, 1, false).unwrap()
}

pub fn surface(vocab: &Vocabulary, captions: &[(Caption, AttentionTrace)]) -> Vec<Vec<String>> {
    captions.iter().map(|(c, _)| vocab.decode(&c.tokens)).collect()
}

pub fn cider_of(vocab: &Vocabulary, captions: &[(Caption, AttentionTrace)], split: &[TrainingExample]) -> f64 {
    let refs: Vec<Vec<Vec<String>>> = split.iter().map(|e| e.captions.clone()).collect();
    cider(&surface(vocab, captions), &refs).unwrap()
}

pub fn bleu_of(vocab: &Vocabulary, captions: &[(Caption, AttentionTrace)], split: &[TrainingExample]) -> [f64; MAX_ORDER] {
    let cands = surface(vocab, captions);
    let pairs: Vec<(&[String], &[Vec<String>])> = cands
        .iter()
        .zip(split)
        .map(|(c, e)| (c.as_slice(), e.captions.as_slice()))
        .collect();
    let b = corpus_bleu(&pairs, MAX_ORDER).unwrap();
    [b[0], b[1], b[2], b[3]]
}

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use semcap::attention::{
    input_scores, input_step_forward, input_vector, output_distribution, output_scores, output_step_forward, Activation,
    InputAttentionParams, InputPath, OutputAttentionParams,
};
use semcap::numerics::{softmax, Tensor};
use semcap::vocab::embed;

const SUM_TOL: f64 = 1e-10;

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let normal = Normal::new(0.0, scale).unwrap();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn check_distribution(name: &str, p: &[f64]) -> Result<(), String> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > SUM_TOL {
        return Err(format!("{name} is not a distribution: sum {total}"));
    }
    Ok(())
}

fn exact<T: PartialEq + std::fmt::Debug>(name: &str, a: &T, b: &T) -> Result<(), String> {
    if a != b {
        return Err(format!("{name}: {a:?} != {b:?}"));
    }
    Ok(())
}

/// One random attention configuration: distributions sum to one, permuting
/// the attributes permutes α/β and leaves x_t and p_t bit-identical, closed
/// gates cut the attribute path and zero bilinear forms give uniform weights.
pub fn attention_invariants<R: Rng>(rng: &mut R) -> Result<(), String> {
    let d = rng.random_range(1..=6);
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=6);
    let vocab = rng.random_range(5..=15);
    let scale = rng.random_range(0.1..3.0);
    let activation = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Identity };
    let mut pool: Vec<usize> = (3..vocab).collect();
    pool.shuffle(rng);
    let k = rng.random_range(1..=pool.len().min(5));
    let ids = pool[..k].to_vec();
    let attrs = AttributeSet::from_ids(&ids);
    let prev = rng.random_range(0..vocab);

    let e = random_tensor(rng, &[d, vocab], scale);
    let input = InputAttentionParams {
        u: random_tensor(rng, &[d, d], scale),
        w_xy: random_tensor(rng, &[m, d], scale),
        w_xa: random_tensor(rng, &[d], scale),
    };
    let output = OutputAttentionParams {
        v: random_tensor(rng, &[n, d], scale),
        w_yh: random_tensor(rng, &[d, n], scale),
        w_ya: random_tensor(rng, &[n], scale),
    };
    let h: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let err = |e: semcap::Error| e.to_string();

    let alpha = input_scores(prev, &attrs, &e, &input.u).map_err(err)?;
    let x = input_vector(prev, &attrs, &alpha, &e, &input).map_err(err)?;
    let beta = output_scores(&h, &attrs, &e, &output.v, activation).map_err(err)?;
    let p = output_distribution(&h, &attrs, &beta, &e, &e, &output, activation).map_err(err)?;
    check_distribution("alpha", &alpha.0)?;
    check_distribution("beta", &beta.0)?;
    check_distribution("p_t", &p)?;
    let (x_step, in_cache) = input_step_forward(&InputPath::Attend, prev, &attrs, &e, &input).map_err(err)?;
    let out_cache = output_step_forward(true, &h, &attrs, &e, &e, &output, activation).map_err(err)?;
    exact("stepped alpha", in_cache.alpha.as_ref().unwrap(), &alpha.0)?;
    exact("stepped beta", out_cache.beta.as_ref().unwrap(), &beta.0)?;
    check_distribution("stepped p_t", &out_cache.probs)?;

    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    let shuffled = AttributeSet::from_ids(&perm.iter().map(|&i| ids[i]).collect::<Vec<_>>());
    let alpha2 = input_scores(prev, &shuffled, &e, &input.u).map_err(err)?;
    let beta2 = output_scores(&h, &shuffled, &e, &output.v, activation).map_err(err)?;
    exact("permuted alpha", &alpha2.0, &perm.iter().map(|&i| alpha.0[i]).collect())?;
    exact("permuted beta", &beta2.0, &perm.iter().map(|&i| beta.0[i]).collect())?;
    exact("x_t under permutation", &input_vector(prev, &shuffled, &alpha2, &e, &input).map_err(err)?, &x)?;
    let p2 = output_distribution(&h, &shuffled, &beta2, &e, &e, &output, activation).map_err(err)?;
    exact("p_t under permutation", &p2, &p)?;
    let (x_step2, _) = input_step_forward(&InputPath::Attend, prev, &shuffled, &e, &input).map_err(err)?;
    exact("stepped x_t under permutation", &x_step2, &x_step)?;
    let out_cache2 = output_step_forward(true, &h, &shuffled, &e, &e, &output, activation).map_err(err)?;
    exact("stepped p_t under permutation", &out_cache2.probs, &out_cache.probs)?;

    let closed_in = InputAttentionParams { w_xa: Tensor::zeros(&[d]), ..input.clone() };
    let plain = closed_in.w_xy.matvec(&embed(&e, prev).map_err(err)?).map_err(err)?;
    exact("closed input gate", &input_vector(prev, &attrs, &alpha, &e, &closed_in).map_err(err)?, &plain)?;
    let closed_out = OutputAttentionParams { w_ya: Tensor::zeros(&[n]), ..output.clone() };
    let direct = softmax(&e.matvec_t(&closed_out.w_yh.matvec(&h).map_err(err)?).map_err(err)?).map_err(err)?;
    exact(
        "closed output gate",
        &output_distribution(&h, &attrs, &beta, &e, &e, &closed_out, activation).map_err(err)?,
        &direct,
    )?;

    let uniform = vec![1.0 / k as f64; k];
    exact("zero U", &input_scores(prev, &attrs, &e, &Tensor::zeros(&[d, d])).map_err(err)?.0, &uniform)?;
    exact(
        "zero V",
        &output_scores(&h, &attrs, &e, &Tensor::zeros(&[n, d]), activation).map_err(err)?.0,
        &uniform,
    )?;
    Ok(())
}
