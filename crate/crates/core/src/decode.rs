//! Caption generation: greedy, beam, and ensemble decoding, plus the
//! per-step attention trace.

use crate::attention::{input_step_forward, output_step_forward};
use crate::attributes::AttributeSet;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rnn::{init_input, lstm_step, RnnState};
use crate::vocab::{TokenId, Vocabulary};

/// Distributions produced by one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Anything that can be unrolled one word at a time.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// State before the first step.
    fn initial_state(&self) -> Self::State;

    /// Advances one step. `prev` is `None` at `t = 0`.
    fn step(&self, state: &Self::State, prev: Option<TokenId>) -> Result<(Self::State, StepOutput)>;
}

/// A trained model bound to one image and its attributes.
#[derive(Debug, Clone, Copy)]
pub struct Captioner<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
    pub features: &'a [f64],
    pub attrs: &'a AttributeSet,
}

impl<'a> Captioner<'a> {
    pub fn new(
        params: &'a ModelParams,
        config: &'a ModelConfig,
        features: &'a [f64],
        attrs: &'a AttributeSet,
    ) -> Result<Self> {
        if features.len() != config.feature_dim {
            return Err(Error::arg(format!(
                "feature vector has {} entries, model expects {}",
                features.len(),
                config.feature_dim
            )));
        }
        if config.mode.uses_attributes() && attrs.is_empty() {
            return Err(Error::arg(format!("mode {} needs a non-empty attribute set", config.mode)));
        }
        Ok(Captioner {
            params,
            config,
            features,
            attrs,
        })
    }
}

impl StepModel for Captioner<'_> {
    type State = RnnState;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn initial_state(&self) -> RnnState {
        RnnState::zeros(self.config.hidden_dim)
    }

    fn step(&self, state: &RnnState, prev: Option<TokenId>) -> Result<(RnnState, StepOutput)> {
        let p = self.params;
        let (x, alpha) = match prev {
            None => (init_input(self.features, &p.w_xv)?, None),
            Some(tok) => {
                let (x, cache) =
                    input_step_forward(&self.config.input_path(), tok, self.attrs, &p.embedding, &p.input)?;
                (x, cache.alpha)
            }
        };
        let next = lstm_step(state, &x, &p.lstm)?;
        let out = output_step_forward(
            self.config.mode.output_attention(),
            &next.h,
            self.attrs,
            &p.embedding,
            p.output_matrix(),
            &p.output,
            self.config.activation,
        )?;
        Ok((
            next,
            StepOutput {
                probs: out.probs,
                alpha,
                beta: out.beta,
            },
        ))
    }
}

/// Generated tokens (END excluded) and their summed log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub token: TokenId,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Attention rows aligned with the emitted tokens, END included.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    pub attributes: Vec<TokenId>,
    pub steps: Vec<TraceStep>,
}

/// Highest-probability token; ties go to the lowest id.
pub fn argmax(probs: &[f64]) -> Result<TokenId> {
    let mut best: Option<(TokenId, f64)> = None;
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Numeric(format!("non-finite probability for token {i}")));
        }
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::arg("empty distribution"))
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::arg("max_len must be at least 1"));
    }
    Ok(())
}

/// Most probable word at every step until END or `max_len` steps.
pub fn greedy_decode<M: StepModel>(
    model: &M,
    attributes: &[TokenId],
    max_len: usize,
) -> Result<(Caption, AttentionTrace)> {
    check_max_len(max_len)?;
    let mut state = model.initial_state();
    let mut prev = None;
    let mut caption = Caption {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    let mut trace = AttentionTrace {
        attributes: attributes.to_vec(),
        steps: Vec::new(),
    };
    for t in 0..max_len {
        let (next, out) = model.step(&state, prev)?;
        let token = argmax(&out.probs)?;
        caption.log_prob += out.probs[token].ln();
        trace.steps.push(TraceStep {
            t,
            token,
            alpha: out.alpha,
            beta: out.beta,
        });
        if token == Vocabulary::END_ID {
            break;
        }
        caption.tokens.push(token);
        state = next;
        prev = Some(token);
    }
    Ok((caption, trace))
}

#[derive(Clone)]
struct Hypothesis<S> {
    tokens: Vec<TokenId>,
    log_prob: f64,
    state: S,
    finished: bool,
}

/// Beam search over summed log-probabilities. Hypotheses that emit END are
/// kept in the beam unchanged while the others extend; search stops when
/// every kept hypothesis has finished or after `max_len` steps. If the
/// greedy caption scores higher than the best beam result it is returned
/// instead, so the result never scores below greedy.
pub fn beam_decode<M: StepModel>(model: &M, beam_width: usize, max_len: usize) -> Result<Caption> {
    check_max_len(max_len)?;
    if beam_width == 0 {
        return Err(Error::arg("beam_width must be at least 1"));
    }
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state(),
        finished: false,
    }];
    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis<M::State>> = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let (state, out) = model.step(&hyp.state, hyp.tokens.last().copied())?;
            for (token, &p) in out.probs.iter().enumerate() {
                if !p.is_finite() {
                    return Err(Error::Numeric(format!("non-finite probability for token {token}")));
                }
                let finished = token == Vocabulary::END_ID;
                let mut tokens = hyp.tokens.clone();
                if !finished {
                    tokens.push(token);
                }
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + p.ln(),
                    state: state.clone(),
                    finished,
                });
            }
        }
        // Stable: equal scores keep generation order, so the lowest token
        // id wins ties as in greedy decoding.
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        candidates.truncate(beam_width);
        beam = candidates;
    }
    let best = beam
        .into_iter()
        .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
        .expect("beam is never empty");
    let beam_caption = Caption {
        tokens: best.tokens,
        log_prob: best.log_prob,
    };
    if beam_width > 1 {
        let (greedy, _) = greedy_decode(model, &[], max_len)?;
        if greedy.log_prob > beam_caption.log_prob {
            return Ok(greedy);
        }
    }
    Ok(beam_caption)
}

/// Several models decoded in lockstep with their distributions averaged.
pub struct Ensemble<M> {
    members: Vec<M>,
    log_space: bool,
}

impl<M: StepModel> Ensemble<M> {
    /// Averages probabilities; with `log_space` set, averages
    /// log-probabilities and renormalizes.
    pub fn new(members: Vec<M>, log_space: bool) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::arg("an ensemble needs at least one model"))?;
        let size = first.vocab_size();
        if members.iter().any(|m| m.vocab_size() != size) {
            return Err(Error::arg("ensemble members have different vocabularies"));
        }
        Ok(Ensemble { members, log_space })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn mean_rows(rows: &[Option<Vec<f64>>]) -> Option<Vec<f64>> {
    let first = rows.first()?.as_ref()?;
    let mut sum = vec![0.0; first.len()];
    for row in rows {
        let row = row.as_ref()?;
        if row.len() != sum.len() {
            return None;
        }
        sum.iter_mut().zip(row).for_each(|(s, r)| *s += r);
    }
    let n = rows.len() as f64;
    Some(sum.into_iter().map(|s| s / n).collect())
}

impl<M: StepModel> StepModel for Ensemble<M> {
    type State = Vec<M::State>;

    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn initial_state(&self) -> Self::State {
        self.members.iter().map(StepModel::initial_state).collect()
    }

    fn step(&self, state: &Self::State, prev: Option<TokenId>) -> Result<(Self::State, StepOutput)> {
        let mut states = Vec::with_capacity(self.members.len());
        let mut outs = Vec::with_capacity(self.members.len());
        for (m, s) in self.members.iter().zip(state) {
            let (s, o) = m.step(s, prev)?;
            states.push(s);
            outs.push(o);
        }
        let n = outs.len() as f64;
        let mut probs = vec![0.0; self.vocab_size()];
        for o in &outs {
            for (acc, &p) in probs.iter_mut().zip(&o.probs) {
                *acc += if self.log_space { p.ln() } else { p };
            }
        }
        if self.log_space {
            let logs: Vec<f64> = probs.iter().map(|s| s / n).collect();
            probs = crate::numerics::softmax(&logs)?;
        } else {
            probs.iter_mut().for_each(|p| *p /= n);
        }
        let alphas: Vec<_> = outs.iter().map(|o| o.alpha.clone()).collect();
        let betas: Vec<_> = outs.iter().map(|o| o.beta.clone()).collect();
        Ok((
            states,
            StepOutput {
                probs,
                alpha: mean_rows(&alphas),
                beta: mean_rows(&betas),
            },
        ))
    }
}

/// Greedy decoding over the averaged per-step distributions.
pub fn ensemble_decode<M: StepModel>(
    members: Vec<M>,
    attributes: &[TokenId],
    max_len: usize,
    log_space: bool,
) -> Result<(Caption, AttentionTrace)> {
    let ensemble = Ensemble::new(members, log_space)?;
    greedy_decode(&ensemble, attributes, max_len)
}

/// Comma-separated table: `t`, `word`, then one `alpha:<attr>` and one
/// `beta:<attr>` column per attribute. Missing rows leave cells empty.
pub fn export_trace(trace: &AttentionTrace, vocab: &Vocabulary) -> Result<String> {
    let label = |id: TokenId| vocab.word(id).unwrap_or(crate::vocab::UNK).to_string();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "word".to_string()];
    header.extend(trace.attributes.iter().map(|&a| format!("alpha:{}", label(a))));
    header.extend(trace.attributes.iter().map(|&a| format!("beta:{}", label(a))));
    w.write_record(&header).map_err(csv_error)?;
    let k = trace.attributes.len();
    let cells = |row: &Option<Vec<f64>>| -> Result<Vec<String>> {
        match row {
            Some(r) if r.len() == k => Ok(r.iter().map(f64::to_string).collect()),
            Some(_) => Err(Error::arg("attention row length differs from the attribute count")),
            None => Ok(vec![String::new(); k]),
        }
    };
    for step in &trace.steps {
        let mut record = vec![step.t.to_string(), label(step.token)];
        record.extend(cells(&step.alpha)?);
        record.extend(cells(&step.beta)?);
        w.write_record(&record).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::arg(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::arg(e.to_string()))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

/// Inverse of [`export_trace`].
pub fn parse_trace(text: &str, vocab: &Vocabulary) -> Result<AttentionTrace> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.len() < 2 || &header[0] != "t" || &header[1] != "word" || header.len() % 2 != 0 {
        return Err(Error::parse(1, "trace header must be t, word, alpha columns, beta columns"));
    }
    let k = (header.len() - 2) / 2;
    let lookup = |w: &str, line: usize| {
        vocab
            .get(w)
            .ok_or_else(|| Error::parse(line, format!("word `{w}` not in the vocabulary")))
    };
    let mut attributes = Vec::with_capacity(k);
    for i in 0..k {
        let a = header[2 + i]
            .strip_prefix("alpha:")
            .ok_or_else(|| Error::parse(1, "expected an alpha column"))?;
        let b = header[2 + k + i]
            .strip_prefix("beta:")
            .ok_or_else(|| Error::parse(1, "expected a beta column"))?;
        if a != b {
            return Err(Error::parse(1, "alpha and beta columns name different attributes"));
        }
        attributes.push(lookup(a, 1)?);
    }
    let mut steps = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(csv_error)?;
        let t = record[0]
            .parse::<usize>()
            .map_err(|_| Error::parse(line, format!("bad step `{}`", &record[0])))?;
        let token = lookup(&record[1], line)?;
        let row = |range: std::ops::Range<usize>| -> Result<Option<Vec<f64>>> {
            let cells: Vec<&str> = range.map(|c| &record[c]).collect();
            if k == 0 || cells.iter().all(|c| c.is_empty()) {
                return Ok(None);
            }
            cells
                .iter()
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::parse(line, format!("bad weight `{c}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        steps.push(TraceStep {
            t,
            token,
            alpha: row(2..2 + k)?,
            beta: row(2 + k..2 + 2 * k)?,
        });
    }
    Ok(AttentionTrace { attributes, steps })
}

/// Hand-specified next-word tables, keyed by the prefix decoded so far.
/// Prefixes missing from the table emit END with certainty.
#[derive(Debug, Clone, Default)]
pub struct TableModel {
    pub vocab_size: usize,
    pub table: std::collections::HashMap<Vec<TokenId>, Vec<f64>>,
}

impl StepModel for TableModel {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn initial_state(&self) -> Vec<TokenId> {
        Vec::new()
    }

    fn step(&self, state: &Vec<TokenId>, prev: Option<TokenId>) -> Result<(Vec<TokenId>, StepOutput)> {
        let mut prefix = state.clone();
        prefix.extend(prev);
        let probs = self.table.get(&prefix).cloned().unwrap_or_else(|| {
            let mut p = vec![0.0; self.vocab_size];
            p[Vocabulary::END_ID] = 1.0;
            p
        });
        Ok((prefix, StepOutput { probs, alpha: None, beta: None }))
    }
}
