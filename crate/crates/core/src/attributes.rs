//! Attribute producers and the MAX/CON fusion baselines.
//!
//! Text-level producers (`gt_attributes`, `knn_attributes`) return ranked
//! words; [`AttributeSet::from_ranked_words`] maps them onto a vocabulary.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};
use crate::vocab::{embed, TokenId, Vocabulary};

/// Words with detection scores, highest score first.
pub type RankedWords = Vec<(String, f64)>;

/// Attribute token ids with scores: unique ids, descending score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttributeSet {
    ids: Vec<TokenId>,
    scores: Vec<f64>,
}

impl AttributeSet {
    /// Sorts by descending score (stable) and keeps the best-scored copy
    /// of any repeated id.
    pub fn new(entries: Vec<(TokenId, f64)>) -> Result<Self> {
        if entries.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::arg("attribute scores must be finite"));
        }
        let mut entries = entries;
        entries.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut seen = HashSet::new();
        let (ids, scores) = entries
            .into_iter()
            .filter(|(id, _)| seen.insert(*id))
            .unzip();
        Ok(AttributeSet { ids, scores })
    }

    /// Keeps the given order by assigning descending scores.
    pub fn from_ids(ids: &[TokenId]) -> Self {
        let n = ids.len();
        let entries = ids.iter().enumerate().map(|(i, &id)| (id, (n - i) as f64)).collect();
        AttributeSet::new(entries).expect("finite scores")
    }

    /// Maps ranked words to ids, dropping out-of-vocabulary words, then keeps
    /// at most `limit` entries.
    pub fn from_ranked_words(words: &[(String, f64)], vocab: &Vocabulary, limit: usize) -> Result<Self> {
        let entries = words
            .iter()
            .filter_map(|(w, s)| vocab.get(w).map(|id| (id, *s)))
            .filter(|(id, _)| !Vocabulary::is_reserved(*id))
            .collect();
        let mut set = AttributeSet::new(entries)?;
        set.truncate(limit);
        Ok(set)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.ids.truncate(k);
        self.scores.truncate(k);
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.contains(&id)
    }

    pub fn to_ranked_words(&self, vocab: &Vocabulary) -> RankedWords {
        self.ids
            .iter()
            .zip(&self.scores)
            .map(|(&id, &s)| (vocab.word(id).unwrap_or(crate::vocab::UNK).to_string(), s))
            .collect()
    }
}

fn is_reserved_word(w: &str) -> bool {
    matches!(w, crate::vocab::START | crate::vocab::END | crate::vocab::UNK)
}

fn rank_by_frequency<'a, I>(tokens: I, k: usize, stopwords: &HashSet<String>) -> RankedWords
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in tokens {
        if !stopwords.contains(tok) && !is_reserved_word(tok) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(k)
        .map(|(w, c)| (w.to_string(), c as f64))
        .collect()
}

/// Top-`k` most frequent non-stopword tokens over one image's reference
/// captions, scored by frequency. Ties break lexicographically.
pub fn gt_attributes<S: AsRef<str>>(
    captions: &[Vec<S>],
    k: usize,
    stopwords: &HashSet<String>,
) -> Result<RankedWords> {
    if captions.is_empty() {
        return Err(Error::arg("ground-truth attributes need at least one caption"));
    }
    Ok(rank_by_frequency(
        captions.iter().flatten().map(AsRef::as_ref),
        k,
        stopwords,
    ))
}

/// The `top_n` most frequent corpus tokens plus every punctuation-only token.
pub fn default_stopwords<S: AsRef<str>>(corpus: &[Vec<S>], top_n: usize) -> HashSet<String> {
    let none = HashSet::new();
    let mut stop: HashSet<String> = rank_by_frequency(corpus.iter().flatten().map(AsRef::as_ref), top_n, &none)
        .into_iter()
        .map(|(w, _)| w)
        .collect();
    for tok in corpus.iter().flatten() {
        let tok = tok.as_ref();
        if !tok.is_empty() && tok.chars().all(|c| c.is_ascii_punctuation()) {
            stop.insert(tok.to_string());
        }
    }
    stop
}

/// Exhaustive cosine-distance index over image features.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    ids: Vec<u64>,
    unit_vectors: Vec<Vec<f64>>,
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

impl NeighborIndex {
    pub fn build<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, &'a [f64])>,
    {
        let mut index = NeighborIndex {
            dim: 0,
            ids: Vec::new(),
            unit_vectors: Vec::new(),
        };
        for (id, v) in items {
            if index.ids.is_empty() {
                index.dim = v.len();
            } else if v.len() != index.dim {
                return Err(Error::arg(format!(
                    "feature of example {id} has dimension {}, expected {}",
                    v.len(),
                    index.dim
                )));
            }
            let unit = normalized(v)
                .ok_or_else(|| Error::arg(format!("feature of example {id} is zero or non-finite")))?;
            index.ids.push(id);
            index.unit_vectors.push(unit);
        }
        if index.ids.is_empty() {
            return Err(Error::arg("neighbor index needs at least one vector"));
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `k` nearest stored examples as `(id, cosine distance)`, closest
    /// first; equal distances go to the smaller id. `exclude` skips one id
    /// (used when querying with a training image).
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<u64>) -> Result<Vec<(u64, f64)>> {
        if query.len() != self.dim {
            return Err(Error::arg("query dimension differs from index"));
        }
        let q = normalized(query).ok_or_else(|| Error::arg("cosine distance undefined for a zero query"))?;
        let mut dists: Vec<(u64, f64)> = self
            .ids
            .iter()
            .zip(&self.unit_vectors)
            .filter(|(id, _)| Some(**id) != exclude)
            .map(|(&id, v)| (id, 1.0 - dot(&q, v)))
            .collect();
        if k > dists.len() {
            return Err(Error::arg(format!("k = {k} exceeds the {} searchable examples", dists.len())));
        }
        dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        dists.truncate(k);
        Ok(dists)
    }
}

/// Retrieves the `k` nearest images and ranks words of their pooled
/// reference captions by term frequency; returns the top `top_k`.
pub fn knn_attributes<S: AsRef<str>>(
    query: &[f64],
    index: &NeighborIndex,
    captions: &HashMap<u64, Vec<Vec<S>>>,
    k: usize,
    top_k: usize,
    stopwords: &HashSet<String>,
    exclude: Option<u64>,
) -> Result<RankedWords> {
    let neighbors = index.nearest(query, k, exclude)?;
    let mut pooled = Vec::new();
    for (id, _) in neighbors {
        let caps = captions
            .get(&id)
            .ok_or_else(|| Error::arg(format!("no captions stored for example {id}")))?;
        pooled.extend(caps.iter().flatten().map(AsRef::as_ref));
    }
    Ok(rank_by_frequency(pooled, top_k, stopwords))
}

/// Stand-in for a learned detector with a controllable hit rate: each of the
/// `k` slots holds the next ground-truth attribute with probability
/// `precision`, otherwise a uniformly drawn non-ground-truth word. Slots are
/// scored in descending order.
pub fn noisy_oracle_attributes<R: Rng + ?Sized>(
    gt: &AttributeSet,
    vocab: &Vocabulary,
    precision: f64,
    rng: &mut R,
    k: usize,
) -> Result<AttributeSet> {
    if !(0.0..=1.0).contains(&precision) {
        return Err(Error::arg(format!("precision {precision} outside [0, 1]")));
    }
    let mut distractors: Vec<TokenId> = (0..vocab.len())
        .filter(|&id| !Vocabulary::is_reserved(id) && !gt.contains(id))
        .collect();
    let available_gt = gt.len().min(k);
    if distractors.len() + available_gt < k {
        return Err(Error::arg(format!(
            "vocabulary too small for {k} distinct attributes"
        )));
    }
    let mut next_gt = gt.ids().iter();
    let mut entries = Vec::with_capacity(k);
    for slot in 0..k {
        let score = 1.0 - slot as f64 / k as f64;
        let want_gt = rng.random_bool(precision);
        let gt_pick = if want_gt { next_gt.next().copied() } else { None };
        let id = match gt_pick {
            Some(id) => id,
            None if !distractors.is_empty() => {
                let j = rng.random_range(0..distractors.len());
                distractors.swap_remove(j)
            }
            None => *next_gt
                .next()
                .ok_or_else(|| Error::arg("vocabulary too small for distinct attributes"))?,
        };
        entries.push((id, score));
    }
    AttributeSet::new(entries)
}

/// Elementwise maximum over the attribute embeddings.
pub fn fuse_max(attrs: &AttributeSet, e: &Tensor) -> Result<Vec<f64>> {
    let (first, rest) = attrs
        .ids()
        .split_first()
        .ok_or_else(|| Error::arg("max fusion of an empty attribute set"))?;
    let mut out = embed(e, *first)?;
    for &id in rest {
        for (o, x) in out.iter_mut().zip(embed(e, id)?) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

/// Top-`slots` embeddings concatenated in score order, zero-padded.
pub fn fuse_concat(attrs: &AttributeSet, e: &Tensor, slots: usize) -> Result<Vec<f64>> {
    if slots < 1 {
        return Err(Error::arg("concatenation needs at least one slot"));
    }
    if attrs.is_empty() {
        return Err(Error::arg("concatenation of an empty attribute set"));
    }
    let d = e.rows();
    let mut out = vec![0.0; slots * d];
    for (slot, &id) in attrs.ids().iter().take(slots).enumerate() {
        out[slot * d..(slot + 1) * d].copy_from_slice(&embed(e, id)?);
    }
    Ok(out)
}

/// One line per example: `id word:score word:score ...`.
pub fn write_attribute_file(sets: &[(u64, RankedWords)]) -> String {
    let mut out = String::new();
    for (id, words) in sets {
        let _ = write!(out, "{id}");
        for (w, s) in words {
            let _ = write!(out, " {w}:{s}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_attribute_file(text: &str) -> Result<Vec<(u64, RankedWords)>> {
    let mut sets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let id = id
            .parse::<u64>()
            .map_err(|_| Error::parse(lineno, format!("bad example id `{id}`")))?;
        let words = fields
            .map(|f| {
                let (w, s) = f
                    .rsplit_once(':')
                    .ok_or_else(|| Error::parse(lineno, format!("expected word:score, got `{f}`")))?;
                let s = s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(lineno, format!("bad score in `{f}`")))?;
                Ok((w.to_string(), s))
            })
            .collect::<Result<RankedWords>>()?;
        sets.push((id, words));
    }
    Ok(sets)
}
