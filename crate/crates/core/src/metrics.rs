//! Caption metrics: BLEU-1..4, ROUGE-L, and CIDEr, plus readers for
//! candidate and reference files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Recall weight of the LCS F-measure, as in the COCO evaluation tool.
pub const ROUGE_BETA: f64 = 1.2;

/// Highest n-gram order for BLEU and CIDEr.
pub const MAX_ORDER: usize = 4;

/// CIDEr scores are reported multiplied by this factor.
pub const CIDER_SCALE: f64 = 10.0;

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches, candidate n-gram total, for each order `1..=n_max`.
fn clipped_counts(candidate: &[String], references: &[Vec<String>], n_max: usize) -> Vec<(usize, usize)> {
    (1..=n_max)
        .map(|n| {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<Ngram<'_>, usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let matched = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            (matched, candidate.len().saturating_sub(n - 1))
        })
        .collect()
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn bleu_from_counts(counts: &[(usize, usize)], c: usize, r: usize) -> Vec<f64> {
    if c == 0 {
        return vec![0.0; counts.len()];
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(counts.len());
    let mut zero = false;
    for (i, &(matched, total)) in counts.iter().enumerate() {
        if matched == 0 || total == 0 {
            zero = true;
        } else {
            log_sum += (matched as f64 / total as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (i + 1) as f64).exp() });
    }
    out
}

/// Sentence BLEU-1..`n_max` with clipped precision and brevity penalty.
pub fn bleu(candidate: &[String], references: &[Vec<String>], n_max: usize) -> Result<Vec<f64>> {
    check_refs(references)?;
    let counts = clipped_counts(candidate, references, n_max);
    let r = closest_ref_len(candidate.len(), references);
    Ok(bleu_from_counts(&counts, candidate.len(), r))
}

/// Corpus BLEU: clipped counts and lengths summed over all pairs before
/// taking precisions and the brevity penalty.
pub fn corpus_bleu(pairs: &[(&[String], &[Vec<String>])], n_max: usize) -> Result<Vec<f64>> {
    let mut totals = vec![(0, 0); n_max];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        check_refs(refs)?;
        for (acc, x) in totals.iter_mut().zip(clipped_counts(cand, refs, n_max)) {
            acc.0 += x.0;
            acc.1 += x.1;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    Ok(bleu_from_counts(&totals, c, r))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure with recall weighted by `beta`, best over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>], beta: f64) -> Result<f64> {
    check_refs(references)?;
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    let best = references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / candidate.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

fn check_refs(references: &[Vec<String>]) -> Result<()> {
    if references.is_empty() {
        return Err(Error::arg("at least one reference caption is required"));
    }
    Ok(())
}

type TfIdf<'a> = HashMap<Ngram<'a>, f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, idf: &HashMap<Ngram<'_>, f64>, default_idf: f64) -> TfIdf<'a> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| {
            let w = idf.get(g).copied().unwrap_or(default_idf);
            (g, c as f64 / total as f64 * w)
        })
        .collect()
}

fn cosine(a: &TfIdf<'_>, b: &TfIdf<'_>) -> f64 {
    let norm = |v: &TfIdf<'_>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// Per-image CIDEr over a corpus. Document frequency counts the images
/// whose reference set contains an n-gram, and `idf = ln(N / max(1, df))`.
/// Each order contributes the mean cosine between the candidate and each
/// reference; orders are averaged and the result scaled by ten.
pub fn cider_per_image(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::arg("one reference set per candidate is required"));
    }
    if references.len() < 2 {
        return Err(Error::arg("CIDEr needs at least two images for document frequencies"));
    }
    for refs in references {
        check_refs(refs)?;
    }
    let images = references.len() as f64;
    let idf_per_order: Vec<HashMap<Ngram<'_>, f64>> = (1..=MAX_ORDER)
        .map(|n| {
            let mut df: HashMap<Ngram<'_>, usize> = HashMap::new();
            for refs in references {
                let seen: HashSet<Ngram<'_>> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
                for g in seen {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
            df.into_iter().map(|(g, d)| (g, (images / d as f64).ln())).collect()
        })
        .collect();
    let unseen_idf = images.ln();
    Ok(candidates
        .par_iter()
        .zip(references)
        .map(|(cand, refs)| {
            let per_order: f64 = idf_per_order
                .iter()
                .enumerate()
                .map(|(i, idf)| {
                    let n = i + 1;
                    let vc = tfidf(cand, n, idf, unseen_idf);
                    refs.iter()
                        .map(|r| cosine(&vc, &tfidf(r, n, idf, unseen_idf)))
                        .sum::<f64>()
                        / refs.len() as f64
                })
                .sum();
            CIDER_SCALE * per_order / MAX_ORDER as f64
        })
        .collect())
}

/// Corpus CIDEr: mean of the per-image scores.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    let scores = cider_per_image(candidates, references)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; MAX_ORDER],
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 6] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr"];

    pub fn values(&self) -> [f64; 6] {
        let b = self.bleu;
        [b[0], b[1], b[2], b[3], self.rouge_l, self.cider]
    }

    /// Single tab-separated `name=value` line.
    pub fn machine_line(&self) -> String {
        Self::NAMES
            .iter()
            .zip(self.values())
            .map(|(n, v)| format!("{n}={v:.6}"))
            .collect::<Vec<_>>()
            .join("\t")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, v) in Self::NAMES.iter().zip(self.values()) {
            writeln!(f, "{n:<8} {v:>9.4}")?;
        }
        Ok(())
    }
}

/// Captions keyed by image id.
pub type CaptionTable = BTreeMap<String, Vec<Vec<String>>>;

/// Corpus scores of one candidate per image against that image's references.
/// Every candidate id must have references.
pub fn evaluate(candidates: &CaptionTable, references: &CaptionTable) -> Result<MetricReport> {
    if candidates.is_empty() {
        return Err(Error::arg("no candidate captions"));
    }
    let mut cands = Vec::with_capacity(candidates.len());
    let mut refs = Vec::with_capacity(candidates.len());
    for (id, caps) in candidates {
        let r = references
            .get(id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::MissingReference(id.clone()))?;
        let c = caps
            .first()
            .ok_or_else(|| Error::arg(format!("image {id} has no candidate caption")))?;
        cands.push(c.clone());
        refs.push(r.clone());
    }
    let pairs: Vec<(&[String], &[Vec<String>])> = cands.iter().map(Vec::as_slice).zip(refs.iter().map(Vec::as_slice)).collect();
    let bleu = corpus_bleu(&pairs, MAX_ORDER)?;
    let rouge = pairs
        .par_iter()
        .map(|(c, r)| rouge_l(c, r, ROUGE_BETA))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        bleu: [bleu[0], bleu[1], bleu[2], bleu[3]],
        rouge_l: rouge.iter().sum::<f64>() / rouge.len() as f64,
        cider: cider(&cands, &refs)?,
    })
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Deserialize)]
struct CocoEntry {
    image_id: serde_json::Value,
    caption: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CocoFile {
    Results(Vec<CocoEntry>),
    Annotations { annotations: Vec<CocoEntry> },
}

/// Reads `id<TAB>caption` lines or COCO JSON (a result list, or an object
/// with an `annotations` list). Repeated ids collect several captions.
pub fn parse_caption_table(text: &str) -> Result<CaptionTable> {
    let mut table = CaptionTable::new();
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') || trimmed.starts_with('{') {
        let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
        let entries = match file {
            CocoFile::Results(v) | CocoFile::Annotations { annotations: v } => v,
        };
        for e in entries {
            let id = match e.image_id {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            table.entry(id).or_default().push(tokenize(&e.caption));
        }
        return Ok(table);
    }
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(lineno + 1, "expected `id<TAB>caption`"))?;
        table
            .entry(id.trim().to_string())
            .or_default()
            .push(tokenize(caption));
    }
    Ok(table)
}

pub fn write_caption_table(table: &CaptionTable) -> String {
    let mut out = String::new();
    for (id, caps) in table {
        for c in caps {
            out.push_str(id);
            out.push('\t');
            out.push_str(&c.join(" "));
            out.push('\n');
        }
    }
    out
}
