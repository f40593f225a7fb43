//! Word/id dictionary and the shared embedding matrix.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type TokenId = usize;

pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";

/// Bijective word ↔ id map. Reserved tokens occupy ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const START_ID: TokenId = 0;
    pub const END_ID: TokenId = 1;
    pub const UNK_ID: TokenId = 2;

    /// Builds a vocabulary from an explicit word list. The list must start
    /// with the three reserved tokens and contain no duplicates.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[0] != START || words[1] != END || words[2] != UNK {
            return Err(Error::arg("vocabulary must begin with <start>, <end>, <unk>"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate() {
            if index.insert(w.clone(), id).is_some() {
                return Err(Error::arg(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or UNK if it is not in the dictionary.
    pub fn encode_word(&self, word: &str) -> TokenId {
        self.get(word).unwrap_or(Self::UNK_ID)
    }

    /// Encodes a caption and appends END.
    pub fn encode_caption<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.encode_word(t.as_ref()))
            .chain(std::iter::once(Self::END_ID))
            .collect()
    }

    /// Surface words for a token sequence, dropping START/END.
    pub fn decode(&self, tokens: &[TokenId]) -> Vec<String> {
        tokens
            .iter()
            .filter(|&&t| t != Self::START_ID && t != Self::END_ID)
            .map(|&t| self.word(t).unwrap_or(UNK).to_string())
            .collect()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < 3
    }
}

/// Reserved tokens first, then tokens with count ≥ `min_count` by descending
/// frequency; equal counts are ordered lexicographically.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::arg("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for caption in corpus {
        for tok in caption {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count && ![START, END, UNK].contains(w))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let words = [START, END, UNK]
        .into_iter()
        .chain(ranked.into_iter().map(|(w, _)| w))
        .map(str::to_string)
        .collect();
    Vocabulary::from_words(words)
}

/// Word embeddings stored as a `d × |Y|` matrix; column `j` embeds token `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(pub Tensor);

impl EmbeddingMatrix {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::arg("embedding matrix must be 2-D"));
        }
        Ok(EmbeddingMatrix(matrix))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.0.cols()
    }

    pub fn embed(&self, token: TokenId) -> Result<Vec<f64>> {
        embed(&self.0, token)
    }
}

/// Column `token` of `E`, i.e. `E · onehot(token)`.
pub fn embed(e: &Tensor, token: TokenId) -> Result<Vec<f64>> {
    if token >= e.cols() {
        return Err(Error::arg(format!(
            "token id {token} out of range for vocabulary of {}",
            e.cols()
        )));
    }
    Ok(e.column(token))
}

/// Half-width of the uniform initialization range, `√(6/(fan_in+fan_out))`.
pub fn init_scale(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Random `d × |Y|` embedding. If `pretrained` is given, words found in the
/// table take their vector from it.
pub fn init_embedding<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    d: usize,
    rng: &mut R,
    pretrained: Option<&Path>,
) -> Result<EmbeddingMatrix> {
    if d == 0 {
        return Err(Error::arg("embedding dimension must be at least 1"));
    }
    let mut e = Tensor::uniform(&[d, vocab.len()], init_scale(d, vocab.len()), rng);
    if let Some(path) = pretrained {
        let text = fs::read_to_string(path)?;
        let table = parse_embedding_table(&text, d)?;
        for (word, vector) in table {
            if let Some(id) = vocab.get(&word) {
                for (r, v) in vector.iter().enumerate() {
                    e.set(r, id, *v);
                }
            }
        }
    }
    EmbeddingMatrix::new(e)
}

/// Parses a whitespace-separated `word v1 .. vd` table, one word per line.
/// Blank lines are skipped.
pub fn parse_embedding_table(text: &str, d: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(lineno, format!("bad number `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != d {
            return Err(Error::parse(
                lineno,
                format!("expected {d} values for `{word}`, found {}", values.len()),
            ));
        }
        rows.push((word.to_string(), values));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn corpus() -> Vec<Vec<&'static str>> {
        vec![vec!["a", "cat"], vec!["a", "dog"]]
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = build_vocabulary(&corpus(), 1).unwrap();
        assert_eq!(v.words(), &[START, END, UNK, "a", "cat", "dog"]);
        assert!(v.get("a").unwrap() < v.get("cat").unwrap());
        assert!(v.get("cat").unwrap() < v.get("dog").unwrap());
    }

    #[test]
    fn min_count_maps_rare_words_to_unk() {
        let v = build_vocabulary(&corpus(), 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.get("cat"), None);
        assert_eq!(v.encode_word("cat"), Vocabulary::UNK_ID);
        assert_eq!(v.encode_caption(&["a", "dog"]), vec![3, 2, 1]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: Vec<Vec<&str>> = vec![];
        assert!(build_vocabulary(&empty, 1).is_err());
    }

    #[test]
    fn round_trip_index() {
        let v = build_vocabulary(&corpus(), 1).unwrap();
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.get(w), Some(i));
        }
        assert!(Vocabulary::from_words(vec!["x".into()]).is_err());
    }

    #[test]
    fn embed_reads_columns() {
        let ident = Tensor::identity(4);
        assert_eq!(embed(&ident, 2).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let e = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(embed(&e, 1).unwrap(), vec![0.0, 3.0]);
        assert!(embed(&e, 2).is_err());
    }

    #[test]
    fn embed_equals_matrix_times_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::uniform(&[3, 7], 1.0, &mut rng);
        for tok in 0..7 {
            let mut onehot = vec![0.0; 7];
            onehot[tok] = 1.0;
            assert_eq!(embed(&e, tok).unwrap(), e.matvec(&onehot).unwrap());
        }
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let v = build_vocabulary(&corpus(), 1).unwrap();
        let a = init_embedding(&v, 16, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        let b = init_embedding(&v, 16, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        assert_eq!(a, b);
        let s = init_scale(16, 6);
        assert!(a.0.data().iter().all(|x| x.abs() <= s));
        assert!((init_scale(16, 100) - 0.2274294).abs() < 1e-7);
    }

    #[test]
    fn pretrained_table_overrides_columns() {
        let v = build_vocabulary(&corpus(), 1).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for (i, w) in v.words().iter().enumerate() {
            writeln!(f, "{w} {} {}", i as f64, -(i as f64) / 2.0).unwrap();
        }
        let e = init_embedding(&v, 2, &mut ChaCha8Rng::seed_from_u64(1), Some(f.path())).unwrap();
        for i in 0..v.len() {
            assert_eq!(e.embed(i).unwrap(), vec![i as f64, -(i as f64) / 2.0]);
        }
    }

    #[test]
    fn malformed_table_reports_line() {
        let err = parse_embedding_table("a 1 2\nb 1 x\n", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_embedding_table("a 1 2\n\nb 1\n", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }
}
