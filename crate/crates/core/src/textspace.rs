//! Discrete captions <-> continuous latents.
//!
//! Captions are tokenized by lowercasing and splitting on anything that is
//! not alphanumeric. A caption of `k` words becomes the fixed-length id
//! sequence `w_1 .. w_k END PAD ..` of length `n`; `START` is reserved but
//! never placed in a latent.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{softmax_rows, Tape, Var};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

pub const EMBEDDING: &str = "embedding.weight";
pub const ROUNDING_WEIGHT: &str = "rounding.weight";
pub const ROUNDING_BIAS: &str = "rounding.bias";

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Every distinct corpus token gets an id; no frequency cutoff.
    /// Word ids follow sorted token order after the reserved block.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let words: BTreeSet<&str> = corpus
            .iter()
            .flatten()
            .map(|w| w.as_ref())
            .filter(|w| !RESERVED.contains(w))
            .collect();
        if words.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(str::to_string))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() + 1 || tokens[..4] != RESERVED {
            return Err(Error::Data(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of non-reserved words.
    pub fn word_count(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Fixed-length id sequence: words, `END`, then `PAD`. Captions longer
    /// than `seq_len - 1` words are truncated.
    pub fn encode<S: AsRef<str>>(&self, words: &[S], seq_len: usize) -> Vec<usize> {
        let keep = words.len().min(seq_len.saturating_sub(1));
        let mut ids: Vec<usize> = words[..keep].iter().map(|w| self.id(w.as_ref())).collect();
        if ids.len() < seq_len {
            ids.push(END);
        }
        ids.resize(seq_len, PAD);
        ids
    }

    /// Words up to the first `END`; `PAD` and `START` are dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != END)
            .filter(|&&id| id != PAD && id != START)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn content_hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Rows of the embedding table for `ids`.
pub fn embed(ids: &[usize], table: &Array2<f64>) -> Result<Array2<f64>> {
    check_ids(ids, table.nrows())?;
    Ok(table.select(ndarray::Axis(0), ids))
}

pub(crate) fn check_ids(ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= size) {
        Some(&id) => Err(Error::TokenOutOfRange { id, size }),
        None => Ok(()),
    }
}

/// `x_0 = Emb(w) + sqrt(1 - alpha0) * eps`.
pub fn noise_words(emb: &Array2<f64>, alpha0: f64, eps: &Array2<f64>) -> Result<Array2<f64>> {
    if !(alpha0 > 0.0 && alpha0 <= 1.0) {
        return Err(Error::Config(format!("alpha0 = {alpha0} outside (0, 1]")));
    }
    if emb.shape() != eps.shape() {
        return Err(Error::shape("noise_words", emb.shape(), eps.shape()));
    }
    let mut out = emb.clone();
    out.scaled_add((1.0 - alpha0).sqrt(), eps);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Rounding {
    pub ids: Vec<usize>,
    /// `n x V` rows of `p(w_i | x_0,i)`.
    pub probs: Array2<f64>,
}

/// Linear projection + softmax per position, argmax with ties to the
/// lowest id.
pub fn round_to_tokens(
    x0: &Array2<f64>,
    weight: &Array2<f64>,
    bias: &Array2<f64>,
) -> Result<Rounding> {
    if weight.nrows() != x0.ncols() {
        return Err(Error::shape(
            "round_to_tokens",
            &[x0.ncols(), weight.ncols()],
            weight.shape(),
        ));
    }
    if bias.dim() != (1, weight.ncols()) {
        return Err(Error::shape(
            "round_to_tokens bias",
            &[1, weight.ncols()],
            bias.shape(),
        ));
    }
    let logits = x0.dot(weight) + bias;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "rounding logits".into(),
        });
    }
    let ids = logits
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect();
    Ok(Rounding {
        ids,
        probs: softmax_rows(logits.view()),
    })
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Rounding logits on the tape. For tied rounding pass the transposed
/// embedding table as `weight`.
pub fn rounding_logits(tape: &mut Tape<'_>, x0: Var, weight: Var, bias: Var) -> Var {
    let z = tape.matmul(x0, weight);
    tape.add_row(z, bias)
}
