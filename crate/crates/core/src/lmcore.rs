//! Vocabulary, token sequences and the language-model contract.
//!
//! Every model in the crate (the trainable n-gram network, the toy tables
//! used in tests, the uniform reference) implements [`LanguageModel`]: a
//! deterministic map from a context to a normalized next-token
//! log-probability vector.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Per-token log-probability floor applied whenever log-probabilities are summed.
pub const LOG_PROB_FLOOR: f64 = -50.0;

const SPECIAL_NAMES: [&str; 4] = ["bos", "eos", "pad", "unk"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    pad: TokenId,
    unk: TokenId,
    longest_symbol: usize,
}

impl Vocabulary {
    pub fn new(
        symbols: Vec<String>,
        bos: TokenId,
        eos: TokenId,
        pad: TokenId,
        unk: TokenId,
    ) -> Result<Self> {
        if symbols.len() < 4 {
            return Err(Error::Vocabulary(format!(
                "need at least 4 symbols, got {}",
                symbols.len()
            )));
        }
        let specials = [bos, eos, pad, unk];
        for (i, &s) in specials.iter().enumerate() {
            if s >= symbols.len() {
                return Err(Error::Vocabulary(format!(
                    "{} id {s} out of range",
                    SPECIAL_NAMES[i]
                )));
            }
            if specials[..i].contains(&s) {
                return Err(Error::Vocabulary(format!(
                    "special id {s} used twice"
                )));
            }
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, sym) in symbols.iter().enumerate() {
            if sym.is_empty() || sym.contains('\n') {
                return Err(Error::Vocabulary(format!(
                    "symbol {id} is empty or contains a newline"
                )));
            }
            if index.insert(sym.clone(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate symbol {sym:?}")));
            }
        }
        let longest_symbol = symbols
            .iter()
            .enumerate()
            .filter(|(id, _)| !specials.contains(id))
            .map(|(_, s)| s.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            symbols,
            index,
            bos,
            eos,
            pad,
            unk,
            longest_symbol,
        })
    }

    /// Character vocabulary: four specials followed by printable ASCII.
    pub fn char_default() -> Self {
        let mut symbols: Vec<String> = ["<bos>", "<eos>", "<pad>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        symbols.extend((0x20u8..=0x7e).map(|b| (b as char).to_string()));
        Self::new(symbols, 0, 1, 2, 3).expect("default vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos || id == self.pad || id == self.unk
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    /// Serialized file form: a 4-line header `bos <id>` .. `unk <id>`, then
    /// one symbol per line where the line index after the header is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (name, id) in SPECIAL_NAMES
            .iter()
            .zip([self.bos, self.eos, self.pad, self.unk])
        {
            let _ = writeln!(out, "{name} {id}");
        }
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let mut ids = [0usize; 4];
        for (slot, name) in ids.iter_mut().zip(SPECIAL_NAMES) {
            let line = lines
                .next()
                .ok_or_else(|| Error::Vocabulary("truncated header".into()))?;
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Vocabulary(format!("bad header line {line:?}")))?;
            if key != name {
                return Err(Error::Vocabulary(format!(
                    "expected header key {name}, found {key}"
                )));
            }
            *slot = value
                .trim()
                .parse()
                .map_err(|_| Error::Vocabulary(format!("bad id in header line {line:?}")))?;
        }
        let mut symbols: Vec<String> = lines.map(str::to_string).collect();
        // file ends with a newline
        if symbols.last().is_some_and(|s| s.is_empty()) {
            symbols.pop();
        }
        Self::new(symbols, ids[0], ids[1], ids[2], ids[3])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the serialized file form.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_file_string().as_bytes()).into()
    }
}

/// Longest-match encoding; characters that start no symbol map to `unk`.
pub fn encode(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut ids = Vec::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let mut matched = None;
        let max_len = vocab.longest_symbol.min(chars.len() - i);
        for len in (1..=max_len).rev() {
            let end = chars.get(i + len).map_or(text.len(), |c| c.0);
            if let Some(id) = vocab.id_of(&text[start..end]) {
                if !vocab.is_special(id) {
                    matched = Some((id, len));
                    break;
                }
            }
        }
        match matched {
            Some((id, len)) => {
                ids.push(id);
                i += len;
            }
            None => {
                ids.push(vocab.unk());
                i += 1;
            }
        }
    }
    TokenSequence(ids)
}

/// Concatenates surface symbols, dropping special tokens.
pub fn decode_text(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    seq.validate(vocab)?;
    let mut out = String::new();
    for &id in seq.ids() {
        if !vocab.is_special(id) {
            out.push_str(&vocab.symbols[id]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.len() + other.len());
        ids.extend_from_slice(&self.0);
        ids.extend_from_slice(&other.0);
        TokenSequence(ids)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        match self.0.iter().position(|&id| id >= vocab.len()) {
            Some(position) => Err(Error::TokenOutOfRange {
                position,
                id: self.0[position],
                vocab_size: vocab.len(),
            }),
            None => Ok(()),
        }
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// Normalized next-token log-probabilities, one entry per vocabulary symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector(Vec<f64>);

impl LogProbVector {
    /// Log-softmax of raw scores.
    pub fn from_logits(logits: &[f64]) -> Self {
        let lse = logsumexp(logits);
        Self(logits.iter().map(|&l| l - lse).collect())
    }

    /// Wraps values the caller guarantees are already normalized.
    pub fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!((logsumexp(&values)).abs() < 1e-6);
        Self(values)
    }

    /// Test-only constructor that skips the normalization contract.
    #[cfg(test)]
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn from_probs(probs: &[f64]) -> Self {
        let logs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        Self::from_logits(&logs)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.0[id]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Highest log-probability; ties go to the lower token id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (logsumexp(&self.0)).abs() < tol && self.0.iter().all(|&v| v <= 1e-9)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// A deterministic next-token distribution over a fixed vocabulary.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;
    fn next_log_probs(&self, context: &[TokenId]) -> LogProbVector;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn next_log_probs(&self, context: &[TokenId]) -> LogProbVector {
        (**self).next_log_probs(context)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<M> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn next_log_probs(&self, context: &[TokenId]) -> LogProbVector {
        (**self).next_log_probs(context)
    }
}

/// Every context gets the uniform distribution.
#[derive(Debug, Clone)]
pub struct UniformModel {
    vocab: Vocabulary,
}

impl UniformModel {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }
}

impl LanguageModel for UniformModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, _context: &[TokenId]) -> LogProbVector {
        let n = self.vocab.len();
        LogProbVector(vec![-(n as f64).ln(); n])
    }
}

/// Per-token log-probabilities of `continuation` given `prompt`, each clamped at
/// [`LOG_PROB_FLOOR`].
pub fn token_log_probs(
    model: &dyn LanguageModel,
    prompt: &TokenSequence,
    continuation: &TokenSequence,
) -> Vec<f64> {
    let mut context = prompt.0.clone();
    let mut out = Vec::with_capacity(continuation.len());
    for &tok in continuation.ids() {
        let lp = model.next_log_probs(&context);
        out.push(lp.get(tok).max(LOG_PROB_FLOOR));
        context.push(tok);
    }
    out
}

/// Σ_t log π(y_t | prompt ⊕ y_<t), per-token floored.
pub fn sequence_log_prob(
    model: &dyn LanguageModel,
    prompt: &TokenSequence,
    continuation: &TokenSequence,
) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::EmptySequence("continuation"));
    }
    Ok(token_log_probs(model, prompt, continuation).iter().sum())
}
