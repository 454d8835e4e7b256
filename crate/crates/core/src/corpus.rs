//! Synthetic multi-user corpus with controllable stylistic signal.
//!
//! Every response follows one sentence template with four word slots. Each
//! target user has a preferred word per slot and uses it with probability
//! `fidelity`; otherwise a uniformly random alternative. Background users
//! lean towards the generic first word of each slot and feed the pooled file
//! the task-adapted model is trained on.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmcore::{encode, TokenSequence, Vocabulary};

pub const TOPICS: [&str; 16] = [
    "rain", "snow", "tea", "jazz", "chess", "coffee", "hiking", "pizza", "cats", "dogs", "books",
    "movies", "summer", "trains", "poetry", "soup",
];

pub const NUM_SLOTS: usize = 4;
pub const SLOT_CHOICES: usize = 6;

/// Slot words; index 0 is the generic choice.
pub const SLOTS: [[&str; SLOT_CHOICES]; NUM_SLOTS] = [
    ["very", "truly", "really", "quite", "rather", "super"],
    ["good", "lovely", "great", "neat", "grand", "cool"],
    ["like", "adore", "enjoy", "love", "dig", "prize"],
    ["a lot", "for sure", "no doubt", "indeed", "honestly", "always"],
];

pub type Lexicon = [usize; NUM_SLOTS];

/// Character vocabulary extended with the corpus words: bare topic words
/// (they open every response) and every word with a leading space.
pub fn corpus_vocabulary() -> Vocabulary {
    let base = Vocabulary::char_default();
    let mut symbols: Vec<String> = (0..base.len())
        .map(|i| base.symbol(i).expect("in range").to_string())
        .collect();
    let mut words: Vec<&str> = TOPICS.to_vec();
    words.extend(["is", "and", "i", "it"]);
    for slot in SLOTS.iter() {
        for w in slot.iter() {
            words.extend(w.split(' '));
        }
    }
    let mut extra: Vec<String> = TOPICS.iter().map(|t| t.to_string()).collect();
    extra.extend(words.iter().map(|w| format!(" {w}")));
    for sym in extra {
        if !symbols.contains(&sym) {
            symbols.push(sym);
        }
    }
    Vocabulary::new(symbols, base.bos(), base.eos(), base.pad(), base.unk())
        .expect("corpus vocabulary is valid")
}

pub fn render(topic: &str, words: &Lexicon) -> String {
    format!(
        "{topic} is {} {} and i {} it {}",
        SLOTS[0][words[0]], SLOTS[1][words[1]], SLOTS[2][words[2]], SLOTS[3][words[3]]
    )
}

pub fn prompt_text(topic: &str) -> String {
    format!("{topic}: ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserRole {
    Target,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub user_id: String,
    pub role: UserRole,
    pub lexicon: Lexicon,
    /// Probability of using the preferred word in each slot.
    pub fidelity: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub user_id: String,
    pub split: String,
    pub input: String,
    pub output: String,
}

impl Sample {
    /// `bos ⊕ input` and `output ⊕ eos`.
    pub fn tokens(&self, vocab: &Vocabulary) -> (TokenSequence, TokenSequence) {
        let mut prompt = TokenSequence::new(vec![vocab.bos()]);
        prompt.0.extend(encode(&self.input, vocab).0);
        let mut target = encode(&self.output, vocab);
        target.push(vocab.eos());
        (prompt, target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub target_users: usize,
    pub background_users: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub background_train: usize,
    pub target_fidelity: f64,
    pub background_fidelity: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target_users: 10,
            background_users: 30,
            target_train: 24,
            target_test: 8,
            background_train: 30,
            target_fidelity: 0.9,
            background_fidelity: 0.5,
        }
    }
}

pub fn hamming(a: &Lexicon, b: &Lexicon) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Up to `n` non-generic lexicons with pairwise Hamming distance ≥ `min_dist`,
/// picked greedily from a seeded shuffle.
pub fn distinct_lexicons(n: usize, min_dist: usize, seed: u64) -> Result<Vec<Lexicon>> {
    let mut all: Vec<Lexicon> = Vec::new();
    for a in 1..SLOT_CHOICES {
        for b in 1..SLOT_CHOICES {
            for c in 1..SLOT_CHOICES {
                for d in 1..SLOT_CHOICES {
                    all.push([a, b, c, d]);
                }
            }
        }
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked: Vec<Lexicon> = Vec::with_capacity(n);
    for cand in all {
        if picked.len() == n {
            break;
        }
        if picked.iter().all(|p| hamming(p, &cand) >= min_dist) {
            picked.push(cand);
        }
    }
    if picked.len() < n {
        return Err(Error::Config(format!(
            "cannot find {n} lexicons at distance {min_dist}"
        )));
    }
    Ok(picked)
}

pub fn default_user_specs(cfg: &CorpusConfig) -> Result<Vec<UserSpec>> {
    let lexicons = distinct_lexicons(cfg.target_users, 3, cfg.seed)?;
    let mut specs: Vec<UserSpec> = lexicons
        .into_iter()
        .enumerate()
        .map(|(i, lexicon)| UserSpec {
            user_id: format!("u{i:02}"),
            role: UserRole::Target,
            lexicon,
            fidelity: cfg.target_fidelity,
            n_train: cfg.target_train,
            n_test: cfg.target_test,
            seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        })
        .collect();
    specs.extend((0..cfg.background_users).map(|i| UserSpec {
        user_id: format!("bg{i:02}"),
        role: UserRole::Background,
        lexicon: [0; NUM_SLOTS],
        fidelity: cfg.background_fidelity,
        n_train: cfg.background_train,
        n_test: 0,
        seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(10_000 + i as u64),
    }));
    Ok(specs)
}

fn draw_words(spec: &UserSpec, rng: &mut ChaCha8Rng) -> Lexicon {
    let mut w = [0; NUM_SLOTS];
    for (s, slot) in w.iter_mut().enumerate() {
        let pref = spec.lexicon[s];
        *slot = if rng.gen::<f64>() < spec.fidelity {
            pref
        } else {
            let k = rng.gen_range(0..SLOT_CHOICES - 1);
            if k >= pref {
                k + 1
            } else {
                k
            }
        };
    }
    w
}

/// Deterministic (train, test) samples of one user.
pub fn generate_user(spec: &UserSpec) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |split: &str| {
        let topic = TOPICS[rng.gen_range(0..TOPICS.len())];
        let words = draw_words(spec, &mut rng);
        Sample {
            user_id: spec.user_id.clone(),
            split: split.to_string(),
            input: prompt_text(topic),
            output: render(topic, &words),
        }
    };
    let train = (0..spec.n_train).map(|_| make("train")).collect();
    let test = (0..spec.n_test).map(|_| make("test")).collect();
    (train, test)
}

/// Index of the written corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub users: Vec<UserSpec>,
}

impl CorpusIndex {
    pub fn target_users(&self) -> impl Iterator<Item = &UserSpec> {
        self.users.iter().filter(|u| u.role == UserRole::Target)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const INDEX_FILE: &str = "corpus.json";
pub const POOLED_FILE: &str = "pooled_train.jsonl";

pub fn user_file(dir: &Path, user_id: &str, split: &str) -> PathBuf {
    dir.join(format!("{user_id}_{split}.jsonl"))
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes per-user train/test files, the pooled background file and the index.
pub fn gen_corpus(specs: &[UserSpec], out_dir: &Path) -> Result<CorpusIndex> {
    let mut seen = BTreeSet::new();
    for s in specs {
        if !seen.insert(s.user_id.as_str()) {
            return Err(Error::DuplicateUser(s.user_id.clone()));
        }
        if !(0.0..=1.0).contains(&s.fidelity) {
            return Err(Error::Config(format!("fidelity of {} outside [0,1]", s.user_id)));
        }
        if s.lexicon.iter().any(|&w| w >= SLOT_CHOICES) {
            return Err(Error::Config(format!("lexicon of {} out of range", s.user_id)));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut pooled = Vec::new();
    for s in specs {
        let (train, test) = generate_user(s);
        match s.role {
            UserRole::Target => {
                write_jsonl(&user_file(out_dir, &s.user_id, "train"), &train)?;
                write_jsonl(&user_file(out_dir, &s.user_id, "test"), &test)?;
            }
            UserRole::Background => pooled.extend(train),
        }
    }
    write_jsonl(&out_dir.join(POOLED_FILE), &pooled)?;
    let index = CorpusIndex {
        users: specs.to_vec(),
    };
    let p = out_dir.join(INDEX_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
    Ok(index)
}
