//! ROUGE-1 / ROUGE-L, perplexity, win-rates, standard errors and the
//! per-instance evaluation report.
//!
//! ROUGE tokenization: lowercase, then split on runs of non-alphanumeric
//! characters. No stemming, no stopword removal.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmcore::{sequence_log_prob, LanguageModel, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_counts(overlap: usize, hyp_len: usize, ref_len: usize) -> Self {
        if hyp_len == 0 || ref_len == 0 || overlap == 0 {
            return Self::ZERO;
        }
        let precision = overlap as f64 / hyp_len as f64;
        let recall = overlap as f64 / ref_len as f64;
        Self {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Clipped unigram overlap.
pub fn rouge1(reference: &str, hypothesis: &str) -> RougeScore {
    let r = rouge_tokens(reference);
    let h = rouge_tokens(hypothesis);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &h {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    RougeScore::from_counts(overlap, h.len(), r.len())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure.
#[allow(non_snake_case)]
pub fn rougeL(reference: &str, hypothesis: &str) -> RougeScore {
    let r = rouge_tokens(reference);
    let h = rouge_tokens(hypothesis);
    RougeScore::from_counts(lcs_len(&r, &h), h.len(), r.len())
}

/// `exp(−mean log p)` of `tokens` given `prompt`.
pub fn perplexity(
    model: &dyn LanguageModel,
    prompt: &TokenSequence,
    tokens: &TokenSequence,
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence("perplexity text"));
    }
    let lp = sequence_log_prob(model, prompt, tokens)?;
    Ok((-lp / tokens.len() as f64).exp())
}

/// Fraction of aligned instances where the method scores at least the baseline.
pub fn win_rate(method: &[f64], baseline: &[f64]) -> Result<f64> {
    if method.len() != baseline.len() {
        return Err(Error::InvalidArgument(format!(
            "win rate needs aligned lists, got {} and {}",
            method.len(),
            baseline.len()
        )));
    }
    if method.is_empty() {
        return Err(Error::InvalidArgument("win rate of empty lists".into()));
    }
    let wins = method.iter().zip(baseline).filter(|(m, b)| m >= b).count();
    Ok(wins as f64 / method.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n−1) divided by √n.
pub fn standard_error(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "standard error needs at least 2 values, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() / n.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub user_id: String,
    pub instance: usize,
    pub method: String,
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub perplexity: f64,
    pub sequence_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub n: usize,
    pub rouge1_mean: f64,
    pub rouge1_se: f64,
    #[serde(rename = "rougeL_mean")]
    pub rouge_l_mean: f64,
    #[serde(rename = "rougeL_se")]
    pub rouge_l_se: f64,
    pub perplexity_mean: f64,
    pub perplexity_se: f64,
    pub reward_mean: f64,
    pub reward_se: f64,
    pub rouge1_win_rate: f64,
    #[serde(rename = "rougeL_win_rate")]
    pub rouge_l_win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub baseline: String,
    pub methods: Vec<MethodAggregate>,
}

/// Per-instance scores plus aggregates recomputable from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<InstanceRow>,
    pub aggregates: Aggregates,
}

const CSV_HEADER: &str = "user_id,instance,method,rouge1,rougeL,perplexity,sequence_reward";

impl EvalReport {
    /// Builds aggregates; win-rates compare each method with `baseline`
    /// instance by instance.
    pub fn from_rows(rows: Vec<InstanceRow>, baseline: &str) -> Result<Self> {
        let aggregates = aggregate(&rows, baseline)?;
        Ok(Self { rows, aggregates })
    }

    pub fn method(&self, name: &str) -> Option<&MethodAggregate> {
        self.aggregates.methods.iter().find(|m| m.method == name)
    }

    /// Rows for `method`, ordered by (user, instance).
    pub fn method_rows(&self, method: &str) -> Vec<&InstanceRow> {
        let mut rows: Vec<&InstanceRow> = self.rows.iter().filter(|r| r.method == method).collect();
        rows.sort_by(|a, b| (&a.user_id, a.instance).cmp(&(&b.user_id, b.instance)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.user_id, r.instance, r.method, r.rouge1, r.rouge_l, r.perplexity, r.sequence_reward
            );
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<InstanceRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::InvalidArgument("unexpected report header".into()));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number {s:?}")))
        };
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 7 {
                    return Err(Error::InvalidArgument(format!("bad report row {l:?}")));
                }
                Ok(InstanceRow {
                    user_id: f[0].to_string(),
                    instance: f[1]
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad instance {:?}", f[1])))?,
                    method: f[2].to_string(),
                    rouge1: num(f[3])?,
                    rouge_l: num(f[4])?,
                    perplexity: num(f[5])?,
                    sequence_reward: num(f[6])?,
                })
            })
            .collect()
    }

    pub fn aggregates_json(&self) -> String {
        serde_json::to_string_pretty(&self.aggregates).expect("aggregates serialize") + "\n"
    }
}

fn aggregate(rows: &[InstanceRow], baseline: &str) -> Result<Aggregates> {
    let mut by_method: BTreeMap<&str, Vec<&InstanceRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(r.method.as_str()).or_default().push(r);
    }
    let key = |r: &InstanceRow| (r.user_id.clone(), r.instance);
    let base: HashMap<(String, usize), &InstanceRow> = by_method
        .get(baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline method {baseline:?} has no rows")))?
        .iter()
        .map(|r| (key(r), *r))
        .collect();
    let mut methods = Vec::new();
    for (name, mut rs) in by_method {
        rs.sort_by(|a, b| (&a.user_id, a.instance).cmp(&(&b.user_id, b.instance)));
        let col = |f: fn(&InstanceRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let r1 = col(|r| r.rouge1);
        let rl = col(|r| r.rouge_l);
        let ppl = col(|r| r.perplexity);
        let rew = col(|r| r.sequence_reward);
        let mut b1 = Vec::with_capacity(rs.len());
        let mut bl = Vec::with_capacity(rs.len());
        for r in &rs {
            let b = base.get(&key(r)).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "baseline has no row for {} #{}",
                    r.user_id, r.instance
                ))
            })?;
            b1.push(b.rouge1);
            bl.push(b.rouge_l);
        }
        methods.push(MethodAggregate {
            method: name.to_string(),
            n: rs.len(),
            rouge1_mean: mean(&r1),
            rouge1_se: standard_error(&r1)?,
            rouge_l_mean: mean(&rl),
            rouge_l_se: standard_error(&rl)?,
            perplexity_mean: mean(&ppl),
            perplexity_se: standard_error(&ppl)?,
            reward_mean: mean(&rew),
            reward_se: standard_error(&rew)?,
            rouge1_win_rate: win_rate(&r1, &b1)?,
            rouge_l_win_rate: win_rate(&rl, &bl)?,
        });
    }
    Ok(Aggregates {
        baseline: baseline.to_string(),
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmcore::{UniformModel, Vocabulary};
    use proptest::prelude::*;

    #[test]
    fn rouge1_examples() {
        assert_eq!(rouge1("the cat", "the cat").f1, 1.0);
        let s = rouge1("a b c", "a b d");
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge1("a b", "c d"), RougeScore::ZERO);
        assert_eq!(rouge1("", "a"), RougeScore::ZERO);
        // clipped counts
        let s = rouge1("a b", "a a a");
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(rougeL("x y z", "x y z").f1, 1.0);
        let s = rougeL("the cat sat on the mat", "the cat the mat");
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 0.8).abs() < 1e-15);
        assert_eq!(rougeL("a", ""), RougeScore::ZERO);
    }

    #[test]
    fn normalization() {
        assert_eq!(rouge_tokens("  Hello, World!! it's"), vec!["hello", "world", "it", "s"]);
        assert_eq!(rougeL("  The Cat ", "the cat").f1, 1.0);
    }

    #[test]
    fn perplexity_uniform() {
        let v = Vocabulary::char_default();
        let n = v.len() as f64;
        let m = UniformModel::new(v);
        let p = perplexity(&m, &vec![0].into(), &vec![40, 41, 42].into()).unwrap();
        assert!((p - n).abs() < 1e-9);
        assert!(perplexity(&m, &vec![0].into(), &TokenSequence::default()).is_err());
    }

    #[test]
    fn win_rate_and_se() {
        assert_eq!(win_rate(&[0.5, 0.3], &[0.4, 0.3]).unwrap(), 1.0);
        assert_eq!(win_rate(&[0.1, 0.2], &[0.4, 0.3]).unwrap(), 0.0);
        assert!(win_rate(&[0.1], &[0.1, 0.2]).is_err());
        assert_eq!(standard_error(&[0.3; 5]).unwrap(), 0.0);
        assert!((standard_error(&[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(standard_error(&[1.0]).is_err());
    }

    fn row(user: &str, i: usize, method: &str, r: f64) -> InstanceRow {
        InstanceRow {
            user_id: user.into(),
            instance: i,
            method: method.into(),
            rouge1: r,
            rouge_l: r / 2.0,
            perplexity: 1.0 + r,
            sequence_reward: -r,
        }
    }

    #[test]
    fn report_round_trip_and_recompute() {
        let rows = vec![
            row("u1", 0, "tam", 0.1),
            row("u1", 1, "tam", 0.7),
            row("u1", 0, "cope", 0.3),
            row("u1", 1, "cope", 0.7),
            row("u2", 0, "tam", 0.5),
            row("u2", 0, "cope", 0.2),
        ];
        let rep = EvalReport::from_rows(rows, "tam").unwrap();
        let cope = rep.method("cope").unwrap();
        assert_eq!(cope.n, 3);
        assert!((cope.rouge1_win_rate - 2.0 / 3.0).abs() < 1e-15);
        assert!((rep.method("tam").unwrap().rouge_l_win_rate - 1.0).abs() < 1e-15);
        let parsed = EvalReport::rows_from_csv(&rep.to_csv()).unwrap();
        let again = EvalReport::from_rows(parsed, "tam").unwrap();
        assert_eq!(again, rep);
        assert!(EvalReport::from_rows(vec![row("u", 0, "x", 0.1), row("u", 1, "x", 0.2)], "tam").is_err());
    }

    /// Exponential-time LCS by enumerating every subsequence of the shorter list.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let (s, l) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0;
        for mask in 0u32..(1 << s.len()) {
            let sub: Vec<u8> = (0..s.len()).filter(|i| mask >> i & 1 == 1).map(|i| s[i]).collect();
            let mut it = l.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in prop::collection::vec(0u8..4, 0..10), b in prop::collection::vec(0u8..4, 0..10)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn rouge_bounds_and_identity(s in "[a-e ]{0,30}", t in "[a-e ]{0,30}") {
            for score in [rouge1(&s, &t), rougeL(&s, &t)] {
                prop_assert!((0.0..=1.0).contains(&score.f1));
                prop_assert!((0.0..=1.0).contains(&score.precision));
                prop_assert!((0.0..=1.0).contains(&score.recall));
            }
            if !rouge_tokens(&s).is_empty() {
                prop_assert_eq!(rouge1(&s, &s).f1, 1.0);
                prop_assert_eq!(rougeL(&s, &s).f1, 1.0);
                let padded = format!("  {}  ", s.to_uppercase());
                prop_assert_eq!(rougeL(&padded, &s).f1, 1.0);
            }
        }

        #[test]
        fn win_rate_self_is_one(xs in prop::collection::vec(0.0f64..1.0, 1..20)) {
            prop_assert_eq!(win_rate(&xs, &xs).unwrap(), 1.0);
        }
    }
}
