//! Generation: reward-guided contrastive decoding plus greedy and sampling
//! baselines.
//!
//! Ties are broken by higher (penalized) user probability, then lower token
//! id. The repetition penalty touches only the user-side distribution.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmcore::{logsumexp, LanguageModel, LogProbVector, TokenId, TokenSequence};
use crate::reward::{plausibility_head, token_reward};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub tau: f64,
    pub alpha: f64,
    pub repetition_penalty: f64,
    /// Only used by sampling.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_on_eos: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 0.3,
            repetition_penalty: 1.0,
            temperature: 1.0,
            max_new_tokens: 64,
            stop_on_eos: true,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau {} outside [0,1]", self.tau)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("alpha {} < 0", self.alpha)));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "repetition penalty {} < 1",
                self.repetition_penalty
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub head_size: usize,
    pub token: TokenId,
    pub reward: f64,
    pub user_log_prob: f64,
    pub base_log_prob: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace(pub Vec<TraceRecord>);

impl DecodeTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.0 {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<_>>>()
            .map(DecodeTrace)
    }
}

/// Lowers every token in `history` by `ln(penalty)` and renormalizes.
pub fn apply_repetition_penalty(
    lp: &LogProbVector,
    history: &[TokenId],
    penalty: f64,
) -> Result<LogProbVector> {
    if !(penalty >= 1.0) {
        return Err(Error::InvalidArgument(format!("repetition penalty {penalty} < 1")));
    }
    if penalty == 1.0 || history.is_empty() {
        return Ok(lp.clone());
    }
    let seen: BTreeSet<TokenId> = history.iter().copied().collect();
    let drop = penalty.ln();
    let mut v = lp.values().to_vec();
    for &t in &seen {
        if t < v.len() {
            v[t] -= drop;
        }
    }
    let lse = logsumexp(&v);
    v.iter_mut().for_each(|x| *x -= lse);
    Ok(LogProbVector::from_normalized(v))
}

/// True when candidate `a` beats `b`: higher key, then higher user
/// log-prob, then lower id.
fn better(a: (f64, f64, TokenId), b: (f64, f64, TokenId)) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1 != b.1 {
        return a.1 > b.1;
    }
    a.2 < b.2
}

/// Picks the head-set token with the largest implicit user reward.
pub fn cope_step(
    user_lp: &LogProbVector,
    base_lp: &LogProbVector,
    cfg: &DecodeConfig,
    history: &[TokenId],
) -> Result<(TokenId, TraceRecord)> {
    if user_lp.len() != base_lp.len() {
        return Err(Error::ShapeMismatch(format!(
            "user vocabulary {} vs base vocabulary {}",
            user_lp.len(),
            base_lp.len()
        )));
    }
    let user = apply_repetition_penalty(user_lp, history, cfg.repetition_penalty)?;
    let head = plausibility_head(&user, cfg.tau)?;
    let mut best: Option<(f64, f64, TokenId)> = None;
    for &t in &head.tokens {
        let cand = (token_reward(user.get(t), base_lp.get(t), cfg.alpha), user.get(t), t);
        if best.is_none_or(|b| better(cand, b)) {
            best = Some(cand);
        }
    }
    let (reward, user_log_prob, token) = best.expect("head set is never empty");
    Ok((
        token,
        TraceRecord {
            step: history.len(),
            head_size: head.len(),
            token,
            reward,
            user_log_prob,
            base_log_prob: base_lp.get(token),
        },
    ))
}

/// Contrastive decoding loop; fully deterministic.
pub fn cope_generate(
    user: &dyn LanguageModel,
    base: &dyn LanguageModel,
    prompt: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<(TokenSequence, DecodeTrace)> {
    cfg.validate()?;
    prompt.validate(user.vocab())?;
    let eos = user.vocab().eos();
    let mut context = prompt.ids().to_vec();
    let mut out = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let u = user.next_log_probs(&context);
        let b = base.next_log_probs(&context);
        let (tok, rec) = cope_step(&u, &b, cfg, &out)?;
        trace.push(rec);
        out.push(tok);
        context.push(tok);
        if cfg.stop_on_eos && tok == eos {
            break;
        }
    }
    Ok((TokenSequence(out), DecodeTrace(trace)))
}

/// Argmax decoding with the same penalty, tie-break and stopping rules.
pub fn greedy_generate(
    model: &dyn LanguageModel,
    prompt: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<TokenSequence> {
    cfg.validate()?;
    prompt.validate(model.vocab())?;
    let eos = model.vocab().eos();
    let mut context = prompt.ids().to_vec();
    let mut out = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let lp = apply_repetition_penalty(
            &model.next_log_probs(&context),
            &out,
            cfg.repetition_penalty,
        )?;
        let tok = lp.argmax();
        out.push(tok);
        context.push(tok);
        if cfg.stop_on_eos && tok == eos {
            break;
        }
    }
    Ok(TokenSequence(out))
}

/// Ancestral sampling from the temperature-scaled distribution.
pub fn sample_generate(
    model: &dyn LanguageModel,
    prompt: &TokenSequence,
    temperature: f64,
    seed: u64,
    cfg: &DecodeConfig,
) -> Result<TokenSequence> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    cfg.validate()?;
    prompt.validate(model.vocab())?;
    let eos = model.vocab().eos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut context = prompt.ids().to_vec();
    let mut out = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let lp = apply_repetition_penalty(
            &model.next_log_probs(&context),
            &out,
            cfg.repetition_penalty,
        )?;
        let tok = sample_token(&lp, temperature, &mut rng);
        out.push(tok);
        context.push(tok);
        if cfg.stop_on_eos && tok == eos {
            break;
        }
    }
    Ok(TokenSequence(out))
}

pub(crate) fn sample_token(lp: &LogProbVector, temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let max = lp.max();
    let weights: Vec<f64> = lp
        .values()
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => lp.argmax(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmcore::test_models::{letters, HashedModel};
    use crate::lmcore::Vocabulary;
    use proptest::prelude::*;

    fn lp(p: &[f64]) -> LogProbVector {
        LogProbVector::from_probs(p)
    }

    fn cfg(alpha: f64, tau: f64) -> DecodeConfig {
        DecodeConfig {
            tau,
            alpha,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn penalty_examples() {
        let v = lp(&[0.5, 0.5]);
        assert_eq!(apply_repetition_penalty(&v, &[0], 1.0).unwrap(), v);
        assert_eq!(apply_repetition_penalty(&v, &[], 7.0).unwrap(), v);
        let p = apply_repetition_penalty(&v, &[0, 0], std::f64::consts::E).unwrap();
        let want = (0.5 / std::f64::consts::E) / (0.5 / std::f64::consts::E + 0.5);
        assert!((p.get(0).exp() - want).abs() < 1e-12);
        assert!((p.get(0).exp() - 0.2689414213699951).abs() < 1e-12);
        assert!(apply_repetition_penalty(&v, &[0], 0.5).is_err());
    }

    #[test]
    fn cope_step_worked_example() {
        let u = lp(&[0.6, 0.3, 0.1]);
        let b = lp(&[0.6, 0.1, 0.3]);
        let (tok, rec) = cope_step(&u, &b, &cfg(1.0, 0.1), &[]).unwrap();
        assert_eq!(tok, 1);
        assert_eq!(rec.head_size, 3);
        assert!((rec.reward - 3f64.ln()).abs() < 1e-12);
        assert_eq!(cope_step(&u, &b, &cfg(0.0, 0.1), &[]).unwrap().0, 0);
        let (tok, rec) = cope_step(&u, &u, &cfg(1.0, 0.1), &[]).unwrap();
        assert_eq!((tok, rec.reward), (0, 0.0));
    }

    /// Table-driven model: a fixed distribution per context length.
    struct StepModel {
        vocab: Vocabulary,
        steps: Vec<Vec<f64>>,
    }

    impl LanguageModel for StepModel {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }
        fn next_log_probs(&self, context: &[TokenId]) -> LogProbVector {
            let i = (context.len() - 1).min(self.steps.len() - 1);
            lp(&self.steps[i])
        }
    }

    #[test]
    fn three_token_golden_sequence() {
        // vocab: bos eos pad unk a b c; the specials get tiny mass
        let vocab = letters(3);
        let e = 1e-4;
        let user = StepModel {
            vocab: vocab.clone(),
            steps: vec![
                vec![e, e, e, e, 0.5, 0.3, 0.2],
                vec![e, e, e, e, 0.2, 0.45, 0.35],
                vec![e, 0.4, e, e, 0.3, 0.2, 0.1],
            ],
        };
        let base = StepModel {
            vocab,
            steps: vec![
                vec![e, e, e, e, 0.7, 0.2, 0.1],
                vec![e, e, e, e, 0.1, 0.6, 0.3],
                vec![e, 0.5, e, e, 0.2, 0.2, 0.1],
            ],
        };
        let c = DecodeConfig {
            max_new_tokens: 3,
            ..cfg(1.0, 0.1)
        };
        // enumeration: step 0 rewards a=ln(.5/.7) b=ln(.3/.2) c=ln(.2/.1) → c
        // step 1: a=ln 2, b=ln .75, c=ln(35/30) → a
        // step 2 (base sums to 1.1): eos=ln(.4·1.1/.5), a=ln(.3·1.1/.2), b=c=ln 1.1 → a
        let (seq, trace) = cope_generate(&user, &base, &vec![0].into(), &c).unwrap();
        assert_eq!(seq.ids(), &[6, 4, 4]);
        assert_eq!(trace.0.len(), 3);
        let text = trace.to_jsonl();
        assert_eq!(DecodeTrace::from_jsonl(&text).unwrap(), trace);
    }

    #[test]
    fn greedy_cases() {
        let vocab = letters(3);
        let uniform = crate::lmcore::UniformModel::new(vocab.clone());
        let c = DecodeConfig {
            max_new_tokens: 5,
            ..DecodeConfig::default()
        };
        let seq = greedy_generate(&uniform, &vec![0].into(), &c).unwrap();
        assert_eq!(seq.ids(), &[0; 5]);
        let chain = StepModel {
            vocab,
            steps: vec![
                vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ],
        };
        let seq = greedy_generate(&chain, &vec![0].into(), &c).unwrap();
        assert_eq!(seq.ids(), &[5, 4, 1]);
    }

    #[test]
    fn cope_max_new_tokens_one() {
        let m = HashedModel { vocab: letters(6), seed: 1, sharpness: 2.0 };
        let b = HashedModel { vocab: letters(6), seed: 2, sharpness: 2.0 };
        let c = DecodeConfig { max_new_tokens: 1, ..cfg(0.5, 0.1) };
        let (seq, trace) = cope_generate(&m, &b, &vec![0].into(), &c).unwrap();
        assert_eq!(seq.len(), 1);
        let (tok, _) = cope_step(&m.next_log_probs(&[0]), &b.next_log_probs(&[0]), &c, &[]).unwrap();
        assert_eq!(seq.ids(), &[tok]);
        assert_eq!(trace.0.len(), 1);
    }

    #[test]
    fn sampling_determinism_and_low_temperature() {
        let m = HashedModel { vocab: letters(6), seed: 3, sharpness: 4.0 };
        let c = DecodeConfig { max_new_tokens: 20, stop_on_eos: false, ..DecodeConfig::default() };
        let p: TokenSequence = vec![0].into();
        let a = sample_generate(&m, &p, 1.0, 42, &c).unwrap();
        assert_eq!(a, sample_generate(&m, &p, 1.0, 42, &c).unwrap());
        let cold = sample_generate(&m, &p, 1e-3, 7, &c).unwrap();
        assert_eq!(cold, greedy_generate(&m, &p, &c).unwrap());
        assert!(sample_generate(&m, &p, 0.0, 1, &c).is_err());
    }

    #[test]
    fn sampling_matches_distribution() {
        let target = [0.7, 0.2, 0.1];
        let v = lp(&target);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_token(&v, 1.0, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(target) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn reductions_hold(seed in 0u64..300) {
            let user = HashedModel { vocab: letters(8), seed, sharpness: 3.0 };
            let base = HashedModel { vocab: letters(8), seed: seed + 1000, sharpness: 3.0 };
            let p: TokenSequence = vec![0, 5].into();
            let c0 = DecodeConfig { max_new_tokens: 12, ..cfg(0.0, 0.1) };
            let greedy = greedy_generate(&user, &p, &c0).unwrap();
            prop_assert_eq!(&cope_generate(&user, &base, &p, &c0).unwrap().0, &greedy);
            let c1 = DecodeConfig { max_new_tokens: 12, ..cfg(1.0, 0.1) };
            prop_assert_eq!(&cope_generate(&user, &user, &p, &c1).unwrap().0, &greedy);
        }

        #[test]
        fn chosen_in_head_and_shift_invariant(
            probs_u in prop::collection::vec(0.001f64..1.0, 3..25),
            shift in -5.0f64..5.0,
            alpha in 0.0f64..2.0,
            tau in 0.0f64..=1.0,
        ) {
            let n = probs_u.len();
            let u = lp(&probs_u);
            let base_vals: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64 + 1.0).ln()).collect();
            let b = LogProbVector::from_logits(&base_vals);
            let c = cfg(alpha, tau);
            let (tok, _) = cope_step(&u, &b, &c, &[]).unwrap();
            prop_assert!(plausibility_head(&u, tau).unwrap().contains(tok));
            // shift applied to raw values; only the argmax is compared
            let shifted: Vec<f64> = b.values().iter().map(|v| v + shift).collect();
            let bs = LogProbVector::from_raw(shifted);
            let (tok2, _) = cope_step(&u, &bs, &c, &[]).unwrap();
            prop_assert_eq!(tok, tok2);
        }

        #[test]
        fn alpha_lowers_relative_reward_of_base_favoured_tokens(
            ui in -10.0f64..0.0, uj in -10.0f64..0.0,
            bi in -10.0f64..0.0, bj in -10.0f64..0.0,
            a1 in 0.0f64..2.0, da in 0.0f64..2.0,
        ) {
            // token i has the larger base probability
            let (bi, bj) = if bi >= bj { (bi, bj) } else { (bj, bi) };
            let gap = |a: f64| token_reward(ui, bi, a) - token_reward(uj, bj, a);
            prop_assert!(gap(a1 + da) <= gap(a1) + 1e-12);
        }
    }
}
