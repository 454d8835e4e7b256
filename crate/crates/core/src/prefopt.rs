//! Synthetic negatives, preference datasets and DPO on adapters.
//!
//! Negatives come from sampling `K` candidates and keeping the one with the
//! lowest summed implicit reward (α = 1). DPO then fine-tunes the user
//! adapter on (prompt, gold, negative) triples against a frozen reference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{sample_generate, DecodeConfig};
use crate::error::{Error, Result};
use crate::lmcore::{sequence_log_prob, LanguageModel, TokenId, TokenSequence};
use crate::reward::{sequence_reward, RewardConfig};
use crate::tinylm::{
    epoch_batches, seq_log_prob, weighted_log_prob_grad, AdapterDelta, LrSchedule, ModelParams,
    ParamView, Trainee, WeightedSeq,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceTriple {
    pub prompt: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceModel {
    /// The policy as it stood when DPO started.
    OppuSnapshot,
    Tam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub reference: ReferenceModel,
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("DPO learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("DPO batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerChoice {
    /// Sample candidates from the non-personalized model.
    Base,
    User,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSynthesisConfig {
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub sampler: SamplerChoice,
}

impl Default for NegativeSynthesisConfig {
    fn default() -> Self {
        Self {
            k: 3,
            temperature: 1.0,
            seed: 0,
            max_new_tokens: 64,
            sampler: SamplerChoice::Base,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeChoice {
    pub chosen: usize,
    pub candidates: Vec<TokenSequence>,
    /// Summed α=1 rewards; `+inf` for empty candidates.
    pub scores: Vec<f64>,
}

impl NegativeChoice {
    pub fn negative(&self) -> &TokenSequence {
        &self.candidates[self.chosen]
    }
}

/// Seed of the `k`-th candidate stream.
pub fn candidate_seed(seed: u64, k: usize) -> u64 {
    let mut z = seed ^ (k as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Index of the smallest score; the earliest index wins ties.
pub fn argmin_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Best-of-K search for the lowest implicit user reward response.
pub fn synthesize_negative(
    base: &dyn LanguageModel,
    user: &dyn LanguageModel,
    prompt: &TokenSequence,
    cfg: &NegativeSynthesisConfig,
) -> Result<NegativeChoice> {
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let sampler = match cfg.sampler {
        SamplerChoice::Base => base,
        SamplerChoice::User => user,
    };
    let dcfg = DecodeConfig {
        max_new_tokens: cfg.max_new_tokens,
        repetition_penalty: 1.0,
        temperature: cfg.temperature,
        ..DecodeConfig::default()
    };
    let scorer = RewardConfig {
        alpha: 1.0,
        tau: 0.0,
        length_normalize: false,
    };
    let mut candidates = Vec::with_capacity(cfg.k);
    let mut scores = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let cand = sample_generate(sampler, prompt, cfg.temperature, candidate_seed(cfg.seed, k), &dcfg)?;
        let score = if cand.is_empty() {
            f64::INFINITY
        } else {
            sequence_reward(user, base, prompt, &cand, &scorer)?
        };
        candidates.push(cand);
        scores.push(score);
    }
    if candidates.iter().all(TokenSequence::is_empty) {
        return Err(Error::EmptySequence("all negative candidates"));
    }
    let chosen = argmin_first(&scores).expect("k >= 1");
    Ok(NegativeChoice {
        chosen,
        candidates,
        scores,
    })
}

/// One triple per history pair; pairs whose negative equals the gold response are dropped.
pub fn build_preference_dataset(
    history: &[(TokenSequence, TokenSequence)],
    negatives: &BTreeMap<usize, TokenSequence>,
) -> Result<Vec<PreferenceTriple>> {
    let mut out = Vec::with_capacity(history.len());
    for (i, (x, y)) in history.iter().enumerate() {
        let neg = negatives.get(&i).ok_or(Error::MissingNegative(i))?;
        if neg == y {
            log::warn!("dropping preference pair {i}: negative equals the gold response");
            continue;
        }
        if y.is_empty() || neg.is_empty() {
            log::warn!("dropping preference pair {i}: empty response");
            continue;
        }
        out.push(PreferenceTriple {
            prompt: x.clone(),
            chosen: y.clone(),
            rejected: neg.clone(),
        });
    }
    Ok(out)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(β·margin)`.
pub fn dpo_loss_from_margin(beta: f64, margin: f64) -> f64 {
    softplus(-beta * margin)
}

/// Chosen log-ratio minus rejected log-ratio.
pub fn dpo_margin(
    policy: &dyn LanguageModel,
    reference: &dyn LanguageModel,
    triple: &PreferenceTriple,
) -> Result<f64> {
    let pos = sequence_log_prob(policy, &triple.prompt, &triple.chosen)?
        - sequence_log_prob(reference, &triple.prompt, &triple.chosen)?;
    let neg = sequence_log_prob(policy, &triple.prompt, &triple.rejected)?
        - sequence_log_prob(reference, &triple.prompt, &triple.rejected)?;
    Ok(pos - neg)
}

pub fn dpo_loss(
    policy: &dyn LanguageModel,
    reference: &dyn LanguageModel,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    Ok(dpo_loss_from_margin(beta, dpo_margin(policy, reference, triple)?))
}

/// Reference log-probabilities (chosen, rejected) for each triple.
pub fn reference_log_probs(
    reference: &dyn LanguageModel,
    triples: &[PreferenceTriple],
) -> Result<Vec<(f64, f64)>> {
    triples
        .iter()
        .map(|t| {
            Ok((
                sequence_log_prob(reference, &t.prompt, &t.chosen)?,
                sequence_log_prob(reference, &t.prompt, &t.rejected)?,
            ))
        })
        .collect()
}

fn policy_margins(
    view: ParamView<'_>,
    ref_lp: &[(f64, f64)],
    triples: &[PreferenceTriple],
    pad: TokenId,
) -> Vec<f64> {
    let eff = view.effective();
    triples
        .iter()
        .zip(ref_lp)
        .map(|(t, (rp, rn))| {
            (seq_log_prob(&eff, &t.prompt, &t.chosen, pad) - rp)
                - (seq_log_prob(&eff, &t.prompt, &t.rejected, pad) - rn)
        })
        .collect()
}

/// Mean DPO loss over `triples`.
pub fn dpo_objective(
    view: ParamView<'_>,
    ref_lp: &[(f64, f64)],
    triples: &[PreferenceTriple],
    beta: f64,
    pad: TokenId,
) -> f64 {
    let m = policy_margins(view, ref_lp, triples, pad);
    m.iter().map(|&x| dpo_loss_from_margin(beta, x)).sum::<f64>() / m.len().max(1) as f64
}

/// Mean DPO loss and its gradient w.r.t. the trainable parameters of `view`.
pub fn dpo_loss_grad(
    view: ParamView<'_>,
    ref_lp: &[(f64, f64)],
    triples: &[PreferenceTriple],
    beta: f64,
    pad: TokenId,
) -> (f64, Vec<f64>) {
    let margins = policy_margins(view, ref_lp, triples, pad);
    let n = triples.len().max(1) as f64;
    let loss = margins.iter().map(|&m| dpo_loss_from_margin(beta, m)).sum::<f64>() / n;
    let mut seqs = Vec::with_capacity(2 * triples.len());
    for (t, &m) in triples.iter().zip(&margins) {
        // d softplus(−βm)/dm = −β σ(−βm)
        let coef = beta * sigmoid(-beta * m) / n;
        seqs.push(WeightedSeq {
            prompt: &t.prompt,
            target: &t.chosen,
            weight: -coef,
        });
        seqs.push(WeightedSeq {
            prompt: &t.prompt,
            target: &t.rejected,
            weight: coef,
        });
    }
    let (_, grad) = weighted_log_prob_grad(view, &seqs, pad);
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoReport {
    /// Mean β·r_dpo over the dataset before and after training.
    pub margin_before: f64,
    pub margin_after: f64,
    pub step_losses: Vec<f64>,
}

/// Adapter-only DPO against a frozen reference; deterministic per seed.
pub fn train_dpo(
    base: &ModelParams,
    adapter: &mut AdapterDelta,
    reference: &dyn LanguageModel,
    dataset: &[PreferenceTriple],
    cfg: &DpoConfig,
    pad: TokenId,
) -> Result<DpoReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySequence("preference dataset"));
    }
    let ref_lp = reference_log_probs(reference, dataset)?;
    let mean_margin = |ad: &AdapterDelta| {
        let m = policy_margins(ParamView::Adapter { base, adapter: ad }, &ref_lp, dataset, pad);
        cfg.beta * m.iter().sum::<f64>() / m.len() as f64
    };
    let margin_before = mean_margin(adapter);
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(cfg.learning_rate, per_epoch * cfg.epochs, cfg.warmup_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step_losses = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(dataset.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<PreferenceTriple> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let batch_ref: Vec<(f64, f64)> = idx.iter().map(|&i| ref_lp[i]).collect();
            let mut trainee = Trainee::Adapter {
                base,
                adapter: &mut *adapter,
            };
            let (loss, grad) = dpo_loss_grad(trainee.view(), &batch_ref, &batch, cfg.beta, pad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            trainee.apply_update(&grad, sched.at(step), sched.decay_at(step, cfg.weight_decay));
            step_losses.push(loss);
            step += 1;
        }
    }
    Ok(DpoReport {
        margin_before,
        margin_after: mean_margin(adapter),
        step_losses,
    })
}

/// One line of the preference dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub user_id: String,
    pub input: String,
    pub chosen: String,
    pub rejected: String,
    pub prompt_ids: TokenSequence,
    pub chosen_ids: TokenSequence,
    pub rejected_ids: TokenSequence,
    pub candidates: Vec<String>,
    pub candidate_ids: Vec<TokenSequence>,
    pub candidate_scores: Vec<f64>,
    pub chosen_index: usize,
}

impl PreferenceRecord {
    pub fn triple(&self) -> PreferenceTriple {
        PreferenceTriple {
            prompt: self.prompt_ids.clone(),
            chosen: self.chosen_ids.clone(),
            rejected: self.rejected_ids.clone(),
        }
    }
}

pub fn write_preference_jsonl(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_preference_jsonl(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
