//! Implicit user reward and plausibility gating.
//!
//! The reward of a token is `log π_user(t) − α · log π_base(t)`, evaluated
//! only on tokens the user model finds plausible: those with probability at
//! least `τ` times the user model's maximum. Everything is in log space.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::exec;
use crate::lmcore::{token_log_probs, LanguageModel, LogProbVector, TokenId, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub alpha: f64,
    pub tau: f64,
    pub length_normalize: bool,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("tau must lie in [0,1], got {tau}")))
    }
}

/// Tokens admitted at one decoding step, in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet {
    pub tokens: Vec<TokenId>,
    /// `ln τ + max log π_user`; `-inf` when τ = 0.
    pub log_threshold: f64,
}

impl HeadSet {
    pub fn contains(&self, t: TokenId) -> bool {
        self.tokens.binary_search(&t).is_ok()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Slack on the head threshold so tokens exactly at `τ · max` survive rounding.
pub const HEAD_EPS: f64 = 1e-12;

/// `{t : log π_user(t) ≥ ln τ + max_w log π_user(w)}`.
pub fn plausibility_head(user_lp: &LogProbVector, tau: f64) -> Result<HeadSet> {
    check_tau(tau)?;
    let log_threshold = tau.ln() + user_lp.max();
    let tokens = user_lp
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= log_threshold - HEAD_EPS)
        .map(|(i, _)| i)
        .collect();
    Ok(HeadSet {
        tokens,
        log_threshold,
    })
}

#[inline]
pub fn token_reward(user_lp: f64, base_lp: f64, alpha: f64) -> f64 {
    user_lp - alpha * base_lp
}

/// Summed (or per-token mean) reward of `y`, both models conditioned on
/// `prompt ⊕ y_<t`.
pub fn sequence_reward(
    user: &dyn LanguageModel,
    base: &dyn LanguageModel,
    prompt: &TokenSequence,
    y: &TokenSequence,
    cfg: &RewardConfig,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptySequence("reward target"));
    }
    let u = token_log_probs(user, prompt, y);
    let b = token_log_probs(base, prompt, y);
    let total: f64 = u
        .iter()
        .zip(&b)
        .map(|(&u, &b)| token_reward(u, b, cfg.alpha))
        .sum();
    Ok(if cfg.length_normalize {
        total / y.len() as f64
    } else {
        total
    })
}

/// One user's model and the (prompt, response) samples it is scored on.
pub struct UserSamples<'a> {
    pub user_id: String,
    pub model: &'a dyn LanguageModel,
    pub samples: Vec<(TokenSequence, TokenSequence)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationRow {
    pub user_id: String,
    pub score_own: f64,
    pub score_others_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    pub rows: Vec<SeparationRow>,
    pub global_own: f64,
    pub global_others: f64,
}

impl SeparationReport {
    pub fn users_separated(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.score_own > r.score_others_mean)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("user_id,score_own,score_others_mean\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.user_id, r.score_own, r.score_others_mean);
        }
        out
    }
}

/// Mean length-normalized α=1 reward of each user's samples under their own
/// model versus under every other user's model, all against `base`.
pub fn reward_separation_report(
    users: &[UserSamples<'_>],
    base: &dyn LanguageModel,
) -> Result<SeparationReport> {
    if users.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "reward separation needs at least 2 users, got {}",
            users.len()
        )));
    }
    if let Some(u) = users.iter().find(|u| u.samples.is_empty()) {
        return Err(Error::InvalidArgument(format!("user {} has no samples", u.user_id)));
    }
    let cfg = RewardConfig {
        alpha: 1.0,
        tau: 0.0,
        length_normalize: true,
    };
    let n = users.len();
    // matrix[data_user * n + model_user]
    let matrix: Vec<Result<f64>> = exec::par_map_range(n * n, |k| {
        let (data, model) = (k / n, k % n);
        let samples = &users[data].samples;
        let mut total = 0.0;
        for (prompt, y) in samples {
            total += sequence_reward(users[model].model, base, prompt, y, &cfg)?;
        }
        Ok(total / samples.len() as f64)
    });
    let matrix: Vec<f64> = matrix.into_iter().collect::<Result<_>>()?;
    let rows: Vec<SeparationRow> = users
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let others: f64 = (0..n).filter(|&j| j != i).map(|j| matrix[i * n + j]).sum();
            SeparationRow {
                user_id: u.user_id.clone(),
                score_own: matrix[i * n + i],
                score_others_mean: others / (n - 1) as f64,
            }
        })
        .collect();
    let global_own = rows.iter().map(|r| r.score_own).sum::<f64>() / n as f64;
    let global_others = rows.iter().map(|r| r.score_others_mean).sum::<f64>() / n as f64;
    Ok(SeparationReport {
        rows,
        global_own,
        global_others,
    })
}
