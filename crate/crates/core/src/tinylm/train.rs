use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lmcore::{TokenId, TokenSequence, LOG_PROB_FLOOR};

use super::network::{backward, forward_cached, window_ids};
use super::params::{AdapterDelta, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    AdapterOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "warm-up ratio must lie in [0,1] and weight decay must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One supervised pair: the target is scored given the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: TokenSequence,
    pub target: TokenSequence,
}

/// Read-only view of the trainable parameters.
#[derive(Debug, Clone, Copy)]
pub enum ParamView<'a> {
    Full(&'a ModelParams),
    Adapter {
        base: &'a ModelParams,
        adapter: &'a AdapterDelta,
    },
}

impl<'a> ParamView<'a> {
    pub fn mode(&self) -> TrainMode {
        match self {
            ParamView::Full(_) => TrainMode::Full,
            ParamView::Adapter { .. } => TrainMode::AdapterOnly,
        }
    }

    pub fn effective(&self) -> Cow<'a, ModelParams> {
        match *self {
            ParamView::Full(p) => Cow::Borrowed(p),
            ParamView::Adapter { base, adapter } => Cow::Owned(adapter.merged(base)),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        match self {
            ParamView::Full(p) => p.flat(),
            ParamView::Adapter { adapter, .. } => adapter.flat(),
        }
    }
}

/// The parameters an optimizer may write to. In adapter mode the base is
/// only borrowed immutably.
#[derive(Debug)]
pub enum Trainee<'a> {
    Full(&'a mut ModelParams),
    Adapter {
        base: &'a ModelParams,
        adapter: &'a mut AdapterDelta,
    },
}

impl Trainee<'_> {
    pub fn view(&self) -> ParamView<'_> {
        match self {
            Trainee::Full(p) => ParamView::Full(p),
            Trainee::Adapter { base, adapter } => ParamView::Adapter { base, adapter },
        }
    }

    pub fn mode(&self) -> TrainMode {
        self.view().mode()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        match self {
            Trainee::Full(p) => p.set_flat(flat),
            Trainee::Adapter { adapter, .. } => adapter.set_flat(flat),
        }
    }

    /// Shrinks every trainable parameter by the fraction `decay`, then takes
    /// a plain gradient step.
    pub fn apply_update(&mut self, grad: &[f64], lr: f64, decay: f64) {
        let mut flat = self.view().flat();
        for (p, g) in flat.iter_mut().zip(grad) {
            *p -= decay * *p;
            *p -= lr * g;
        }
        self.set_flat(&flat);
    }
}

/// A sequence whose floored log-probability enters an objective with `weight`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSeq<'a> {
    pub prompt: &'a TokenSequence,
    pub target: &'a TokenSequence,
    pub weight: f64,
}

/// Floored per-sequence log-probability under already-merged weights.
pub fn seq_log_prob(
    eff: &ModelParams,
    prompt: &TokenSequence,
    target: &TokenSequence,
    pad: TokenId,
) -> f64 {
    let mut ctx = prompt.ids().to_vec();
    let mut total = 0.0;
    for &t in target.ids() {
        let ids = window_ids(&ctx, eff.dims.window, pad);
        let logits = forward_cached(eff, &ids).logits;
        let lse = crate::lmcore::logsumexp(&logits);
        total += (logits[t] - lse).max(LOG_PROB_FLOOR);
        ctx.push(t);
    }
    total
}

/// Value and gradient of `Σ_s w_s · log p(target_s | prompt_s)` w.r.t. the
/// trainable parameters of `view`, flattened in the view's order.
pub fn weighted_log_prob_grad(
    view: ParamView<'_>,
    seqs: &[WeightedSeq<'_>],
    pad: TokenId,
) -> (f64, Vec<f64>) {
    let eff = view.effective();
    let dims = eff.dims;
    let full = view.mode() == TrainMode::Full;
    let mut grads = ModelParams::zeros(dims);
    let mut value = 0.0;
    let mut dlogits = vec![0.0; dims.vocab_size];
    for s in seqs {
        let mut ctx = s.prompt.ids().to_vec();
        for &t in s.target.ids() {
            let ids = window_ids(&ctx, dims.window, pad);
            let act = forward_cached(&eff, &ids);
            let lse = crate::lmcore::logsumexp(&act.logits);
            let lp = act.logits[t] - lse;
            ctx.push(t);
            if lp < LOG_PROB_FLOOR {
                value += s.weight * LOG_PROB_FLOOR;
                continue;
            }
            value += s.weight * lp;
            if s.weight == 0.0 {
                continue;
            }
            for (d, &l) in dlogits.iter_mut().zip(&act.logits) {
                *d = -s.weight * (l - lse).exp();
            }
            dlogits[t] += s.weight;
            backward(&eff, &act, &ids, &dlogits, &mut grads, full);
        }
    }
    let grad = match view {
        ParamView::Full(_) => grads.flat(),
        ParamView::Adapter { adapter, .. } => {
            let (dha, dhb) = adapter.hidden.project_grad(adapter.scale, &grads.w_hidden);
            let (doa, dob) = adapter.out.project_grad(adapter.scale, &grads.w_out);
            [dha, dhb, doa, dob].concat()
        }
    };
    (value, grad)
}

fn token_count(batch: &[Example]) -> usize {
    batch.iter().map(|e| e.target.len()).sum()
}

/// Mean per-token negative log-likelihood of the targets.
pub fn sft_loss(view: ParamView<'_>, batch: &[Example], pad: TokenId) -> f64 {
    let eff = view.effective();
    let n = token_count(batch).max(1) as f64;
    -batch
        .iter()
        .map(|e| seq_log_prob(&eff, &e.prompt, &e.target, pad))
        .sum::<f64>()
        / n
}

pub fn sft_loss_grad(view: ParamView<'_>, batch: &[Example], pad: TokenId) -> (f64, Vec<f64>) {
    let w = -1.0 / token_count(batch).max(1) as f64;
    let seqs: Vec<WeightedSeq> = batch
        .iter()
        .map(|e| WeightedSeq {
            prompt: &e.prompt,
            target: &e.target,
            weight: w,
        })
        .collect();
    weighted_log_prob_grad(view, &seqs, pad)
}

/// One SGD update on `batch` at `cfg.learning_rate`; returns the pre-update loss.
pub fn sft_step(
    trainee: &mut Trainee<'_>,
    batch: &[Example],
    cfg: &TrainConfig,
    pad: TokenId,
) -> Result<f64> {
    let sched = LrSchedule::new(cfg.learning_rate, 1, 0.0);
    sft_step_at(trainee, batch, cfg, &sched, 0, pad)
}

fn sft_step_at(
    trainee: &mut Trainee<'_>,
    batch: &[Example],
    cfg: &TrainConfig,
    sched: &LrSchedule,
    step: usize,
    pad: TokenId,
) -> Result<f64> {
    if batch.is_empty() || token_count(batch) == 0 {
        return Err(Error::EmptySequence("training batch"));
    }
    if trainee.mode() != cfg.mode {
        return Err(Error::InvalidArgument(format!(
            "config mode {:?} does not match trainee {:?}",
            cfg.mode,
            trainee.mode()
        )));
    }
    let (loss, grad) = sft_loss_grad(trainee.view(), batch, pad);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { step, loss });
    }
    trainee.apply_update(&grad, sched.at(step), sched.decay_at(step, cfg.weight_decay));
    Ok(loss)
}

/// Linear warm-up to the peak rate, then linear decay towards zero.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_ratio).ceil() as usize;
        Self {
            peak,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    /// Decoupled weight decay for `step`: the coefficient normalized by the
    /// square root of the run length and scaled by the schedule multiplier,
    /// so the total shrinkage of a run does not grow with its step count.
    pub fn decay_at(&self, step: usize, weight_decay: f64) -> f64 {
        if self.peak == 0.0 {
            return 0.0;
        }
        (self.at(step) / self.peak) * weight_decay / (self.total_steps.max(1) as f64).sqrt()
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            let rest = (self.total_steps - self.warmup_steps).max(1) as f64;
            self.peak * (self.total_steps - step) as f64 / rest
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full-dataset loss before training, then after each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn train_sft(
    trainee: &mut Trainee<'_>,
    dataset: &[Example],
    cfg: &TrainConfig,
    pad: TokenId,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySequence("training dataset"));
    }
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(cfg.learning_rate, per_epoch * cfg.epochs, cfg.warmup_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = vec![sft_loss(trainee.view(), dataset, pad)];
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(dataset.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<Example> = idx.iter().map(|&i| dataset[i].clone()).collect();
            sft_step_at(trainee, &batch, cfg, &sched, step, pad)?;
            step += 1;
        }
        epoch_losses.push(sft_loss(trainee.view(), dataset, pad));
    }
    log::debug!("sft finished after {step} steps, losses {epoch_losses:?}");
    Ok(TrainReport {
        epoch_losses,
        steps: step,
    })
}
