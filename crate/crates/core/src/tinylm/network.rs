use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lmcore::{LanguageModel, LogProbVector, TokenId, Vocabulary};

use super::params::{AdapterDelta, ModelParams};

/// Last `window` tokens of `context`, left-filled with `pad`.
pub fn window_ids(context: &[TokenId], window: usize, pad: TokenId) -> Vec<TokenId> {
    let take = context.len().min(window);
    let mut ids = vec![pad; window - take];
    ids.extend_from_slice(&context[context.len() - take..]);
    ids
}

pub(crate) struct Activations {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn forward_cached(p: &ModelParams, ids: &[TokenId]) -> Activations {
    let d = p.dims;
    let mut x = Vec::with_capacity(d.input_dim());
    for &id in ids {
        x.extend_from_slice(&p.embedding[id * d.embed_dim..(id + 1) * d.embed_dim]);
    }
    let mut h = p.b_hidden.clone();
    for (j, hj) in h.iter_mut().enumerate() {
        let row = &p.w_hidden[j * d.input_dim()..(j + 1) * d.input_dim()];
        *hj += row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>();
        *hj = hj.tanh();
    }
    let mut logits = p.b_out.clone();
    for (v, lv) in logits.iter_mut().enumerate() {
        let row = &p.w_out[v * d.hidden_dim..(v + 1) * d.hidden_dim];
        *lv += row.iter().zip(&h).map(|(w, hj)| w * hj).sum::<f64>();
    }
    Activations { x, h, logits }
}

/// Accumulates parameter gradients given `dlogits`; embeddings only when asked.
pub(crate) fn backward(
    p: &ModelParams,
    act: &Activations,
    ids: &[TokenId],
    dlogits: &[f64],
    grads: &mut ModelParams,
    embeddings: bool,
) {
    let d = p.dims;
    let mut dh = vec![0.0; d.hidden_dim];
    for (v, &g) in dlogits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grads.b_out[v] += g;
        let row = &p.w_out[v * d.hidden_dim..(v + 1) * d.hidden_dim];
        let grow = &mut grads.w_out[v * d.hidden_dim..(v + 1) * d.hidden_dim];
        for j in 0..d.hidden_dim {
            grow[j] += g * act.h[j];
            dh[j] += g * row[j];
        }
    }
    let mut dx = if embeddings {
        vec![0.0; d.input_dim()]
    } else {
        Vec::new()
    };
    for j in 0..d.hidden_dim {
        let dpre = dh[j] * (1.0 - act.h[j] * act.h[j]);
        if dpre == 0.0 {
            continue;
        }
        grads.b_hidden[j] += dpre;
        let grow = &mut grads.w_hidden[j * d.input_dim()..(j + 1) * d.input_dim()];
        for (gw, &xi) in grow.iter_mut().zip(&act.x) {
            *gw += dpre * xi;
        }
        if embeddings {
            let row = &p.w_hidden[j * d.input_dim()..(j + 1) * d.input_dim()];
            for (dxi, &w) in dx.iter_mut().zip(row) {
                *dxi += dpre * w;
            }
        }
    }
    if embeddings {
        for (pos, &id) in ids.iter().enumerate() {
            let src = &dx[pos * d.embed_dim..(pos + 1) * d.embed_dim];
            let dst = &mut grads.embedding[id * d.embed_dim..(id + 1) * d.embed_dim];
            for (g, s) in dst.iter_mut().zip(src) {
                *g += s;
            }
        }
    }
}

/// Next-token distribution of the base model, optionally with an adapter folded in.
pub fn forward(
    params: &ModelParams,
    adapter: Option<&AdapterDelta>,
    context: &[TokenId],
    pad: TokenId,
) -> Result<LogProbVector> {
    params.validate()?;
    if let Some(&bad) = context.iter().find(|&&t| t >= params.dims.vocab_size) {
        return Err(Error::ShapeMismatch(format!(
            "context token {bad} outside vocabulary of {}",
            params.dims.vocab_size
        )));
    }
    let ids = window_ids(context, params.dims.window, pad);
    let logits = match adapter {
        None => forward_cached(params, &ids).logits,
        Some(ad) => {
            ad.check_dims(params.dims)?;
            forward_cached(&ad.merged(params), &ids).logits
        }
    };
    Ok(LogProbVector::from_logits(&logits))
}

/// Inference handle: base weights with an optional adapter merged once up front.
#[derive(Debug, Clone)]
pub struct TinyLm {
    vocab: Arc<Vocabulary>,
    effective: ModelParams,
}

impl TinyLm {
    pub fn new(
        vocab: Arc<Vocabulary>,
        base: &ModelParams,
        adapter: Option<&AdapterDelta>,
    ) -> Result<Self> {
        base.validate()?;
        if base.dims.vocab_size != vocab.len() {
            return Err(Error::ShapeMismatch(format!(
                "model vocabulary {} vs vocabulary file {}",
                base.dims.vocab_size,
                vocab.len()
            )));
        }
        let effective = match adapter {
            None => base.clone(),
            Some(ad) => {
                ad.check_dims(base.dims)?;
                ad.merged(base)
            }
        };
        Ok(Self { vocab, effective })
    }

    pub fn effective_params(&self) -> &ModelParams {
        &self.effective
    }

    pub fn vocab_arc(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }
}

impl LanguageModel for TinyLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, context: &[TokenId]) -> LogProbVector {
        let ids = window_ids(context, self.effective.dims.window, self.vocab.pad());
        LogProbVector::from_logits(&forward_cached(&self.effective, &ids).logits)
    }
}

#[cfg(test)]
mod tests {
    use super::super::params::{Dims, LowRank};
    use super::*;

    fn dims() -> Dims {
        Dims::new(Vocabulary::char_default().len(), 4, 3, 6)
    }

    #[test]
    fn window_padding() {
        assert_eq!(window_ids(&[5, 6], 4, 2), vec![2, 2, 5, 6]);
        assert_eq!(window_ids(&[1, 2, 3, 4, 5], 3, 0), vec![3, 4, 5]);
        assert_eq!(window_ids(&[], 2, 9), vec![9, 9]);
    }

    #[test]
    fn zero_params_uniform() {
        let p = ModelParams::zeros(dims());
        let lp = forward(&p, None, &[0, 40, 41], 2).unwrap();
        let want = -(dims().vocab_size as f64).ln();
        assert!(lp.values().iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn zero_adapter_is_bit_identical() {
        let p = ModelParams::init(dims(), 11);
        // B random, A zero
        let ad = AdapterDelta::init(dims(), 2, 1.0, 5).unwrap();
        let mut ad2 = AdapterDelta::zeros(dims(), 2, 1.0).unwrap();
        ad2.hidden.a.iter_mut().for_each(|a| *a = 0.3);
        ad2.out.a.iter_mut().for_each(|a| *a = -0.2);
        for ctx in [&[0usize, 50, 60][..], &[], &[7; 9]] {
            let plain = forward(&p, None, ctx, 2).unwrap();
            assert_eq!(plain, forward(&p, Some(&ad), ctx, 2).unwrap());
            assert_eq!(plain, forward(&p, Some(&ad2), ctx, 2).unwrap());
        }
    }

    #[test]
    fn random_params_normalize() {
        for seed in 0..5 {
            let p = ModelParams::init(dims(), seed);
            let mut ad = AdapterDelta::init(dims(), 2, 2.0, seed + 100).unwrap();
            ad.hidden.a.iter_mut().enumerate().for_each(|(i, a)| *a = (i as f64).sin());
            let lp = forward(&p, Some(&ad), &[0, 44, 45, 46, 47], 2).unwrap();
            assert!(lp.is_normalized(1e-6));
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = ModelParams::init(dims(), 1);
        let mut bad = p.clone();
        bad.b_out.pop();
        assert!(matches!(forward(&bad, None, &[], 2), Err(Error::ShapeMismatch(_))));
        let mut ad = AdapterDelta::zeros(dims(), 2, 1.0).unwrap();
        ad.out = LowRank::zeros(3, 3, 2);
        assert!(forward(&p, Some(&ad), &[], 2).is_err());
        assert!(forward(&p, None, &[100_000], 2).is_err());
    }

    #[test]
    fn handle_matches_free_forward() {
        let v = Arc::new(Vocabulary::char_default());
        let p = ModelParams::init(dims(), 2);
        let mut ad = AdapterDelta::init(dims(), 2, 1.0, 3).unwrap();
        ad.out.a.iter_mut().for_each(|a| *a = 0.1);
        let m = TinyLm::new(v, &p, Some(&ad)).unwrap();
        let ctx = [0usize, 60, 61];
        assert_eq!(m.next_log_probs(&ctx), forward(&p, Some(&ad), &ctx, 2).unwrap());
    }
}
