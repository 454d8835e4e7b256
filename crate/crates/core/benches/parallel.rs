//! Rayon versus sequential execution of the pipeline's embarrassingly
//! parallel loops: per-prompt decoding, per-instance scoring and the
//! user-by-user reward matrix.
//!
//! Built without the `parallel` feature, `par_map` is itself sequential and
//! both variants should time the same.

use std::hint::black_box;
use std::sync::Arc;

use cope_core::corpus::corpus_vocabulary;
use cope_core::decode::{cope_generate, DecodeConfig};
use cope_core::exec::{par_map, par_map_range, seq_map};
use cope_core::metrics::perplexity;
use cope_core::reward::{sequence_reward, RewardConfig};
use cope_core::tinylm::{AdapterDelta, Dims, ModelParams, TinyLm};
use cope_core::{TokenSequence, Vocabulary};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    vocab: Arc<Vocabulary>,
    base: TinyLm,
    users: Vec<TinyLm>,
    prompts: Vec<TokenSequence>,
    responses: Vec<TokenSequence>,
}

fn fixture() -> Fixture {
    let vocab = Arc::new(corpus_vocabulary());
    let dims = Dims::new(vocab.len(), 8, 16, 64);
    let params = ModelParams::init(dims, 1);
    let base = TinyLm::new(vocab.clone(), &params, None).unwrap();
    let users = (0..10)
        .map(|u| {
            // Perturb A too, otherwise the delta A·B starts at zero.
            let mut ad = AdapterDelta::init(dims, 4, 1.0, u).unwrap();
            let mut flat = ad.flat();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + u);
            flat.iter_mut().for_each(|x| *x += rng.gen_range(-0.2..0.2));
            ad.set_flat(&flat);
            TinyLm::new(vocab.clone(), &params, Some(&ad)).unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seq = |len: usize| TokenSequence::new((0..len).map(|_| rng.gen_range(4..vocab.len())).collect());
    let prompts = (0..32).map(|_| seq(3)).collect();
    let responses = (0..32).map(|_| seq(12)).collect();
    Fixture {
        vocab,
        base,
        users,
        prompts,
        responses,
    }
}

fn bench_decode(c: &mut Criterion, f: &Fixture) {
    let cfg = DecodeConfig {
        max_new_tokens: 16,
        stop_on_eos: false,
        ..DecodeConfig::default()
    };
    let one = |p: &TokenSequence| cope_generate(&f.users[0], &f.base, p, &cfg).unwrap().0;
    let mut g = c.benchmark_group("decode_32_prompts");
    g.bench_function("rayon", |b| b.iter(|| black_box(par_map(&f.prompts, one))));
    g.bench_function("sequential", |b| b.iter(|| black_box(seq_map(&f.prompts, one))));
    g.finish();
}

fn bench_eval(c: &mut Criterion, f: &Fixture) {
    let pairs: Vec<(&TokenSequence, &TokenSequence)> = f.prompts.iter().zip(&f.responses).collect();
    let rcfg = RewardConfig {
        alpha: 1.0,
        tau: 0.0,
        length_normalize: true,
    };
    let score = |(p, y): &(&TokenSequence, &TokenSequence)| {
        (
            perplexity(&f.base, p, y).unwrap(),
            sequence_reward(&f.users[0], &f.base, p, y, &rcfg).unwrap(),
        )
    };
    let mut g = c.benchmark_group("eval_32_instances");
    g.bench_function("rayon", |b| b.iter(|| black_box(par_map(&pairs, score))));
    g.bench_function("sequential", |b| b.iter(|| black_box(seq_map(&pairs, score))));
    g.finish();
}

fn bench_separation(c: &mut Criterion, f: &Fixture) {
    let n = f.users.len();
    let rcfg = RewardConfig {
        alpha: 1.0,
        tau: 0.0,
        length_normalize: true,
    };
    // Each user owns a slice of the responses.
    let cell = |k: usize| -> f64 {
        let (data, model) = (k / n, k % n);
        (0..3)
            .map(|j| {
                let i = (data * 3 + j) % f.prompts.len();
                sequence_reward(&f.users[model], &f.base, &f.prompts[i], &f.responses[i], &rcfg).unwrap()
            })
            .sum::<f64>()
    };
    let mut g = c.benchmark_group("separation_10x10");
    g.bench_function("rayon", |b| b.iter(|| black_box(par_map_range(n * n, cell))));
    g.bench_function("sequential", |b| b.iter(|| black_box((0..n * n).map(cell).collect::<Vec<_>>())));
    g.finish();
}

fn benches(c: &mut Criterion) {
    let f = fixture();
    assert_eq!(f.vocab.len(), f.base.effective_params().dims.vocab_size);
    bench_decode(c, &f);
    bench_eval(c, &f);
    bench_separation(c, &f);
}

criterion_group! {
    name = parallel;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(parallel);
