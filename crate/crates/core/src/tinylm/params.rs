use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub vocab_size: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Dims {
    pub fn new(vocab_size: usize, window: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            vocab_size,
            window,
            embed_dim,
            hidden_dim,
        }
    }

    /// Width of the concatenated context embedding fed to the hidden layer.
    pub fn input_dim(&self) -> usize {
        self.window * self.embed_dim
    }
}

/// Frozen-or-trainable weights of the fixed-window feed-forward model.
///
/// Row-major storage: `embedding` is `vocab × embed`, `w_hidden` is
/// `hidden × (window·embed)`, `w_out` is `vocab × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub embedding: Vec<f64>,
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            embedding: vec![0.0; dims.vocab_size * dims.embed_dim],
            w_hidden: vec![0.0; dims.hidden_dim * dims.input_dim()],
            b_hidden: vec![0.0; dims.hidden_dim],
            w_out: vec![0.0; dims.vocab_size * dims.hidden_dim],
            b_out: vec![0.0; dims.vocab_size],
        }
    }

    /// Uniform fan-in scaled initialization; biases start at zero.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        fill_uniform(&mut rng, &mut p.embedding, 1.0);
        fill_uniform(&mut rng, &mut p.w_hidden, 1.0 / (dims.input_dim() as f64).sqrt());
        fill_uniform(&mut rng, &mut p.w_out, 1.0 / (dims.hidden_dim as f64).sqrt());
        p
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let expect = [
            ("embedding", self.embedding.len(), d.vocab_size * d.embed_dim),
            ("w_hidden", self.w_hidden.len(), d.hidden_dim * d.input_dim()),
            ("b_hidden", self.b_hidden.len(), d.hidden_dim),
            ("w_out", self.w_out.len(), d.vocab_size * d.hidden_dim),
            ("b_out", self.b_out.len(), d.vocab_size),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: {got} values, expected {want}"
                )));
            }
        }
        if d.window == 0 || d.embed_dim == 0 || d.hidden_dim == 0 {
            return Err(Error::ShapeMismatch("zero-sized dimension".into()));
        }
        if !self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            &self.embedding,
            &self.w_hidden,
            &self.b_hidden,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embedding,
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// `rows × cols` delta factored as `scale · A · B` with A `rows × rank`, B `rank × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LowRank {
    pub fn zeros(rows: usize, cols: usize, rank: usize) -> Self {
        Self {
            rows,
            cols,
            rank,
            a: vec![0.0; rows * rank],
            b: vec![0.0; rank * cols],
        }
    }

    /// `target += scale · A · B`
    pub fn add_product_into(&self, scale: f64, target: &mut [f64]) {
        debug_assert_eq!(target.len(), self.rows * self.cols);
        for i in 0..self.rows {
            let a_row = &self.a[i * self.rank..(i + 1) * self.rank];
            let t_row = &mut target[i * self.cols..(i + 1) * self.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let coef = scale * aik;
                let b_row = &self.b[k * self.cols..(k + 1) * self.cols];
                for (t, &bkj) in t_row.iter_mut().zip(b_row) {
                    *t += coef * bkj;
                }
            }
        }
    }

    /// Given the gradient `g` w.r.t. the effective matrix, returns (dA, dB).
    pub fn project_grad(&self, scale: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (r, c, k) = (self.rows, self.cols, self.rank);
        let mut da = vec![0.0; r * k];
        let mut db = vec![0.0; k * c];
        for i in 0..r {
            let g_row = &g[i * c..(i + 1) * c];
            for kk in 0..k {
                let b_row = &self.b[kk * c..(kk + 1) * c];
                let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                da[i * k + kk] = scale * dot;
                let aik = self.a[i * k + kk];
                if aik != 0.0 {
                    let db_row = &mut db[kk * c..(kk + 1) * c];
                    for (d, &gij) in db_row.iter_mut().zip(g_row) {
                        *d += scale * aik * gij;
                    }
                }
            }
        }
        (da, db)
    }
}

/// Per-user low-rank delta on the hidden and output matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterDelta {
    pub rank: usize,
    pub scale: f64,
    pub hidden: LowRank,
    pub out: LowRank,
}

impl AdapterDelta {
    pub fn zeros(dims: Dims, rank: usize, scale: f64) -> Result<Self> {
        let min_dim = dims
            .hidden_dim
            .min(dims.input_dim())
            .min(dims.vocab_size);
        if rank == 0 || rank >= min_dim {
            return Err(Error::InvalidArgument(format!(
                "adapter rank {rank} must satisfy 1 <= r < {min_dim}"
            )));
        }
        Ok(Self {
            rank,
            scale,
            hidden: LowRank::zeros(dims.hidden_dim, dims.input_dim(), rank),
            out: LowRank::zeros(dims.vocab_size, dims.hidden_dim, rank),
        })
    }

    /// A starts at zero and B is random, so the initial delta is exactly zero.
    pub fn init(dims: Dims, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut ad = Self::zeros(dims, rank, scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bh = 1.0 / (ad.hidden.cols as f64).sqrt();
        fill_uniform(&mut rng, &mut ad.hidden.b, bh);
        let bo = 1.0 / (ad.out.cols as f64).sqrt();
        fill_uniform(&mut rng, &mut ad.out.b, bo);
        Ok(ad)
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let ok = self.hidden.rows == dims.hidden_dim
            && self.hidden.cols == dims.input_dim()
            && self.out.rows == dims.vocab_size
            && self.out.cols == dims.hidden_dim
            && self.hidden.rank == self.rank
            && self.out.rank == self.rank;
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "adapter ({}x{}, {}x{}) does not fit model dims {dims:?}",
                self.hidden.rows, self.hidden.cols, self.out.rows, self.out.cols
            )))
        }
    }

    pub fn num_params(&self) -> usize {
        self.hidden.a.len() + self.hidden.b.len() + self.out.a.len() + self.out.b.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.hidden.a[..], &self.hidden.b, &self.out.a, &self.out.b].concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for t in [
            &mut self.hidden.a,
            &mut self.hidden.b,
            &mut self.out.a,
            &mut self.out.b,
        ] {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Base weights with this delta folded into the hidden and output matrices.
    pub fn merged(&self, base: &ModelParams) -> ModelParams {
        let mut eff = base.clone();
        self.hidden.add_product_into(self.scale, &mut eff.w_hidden);
        self.out.add_product_into(self.scale, &mut eff.w_out);
        eff
    }
}

pub(crate) fn fill_uniform(rng: &mut ChaCha8Rng, xs: &mut [f64], bound: f64) {
    for x in xs {
        *x = rng.gen_range(-bound..bound);
    }
}
