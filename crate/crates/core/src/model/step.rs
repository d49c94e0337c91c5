//! Token-at-a-time evaluation on plain slices, used by the codec.
//!
//! Encoder and decoder both drive a [`Session`], so they compute every PMF
//! with the same operations in the same order.

use std::ops::Range;

use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use super::params::{ChannelMix, LayerNorm, Mlp, Moe, Params, Projection, TimeMix};
use crate::error::{Error, Result};
use crate::numerics::{dot, layer_norm_row, sigmoid, squared_relu, Real, Tensor};
use crate::tokenizer::Modality;

/// Routing decision of a mixture-of-experts layer for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    /// Softmax router scores, one per expert.
    pub scores: Vec<f64>,
    /// Selected experts in ascending index order.
    pub selected: Vec<usize>,
    /// Scores of the selected experts rescaled to sum to one, aligned with
    /// `selected`.
    pub weights: Vec<f64>,
}

/// Indices of the `k` highest scores, ties to the lower index, returned in
/// ascending index order.
pub fn select_top_k<F: Real>(scores: &[F], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Recurrent memory of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<F> {
    /// Normalized input of the previous token.
    pub prev_x: Vec<F>,
    /// `d×d` linear-attention state, row-major.
    pub s: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F> {
    pub blocks: Vec<BlockState<F>>,
}

impl<F: Real> RecurrentState<F> {
    pub fn new(n_blocks: usize, d: usize) -> Self {
        RecurrentState {
            blocks: (0..n_blocks)
                .map(|_| BlockState { prev_x: vec![F::zero(); d], s: vec![F::zero(); d * d] })
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for b in &mut self.blocks {
            b.prev_x.fill(F::zero());
            b.s.fill(F::zero());
        }
    }
}

/// `out = x · W[:, cols]` for a row-major `W` with `x.len()` rows.
fn matvec_into<F: Real>(x: &[F], w: &Tensor<F>, cols: Range<usize>, out: &mut [F]) {
    let n = w.cols();
    debug_assert_eq!(x.len() * n, w.len());
    out.fill(F::zero());
    let data = w.data();
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::zero() {
            continue;
        }
        let row = &data[i * n + cols.start..i * n + cols.end];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + xi * wv;
        }
    }
}

fn matvec<F: Real>(x: &[F], w: &Tensor<F>) -> Vec<F> {
    let mut out = vec![F::zero(); w.cols()];
    matvec_into(x, w, 0..w.cols(), &mut out);
    out
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub fn layer_norm<F: Real>(x: &[F], norm: &LayerNorm<Tensor<F>>) -> Vec<F> {
    let mut normalized = vec![F::zero(); x.len()];
    let mut out = vec![F::zero(); x.len()];
    layer_norm_row(x, norm.gain.data(), norm.bias.data(), &mut normalized, &mut out);
    out
}

/// `μ ⊙ x + (1 − μ) ⊙ prev`.
pub fn token_shift<F: Real>(x: &[F], prev: &[F], mu: &[F]) -> Vec<F> {
    x.iter()
        .zip(prev)
        .zip(mu)
        .map(|((&x, &p), &m)| m * x + (F::one() - m) * p)
        .collect()
}

/// `x · weight`, plus `(x · a) · b` while a branch exists.
pub fn project<F: Real>(x: &[F], p: &Projection<Tensor<F>>) -> Vec<F> {
    let mut out = matvec(x, &p.weight);
    if let Some(br) = &p.branch {
        let low = matvec(x, &br.a);
        add_into(&mut out, &matvec(&low, &br.b));
    }
    out
}

/// One token through a block's time mixing; `x` is the block's normalized
/// input. Updates the block state.
pub fn time_mixing_step<F: Real>(
    x: &[F],
    state: &mut BlockState<F>,
    modality: Modality,
    tm: &TimeMix<Tensor<F>>,
) -> Vec<F> {
    let d = x.len();
    let set = tm.projections(modality);
    let r = project(&token_shift(x, &state.prev_x, tm.mu_r.data()), &set.r);
    let k = project(&token_shift(x, &state.prev_x, tm.mu_k.data()), &set.k);
    let v = project(&token_shift(x, &state.prev_x, tm.mu_v.data()), &set.v);
    state.prev_x.copy_from_slice(x);
    let mut y = vec![F::zero(); d];
    for i in 0..d {
        let decay = sigmoid(tm.decay.data()[i]);
        let row = &mut state.s[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = decay * row[j] + v[i] * k[j];
        }
        y[i] = dot(row, &r);
    }
    matvec(&layer_norm(&y, &tm.norm), &tm.w_o)
}

/// Squared-ReLU feed-forward network.
pub fn mlp<F: Real>(x: &[F], m: &Mlp<Tensor<F>>) -> Vec<F> {
    let hidden: Vec<F> = matvec(x, &m.w_in).into_iter().map(squared_relu).collect();
    matvec(&hidden, &m.w_out)
}

/// Router softmax, top-k selection and the weighted sum of the selected
/// experts. With `noise`, Gaussian noise of the given standard deviation is
/// added to the router logits first.
pub fn moe_forward<F: Real>(
    x: &[F],
    moe: &Moe<Tensor<F>>,
    top_k: usize,
    noise: Option<(&mut Xoshiro256StarStar, f64)>,
) -> (Vec<F>, RoutingRecord) {
    let mut logits = matvec(x, &moe.router);
    if let Some((rng, std)) = noise {
        let normal = Normal::new(0.0, std).expect("finite non-negative std");
        for l in &mut logits {
            *l = *l + F::from_f64_lossy(normal.sample(rng));
        }
    }
    let mut scores = vec![F::zero(); logits.len()];
    crate::numerics::masked_softmax(&logits, None, &mut scores);
    let selected = select_top_k(&scores, top_k);
    let z: F = selected.iter().map(|&e| scores[e]).sum();
    let weights: Vec<F> = selected.iter().map(|&e| scores[e] / z).collect();
    let mut out = vec![F::zero(); x.len()];
    for (&e, &w) in selected.iter().zip(&weights) {
        for (o, y) in out.iter_mut().zip(mlp(x, &moe.experts[e])) {
            *o = *o + w * y;
        }
    }
    let record = RoutingRecord {
        scores: scores.iter().map(|s| s.as_f64()).collect(),
        selected,
        weights: weights.iter().map(|w| w.as_f64()).collect(),
    };
    (out, record)
}

/// Sequential evaluation of one stream.
pub struct Session<'p, F: Real> {
    params: &'p Params<F>,
    modality: Modality,
    state: RecurrentState<F>,
    logits: Vec<F>,
    routing: Vec<RoutingRecord>,
}

impl<'p, F: Real> Session<'p, F> {
    pub fn new(params: &'p Params<F>, modality: Modality) -> Self {
        let c = &params.config;
        Session {
            params,
            modality,
            state: RecurrentState::new(c.n_blocks, c.embed_dim),
            logits: Vec::new(),
            routing: Vec::new(),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn state(&self) -> &RecurrentState<F> {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    /// Routing of the most recent step, one record per expert layer.
    pub fn routing(&self) -> &[RoutingRecord] {
        &self.routing
    }

    /// Consumes the previous token (`None` at the start of the stream) and
    /// returns next-token logits for the vocabulary ids in `columns`.
    pub fn step(&mut self, input: Option<u32>, columns: Range<usize>) -> Result<&[F]> {
        let p = self.params;
        let c = &p.config;
        let d = c.embed_dim;
        if columns.end > c.vocab_total || columns.is_empty() {
            return Err(Error::Shape {
                op: "step",
                detail: format!("columns {columns:?} of a {} vocabulary", c.vocab_total),
            });
        }
        let mut x = match input {
            None => vec![F::zero(); d],
            Some(id) => {
                if !self.modality.id_range(c.vocab_total).contains(&(id as usize)) {
                    return Err(Error::Modality { id, expected: self.modality });
                }
                p.embedding.row(id as usize).to_vec()
            }
        };
        self.routing.clear();
        for (block, state) in p.blocks.iter().zip(&mut self.state.blocks) {
            let h = layer_norm(&x, &block.ln1);
            add_into(&mut x, &time_mixing_step(&h, state, self.modality, &block.time_mix));
            let h = layer_norm(&x, &block.ln2);
            let y = match &block.channel {
                ChannelMix::Mlp(m) => mlp(&h, m),
                ChannelMix::Moe(m) => {
                    let (y, record) = moe_forward(&h, m, c.moe.top_k, None);
                    self.routing.push(record);
                    y
                }
            };
            add_into(&mut x, &y);
        }
        let h = layer_norm(&x, &p.ln_out);
        self.logits.resize(columns.len(), F::zero());
        matvec_into(&h, &p.head, columns, &mut self.logits);
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "step" });
        }
        Ok(&self.logits)
    }
}
