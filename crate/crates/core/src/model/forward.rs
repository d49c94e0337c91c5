//! Whole-sequence forward pass on a [`Graph`], used for training.

use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use super::params::{ChannelMix, LayerNorm, ModalityProjections, ModelParams, ParamInfo, Params, Projection};
use super::step::{select_top_k, RoutingRecord};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::tokenizer::{check_modality, Modality};

/// One token stream of a batch. Position `t` predicts `tokens[t]` from
/// `tokens[..t]`; position 0 sees a zero input.
#[derive(Clone, Copy, Debug)]
pub struct Stream<'a> {
    pub tokens: &'a [u32],
    pub modality: Modality,
}

/// Routing statistics of one expert layer over a batch.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    /// Column sums of the router scores, differentiable.
    pub importance: Var,
    /// Tokens routed to each expert.
    pub load: Vec<f64>,
    pub records: Vec<RoutingRecord>,
}

pub struct Forward {
    /// `Σ len × vocab_total` logits, streams stacked in order.
    pub logits: Var,
    /// Graph handles of every parameter.
    pub params: ModelParams<Var>,
    pub routing: Vec<LayerRouting>,
}

/// Router noise source for training-mode forwards.
pub struct RouterNoise<'r> {
    pub rng: &'r mut Xoshiro256StarStar,
    pub std: f64,
}

/// Contiguous rows of one modality.
struct Run {
    start: usize,
    end: usize,
    modality: Modality,
}

/// Records the forward pass of `streams` on `g`.
///
/// Parameters accepted by `trainable` are tracked for gradients. Each
/// projection with a branch uses `weight + a·b`.
pub fn forward<'p, F: Real>(
    g: &mut Graph<'p, F>,
    params: &'p Params<F>,
    streams: &[Stream<'_>],
    trainable: impl Fn(&ParamInfo) -> bool,
    mut noise: Option<RouterNoise<'_>>,
) -> Result<Forward> {
    let c = &params.config;
    let d = c.embed_dim;
    if streams.is_empty() || streams.iter().any(|s| s.tokens.is_empty()) {
        return Err(Error::Shape { op: "forward", detail: "empty stream".into() });
    }
    for s in streams {
        check_modality(s.tokens, s.modality, c.vocab_total)?;
    }
    let p = params.map(|info, t| g.leaf_tracked(t, trainable(info)));

    let segments: Vec<usize> = streams.iter().map(|s| s.tokens.len()).collect();
    let mut runs: Vec<Run> = Vec::new();
    let mut row = 0;
    for s in streams {
        let end = row + s.tokens.len();
        match runs.last_mut() {
            Some(r) if r.modality == s.modality => r.end = end,
            _ => runs.push(Run { start: row, end, modality: s.modality }),
        }
        row = end;
    }

    // Inputs: a zero row, then the embeddings of all but the last token.
    let inputs: Vec<u32> = streams
        .iter()
        .flat_map(|s| s.tokens[..s.tokens.len() - 1].iter().copied())
        .collect();
    let zero = g.constant(Tensor::zeros([1, d]));
    let embedded = if inputs.is_empty() { None } else { Some(g.embedding(p.embedding, &inputs)?) };
    let mut parts = Vec::with_capacity(2 * streams.len());
    let mut offset = 0;
    for s in streams {
        parts.push(zero);
        let n = s.tokens.len() - 1;
        if let (Some(e), true) = (embedded, n > 0) {
            parts.push(g.slice_rows(e, offset, offset + n)?);
        }
        offset += n;
    }
    let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };

    let mut routing = Vec::new();
    for block in &p.blocks {
        let h = norm(g, x, &block.ln1)?;
        let tm = &block.time_mix;
        let xr = g.token_shift(h, tm.mu_r, &segments)?;
        let xk = g.token_shift(h, tm.mu_k, &segments)?;
        let xv = g.token_shift(h, tm.mu_v, &segments)?;
        let r = project(g, xr, &runs, &tm.projections, |s| &s.r)?;
        let k = project(g, xk, &runs, &tm.projections, |s| &s.k)?;
        let v = project(g, xv, &runs, &tm.projections, |s| &s.v)?;
        let o = g.wkv(r, k, v, tm.decay, &segments)?;
        let o = norm(g, o, &tm.norm)?;
        let o = g.matmul(o, tm.w_o)?;
        x = g.add(x, o)?;

        let h = norm(g, x, &block.ln2)?;
        let y = match &block.channel {
            ChannelMix::Mlp(m) => mlp(g, h, m.w_in, m.w_out)?,
            ChannelMix::Moe(m) => {
                let mut logits = g.matmul(h, m.router)?;
                if let Some(n) = noise.as_mut().filter(|n| n.std > 0.0) {
                    let normal = Normal::new(0.0, n.std).expect("finite non-negative std");
                    let shape = g.value(logits).shape().to_vec();
                    let len = g.value(logits).len();
                    let draws: Vec<F> = (0..len).map(|_| F::from_f64_lossy(normal.sample(n.rng))).collect();
                    let eps = g.constant(Tensor::new(shape, draws)?);
                    logits = g.add(logits, eps)?;
                }
                let scores = g.softmax(logits, None)?;
                let n_experts = m.experts.len();
                let (selected, records) = route(g.value(scores), c.moe.top_k);
                let weights = g.topk_renorm(scores, &selected)?;
                let experts = m
                    .experts
                    .iter()
                    .map(|e| mlp(g, h, e.w_in, e.w_out))
                    .collect::<Result<Vec<_>>>()?;
                let y = g.moe_combine(weights, &experts)?;
                let mut load = vec![0.0; n_experts];
                for r in &records {
                    for &e in &r.selected {
                        load[e] += 1.0;
                    }
                }
                let w = g.value(weights);
                let records = records
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut r)| {
                        r.weights = r.selected.iter().map(|&e| w.row(i)[e].as_f64()).collect();
                        r
                    })
                    .collect();
                let importance = g.column_sum(scores)?;
                routing.push(LayerRouting { importance, load, records });
                y
            }
        };
        x = g.add(x, y)?;
    }
    let h = norm(g, x, &p.ln_out)?;
    let logits = g.matmul(h, p.head)?;
    Ok(Forward { logits, params: p, routing })
}

fn norm<F: Real>(g: &mut Graph<'_, F>, x: Var, n: &LayerNorm<Var>) -> Result<Var> {
    g.layer_norm(x, n.gain, n.bias)
}

fn mlp<F: Real>(g: &mut Graph<'_, F>, x: Var, w_in: Var, w_out: Var) -> Result<Var> {
    let hidden = g.matmul(x, w_in)?;
    let hidden = g.squared_relu(hidden)?;
    g.matmul(hidden, w_out)
}

/// Projects each modality run with that modality's weights.
fn project<F: Real>(
    g: &mut Graph<'_, F>,
    x: Var,
    runs: &[Run],
    sets: &[ModalityProjections<Var>; 2],
    pick: impl Fn(&ModalityProjections<Var>) -> &Projection<Var>,
) -> Result<Var> {
    let mut weights: [Option<Var>; 2] = [None, None];
    let mut outs = Vec::with_capacity(runs.len());
    for run in runs {
        let m = run.modality.index();
        let w = match weights[m] {
            Some(w) => w,
            None => {
                let pr = pick(&sets[m]);
                let w = match &pr.branch {
                    Some(br) => {
                        let ab = g.matmul(br.a, br.b)?;
                        g.add(pr.weight, ab)?
                    }
                    None => pr.weight,
                };
                weights[m] = Some(w);
                w
            }
        };
        let xs = if runs.len() == 1 { x } else { g.slice_rows(x, run.start, run.end)? };
        outs.push(g.matmul(xs, w)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_rows(&outs)
    }
}

/// Top-k selection mask and per-row records for router scores.
fn route<F: Real>(scores: &Tensor<F>, top_k: usize) -> (Vec<bool>, Vec<RoutingRecord>) {
    let n = scores.cols();
    let mut mask = vec![false; scores.len()];
    let mut records = Vec::with_capacity(scores.rows());
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let selected = select_top_k(row, top_k);
        for &e in &selected {
            mask[i * n + e] = true;
        }
        records.push(RoutingRecord {
            scores: row.iter().map(|s| s.as_f64()).collect(),
            selected,
            weights: Vec::new(),
        });
    }
    (mask, records)
}

/// Inference-mode logits for one stream, `len × vocab_total`.
pub fn forward_logits<F: Real>(params: &Params<F>, tokens: &[u32], modality: Modality) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let f = forward(&mut g, params, &[Stream { tokens, modality }], |_| false, None)?;
    Ok(g.value(f.logits).clone())
}
