use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::tokenizer::Modality;

/// Standard deviation of every randomly initialized weight.
pub const INIT_STD: f64 = 0.02;

/// Which training stage may update a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Per-modality R/K/V projections and their branches.
    ModalitySpecific,
    Shared,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Drawn from N(0, 0.02²).
    Weight,
    /// Token-shift mix, starts at 0.5.
    Mix,
    /// Decay logit, starts at 0.
    Decay,
    /// Norm gain, starts at 1.
    Gain,
    /// Norm bias, starts at 0.
    Bias,
    /// Left branch factor, drawn from N(0, 0.02²).
    BranchA,
    /// Right branch factor, starts at 0.
    BranchB,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    pub a: T,
    pub b: T,
}

/// A `d×d` projection, trained as `weight + a·b` while a branch exists.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    pub weight: T,
    pub branch: Option<Branch<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityProjections<T> {
    pub r: Projection<T>,
    pub k: Projection<T>,
    pub v: Projection<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeMix<T> {
    pub mu_r: T,
    pub mu_k: T,
    pub mu_v: T,
    /// Indexed by [`Modality::index`].
    pub projections: [ModalityProjections<T>; 2],
    pub decay: T,
    pub norm: LayerNorm<T>,
    pub w_o: T,
}

impl<T> TimeMix<T> {
    pub fn projections(&self, modality: Modality) -> &ModalityProjections<T> {
        &self.projections[modality.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w_in: T,
    pub w_out: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moe<T> {
    pub router: T,
    pub experts: Vec<Mlp<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChannelMix<T> {
    Mlp(Mlp<T>),
    Moe(Moe<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub time_mix: TimeMix<T>,
    pub ln2: LayerNorm<T>,
    pub channel: ChannelMix<T>,
}

/// All learnable weights, generic over what stands in for a tensor (the
/// tensors themselves, or graph handles bound to them).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embedding: T,
    pub blocks: Vec<Block<T>>,
    pub ln_out: LayerNorm<T>,
    pub head: T,
}

pub type Params<F> = ModelParams<Tensor<F>>;

fn info(name: String, group: ParamGroup, kind: ParamKind) -> ParamInfo {
    ParamInfo { name, group, kind }
}

impl<T> ModelParams<T> {
    /// Rebuilds the structure with `f` applied to every parameter, in the
    /// canonical order: embedding; per block ln1, token-shift mixes, image
    /// then text R/K/V (weight, a, b each), decay, output norm, W_o, ln2,
    /// channel mixing; then the final norm and the head.
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&ParamInfo, &'s T) -> U) -> ModelParams<U> {
        use ParamGroup::*;
        use ParamKind::*;
        let mut call = |name: String, group, kind, t: &'s T| f(&info(name, group, kind), t);
        let norm = |name: &str, n: &'s LayerNorm<T>, call: &mut dyn FnMut(String, ParamGroup, ParamKind, &'s T) -> U| {
            LayerNorm {
                gain: call(format!("{name}.gain"), Shared, Gain, &n.gain),
                bias: call(format!("{name}.bias"), Shared, Bias, &n.bias),
            }
        };
        let embedding = call("embedding".into(), Shared, Weight, &self.embedding);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            let ln1 = norm(&format!("{p}.ln1"), &b.ln1, &mut call);
            let tm = &b.time_mix;
            let mu_r = call(format!("{p}.time_mix.mu_r"), Shared, Mix, &tm.mu_r);
            let mu_k = call(format!("{p}.time_mix.mu_k"), Shared, Mix, &tm.mu_k);
            let mu_v = call(format!("{p}.time_mix.mu_v"), Shared, Mix, &tm.mu_v);
            let mut proj = |m: Modality, which: &str, pr: &'s Projection<T>| {
                let base = format!("{p}.time_mix.{}.{which}", m.name());
                Projection {
                    weight: call(format!("{base}.weight"), ModalitySpecific, Weight, &pr.weight),
                    branch: pr.branch.as_ref().map(|br| Branch {
                        a: call(format!("{base}.a"), ModalitySpecific, BranchA, &br.a),
                        b: call(format!("{base}.b"), ModalitySpecific, BranchB, &br.b),
                    }),
                }
            };
            let projections = Modality::ALL.map(|m| {
                let s = tm.projections(m);
                ModalityProjections {
                    r: proj(m, "r", &s.r),
                    k: proj(m, "k", &s.k),
                    v: proj(m, "v", &s.v),
                }
            });
            let decay = call(format!("{p}.time_mix.decay"), Shared, Decay, &tm.decay);
            let tnorm = norm(&format!("{p}.time_mix.norm"), &tm.norm, &mut call);
            let w_o = call(format!("{p}.time_mix.w_o"), Shared, Weight, &tm.w_o);
            let ln2 = norm(&format!("{p}.ln2"), &b.ln2, &mut call);
            let channel = match &b.channel {
                ChannelMix::Mlp(m) => ChannelMix::Mlp(Mlp {
                    w_in: call(format!("{p}.mlp.w_in"), Shared, Weight, &m.w_in),
                    w_out: call(format!("{p}.mlp.w_out"), Shared, Weight, &m.w_out),
                }),
                ChannelMix::Moe(m) => {
                    let router = call(format!("{p}.moe.router"), Shared, Weight, &m.router);
                    let experts = m
                        .experts
                        .iter()
                        .enumerate()
                        .map(|(e, x)| Mlp {
                            w_in: call(format!("{p}.moe.experts.{e}.w_in"), Shared, Weight, &x.w_in),
                            w_out: call(format!("{p}.moe.experts.{e}.w_out"), Shared, Weight, &x.w_out),
                        })
                        .collect();
                    ChannelMix::Moe(Moe { router, experts })
                }
            };
            blocks.push(Block {
                ln1,
                time_mix: TimeMix { mu_r, mu_k, mu_v, projections, decay, norm: tnorm, w_o },
                ln2,
                channel,
            });
        }
        let ln_out = norm("ln_out", &self.ln_out, &mut call);
        let head = call("head".into(), Shared, Weight, &self.head);
        ModelParams { config: self.config.clone(), embedding, blocks, ln_out, head }
    }

    /// Visits every parameter in canonical order.
    pub fn visit<'s>(&'s self, mut f: impl FnMut(&ParamInfo, &'s T)) {
        self.map(|i, t| f(i, t));
    }

    /// Mutable references to every parameter in canonical order.
    pub fn entries_mut(&mut self) -> Vec<(ParamInfo, &mut T)> {
        use ParamGroup::*;
        use ParamKind::*;
        let mut out: Vec<(ParamInfo, &mut T)> = Vec::new();
        fn norm<'a, T>(out: &mut Vec<(ParamInfo, &'a mut T)>, name: &str, n: &'a mut LayerNorm<T>) {
            out.push((info(format!("{name}.gain"), Shared, Gain), &mut n.gain));
            out.push((info(format!("{name}.bias"), Shared, Bias), &mut n.bias));
        }
        out.push((info("embedding".into(), Shared, Weight), &mut self.embedding));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            norm(&mut out, &format!("{p}.ln1"), &mut b.ln1);
            let tm = &mut b.time_mix;
            out.push((info(format!("{p}.time_mix.mu_r"), Shared, Mix), &mut tm.mu_r));
            out.push((info(format!("{p}.time_mix.mu_k"), Shared, Mix), &mut tm.mu_k));
            out.push((info(format!("{p}.time_mix.mu_v"), Shared, Mix), &mut tm.mu_v));
            for (m, set) in Modality::ALL.into_iter().zip(tm.projections.iter_mut()) {
                for (which, pr) in [("r", &mut set.r), ("k", &mut set.k), ("v", &mut set.v)] {
                    let base = format!("{p}.time_mix.{}.{which}", m.name());
                    out.push((info(format!("{base}.weight"), ModalitySpecific, Weight), &mut pr.weight));
                    if let Some(br) = &mut pr.branch {
                        out.push((info(format!("{base}.a"), ModalitySpecific, BranchA), &mut br.a));
                        out.push((info(format!("{base}.b"), ModalitySpecific, BranchB), &mut br.b));
                    }
                }
            }
            out.push((info(format!("{p}.time_mix.decay"), Shared, Decay), &mut tm.decay));
            norm(&mut out, &format!("{p}.time_mix.norm"), &mut tm.norm);
            out.push((info(format!("{p}.time_mix.w_o"), Shared, Weight), &mut tm.w_o));
            norm(&mut out, &format!("{p}.ln2"), &mut b.ln2);
            match &mut b.channel {
                ChannelMix::Mlp(m) => {
                    out.push((info(format!("{p}.mlp.w_in"), Shared, Weight), &mut m.w_in));
                    out.push((info(format!("{p}.mlp.w_out"), Shared, Weight), &mut m.w_out));
                }
                ChannelMix::Moe(m) => {
                    out.push((info(format!("{p}.moe.router"), Shared, Weight), &mut m.router));
                    for (e, x) in m.experts.iter_mut().enumerate() {
                        out.push((info(format!("{p}.moe.experts.{e}.w_in"), Shared, Weight), &mut x.w_in));
                        out.push((info(format!("{p}.moe.experts.{e}.w_out"), Shared, Weight), &mut x.w_out));
                    }
                }
            }
        }
        norm(&mut out, "ln_out", &mut self.ln_out);
        out.push((info("head".into(), Shared, Weight), &mut self.head));
        out
    }

    /// Parameter descriptions in canonical order.
    pub fn infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        self.visit(|i, _| out.push(i.clone()));
        out
    }

    /// Whether every projection carries a reparameterization branch.
    pub fn has_branches(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.time_mix
                .projections
                .iter()
                .all(|s| s.r.branch.is_some() && s.k.branch.is_some() && s.v.branch.is_some())
        })
    }

    /// Whether no projection carries a branch, i.e. the model is ready for
    /// inference.
    pub fn is_merged(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.time_mix
                .projections
                .iter()
                .all(|s| s.r.branch.is_none() && s.k.branch.is_none() && s.v.branch.is_none())
        })
    }
}

impl<F: Real> Params<F> {
    /// Fresh parameters: weights and `a` factors from N(0, 0.02²) drawn in
    /// canonical order from xoshiro256** seeded with `config.seed`; mixes
    /// 0.5; decay logits 0; gains 1; biases and `b` factors 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config, true);
        let mut rng = Xoshiro256StarStar::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        for (info, t) in params.entries_mut() {
            match info.kind {
                ParamKind::Weight | ParamKind::BranchA => {
                    for x in t.data_mut() {
                        *x = F::from_f64_lossy(normal.sample(&mut rng));
                    }
                }
                ParamKind::Mix => t.data_mut().fill(F::from_f64_lossy(0.5)),
                ParamKind::Gain => t.data_mut().fill(F::one()),
                ParamKind::Decay | ParamKind::Bias | ParamKind::BranchB => {}
            }
        }
        Ok(params)
    }

    /// Correctly shaped, all-zero parameters, with or without branches.
    pub(crate) fn zeros(c: &ModelConfig, branches: bool) -> Self {
        let d = c.embed_dim;
        let z = |shape: &[usize]| Tensor::<F>::zeros(shape.to_vec());
        let norm = || LayerNorm { gain: z(&[d]), bias: z(&[d]) };
        let proj = || Projection {
            weight: z(&[d, d]),
            branch: branches.then(|| Branch { a: z(&[d, c.reparam_rank]), b: z(&[c.reparam_rank, d]) }),
        };
        let set = || ModalityProjections { r: proj(), k: proj(), v: proj() };
        let mlp = |h: usize| Mlp { w_in: z(&[d, h * d]), w_out: z(&[h * d, d]) };
        let blocks = (0..c.n_blocks)
            .map(|i| Block {
                ln1: norm(),
                time_mix: TimeMix {
                    mu_r: z(&[d]),
                    mu_k: z(&[d]),
                    mu_v: z(&[d]),
                    projections: [set(), set()],
                    decay: z(&[d]),
                    norm: norm(),
                    w_o: z(&[d, d]),
                },
                ln2: norm(),
                channel: if c.is_moe_block(i) {
                    ChannelMix::Moe(Moe {
                        router: z(&[d, c.moe.n_experts]),
                        experts: (0..c.moe.n_experts).map(|_| mlp(c.moe.expert_hidden_factor)).collect(),
                    })
                } else {
                    ChannelMix::Mlp(mlp(c.mlp_hidden_factor))
                },
            })
            .collect();
        ModelParams {
            config: c.clone(),
            embedding: z(&[c.vocab_total, d]),
            blocks,
            ln_out: norm(),
            head: z(&[d, c.vocab_total]),
        }
    }

    /// Number of scalars in parameters accepted by `filter`.
    pub fn count(&self, mut filter: impl FnMut(&ParamInfo) -> bool) -> usize {
        let mut n = 0;
        self.visit(|i, t| {
            if filter(i) {
                n += t.len();
            }
        });
        n
    }

    /// Parameters of the recurrent backbone: everything except the token
    /// embedding, the output head and the training-only branches.
    pub fn backbone_count(&self) -> usize {
        self.count(|i| {
            !matches!(i.kind, ParamKind::BranchA | ParamKind::BranchB)
                && i.name != "embedding"
                && i.name != "head"
        })
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        self.map(|_, t| t.cast::<G>())
    }

    /// Folds every branch into its projection: `weight ← weight + a·b`.
    pub fn merge_reparam(&self) -> Result<Self> {
        let mut out = self.clone();
        for (i, block) in out.blocks.iter_mut().enumerate() {
            for (m, set) in Modality::ALL.into_iter().zip(&mut block.time_mix.projections) {
                for (which, pr) in [("r", &mut set.r), ("k", &mut set.k), ("v", &mut set.v)] {
                    let Some(br) = pr.branch.take() else {
                        return Err(Error::MissingBranch(format!("blocks.{i}.time_mix.{}.{which}", m.name())));
                    };
                    pr.weight = effective_weight(&pr.weight, Some(&br));
                }
            }
        }
        Ok(out)
    }
}

/// `weight + a·b`, or a copy of `weight` without a branch. Rounds exactly
/// like the training graph: the product is formed first, then added.
pub fn effective_weight<F: Real>(weight: &Tensor<F>, branch: Option<&Branch<Tensor<F>>>) -> Tensor<F> {
    let mut w = weight.clone();
    if let Some(br) = branch {
        let (d_in, rank) = (br.a.shape()[0], br.a.shape()[1]);
        let d_out = br.b.shape()[1];
        let mut ab = vec![F::zero(); d_in * d_out];
        F::gemm(d_in, rank, d_out, br.a.data(), false, br.b.data(), false, &mut ab, false);
        for (x, y) in w.data_mut().iter_mut().zip(ab) {
            *x = *x + y;
        }
    }
    w.grad = None;
    w.requires_grad = false;
    w
}
