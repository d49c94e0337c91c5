//! Three-stage training on 1:1 mixed image/text batches.

mod checkpoint;
mod loss;

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

pub use checkpoint::{fnv1a64, group_checksum, payload_hash, Checkpoint};
pub use loss::{aux_loss_var, aux_moe_loss, total_loss, AuxStats};

use crate::error::{Error, Result};
use crate::model::{forward, ParamGroup, ParamInfo, Params, RouterNoise, Stream};
use crate::numerics::{cv_squared, Graph, Real, Var};
use crate::tokenizer::{check_modality, Modality, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEpochs {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: StageEpochs,
    /// Fixed learning rate of stage 1.
    pub lr_stage1: f64,
    /// Fixed learning rate of stage 2.
    pub lr_stage2: f64,
    /// Stage 3 anneals from `lr_max` down to `lr_min`.
    pub lr_max: f64,
    pub lr_min: f64,
    /// Weight λ of the expert balance penalty.
    pub aux_weight: f64,
    /// Tokens per training window.
    pub seq_len: usize,
    /// Image windows per batch; each batch holds as many text windows.
    pub batch_pairs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm limit.
    pub clip_norm: f64,
    /// Seeds shuffling and router noise.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: StageEpochs { s1: 2, s2: 2, s3: 16 },
            lr_stage1: 2e-5,
            lr_stage2: 2e-5,
            lr_max: 1e-4,
            lr_min: 5e-6,
            aux_weight: 0.01,
            seq_len: 512,
            batch_pairs: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        let rates = [self.lr_stage1, self.lr_stage2, self.lr_max, self.lr_min];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return fail("learning rates must be finite and non-negative");
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return fail("aux_weight must be finite and non-negative");
        }
        if self.seq_len == 0 || self.batch_pairs == 0 {
            return fail("seq_len and batch_pairs must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.clip_norm > 0.0) {
            return fail("adam_eps and clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Only the per-modality projections learn.
    ModalitySpecific,
    /// Only the shared parameters learn.
    Shared,
    /// Everything learns under a cosine schedule.
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::ModalitySpecific, Stage::Shared, Stage::Joint];

    pub fn number(self) -> u8 {
        match self {
            Stage::ModalitySpecific => 1,
            Stage::Shared => 2,
            Stage::Joint => 3,
        }
    }

    pub fn trains(self, info: &ParamInfo) -> bool {
        match self {
            Stage::ModalitySpecific => info.group == ParamGroup::ModalitySpecific,
            Stage::Shared => info.group == ParamGroup::Shared,
            Stage::Joint => true,
        }
    }

    fn epochs(self, c: &TrainConfig) -> usize {
        match self {
            Stage::ModalitySpecific => c.epochs.s1,
            Stage::Shared => c.epochs.s2,
            Stage::Joint => c.epochs.s3,
        }
    }
}

/// `min + (max − min)(1 + cos(π·s/(S−1)))/2`; a single step uses `max`.
pub fn cosine_lr(step: usize, total: usize, max: f64, min: f64) -> f64 {
    if total <= 1 {
        return max;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    min + (max - min) * (1.0 + (PI * t).cos()) / 2.0
}

/// Token windows of both modalities.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub image: Vec<Vec<u32>>,
    pub text: Vec<Vec<u32>>,
}

impl TrainingData {
    /// Cuts every sequence into consecutive windows of at most `seq_len`
    /// tokens.
    pub fn from_sequences(sequences: &[TokenSequence], seq_len: usize, vocab_total: usize) -> Result<Self> {
        let mut data = TrainingData::default();
        for s in sequences {
            check_modality(&s.ids, s.modality, vocab_total)?;
            let windows = s.ids.chunks(seq_len.max(1)).map(<[u32]>::to_vec);
            match s.modality {
                Modality::Image => data.image.extend(windows),
                Modality::Text => data.text.extend(windows),
            }
        }
        Ok(data)
    }

    pub fn windows(&self, m: Modality) -> &[Vec<u32>] {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    /// Window pairs per epoch: the smaller corpus sets the count.
    pub fn pairs_per_epoch(&self) -> usize {
        self.image.len().min(self.text.len())
    }
}

/// One optimizer step's log line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub ce_image_nats: f64,
    pub ce_text_nats: f64,
    pub aux_loss: f64,
    /// Of the last expert layer.
    pub expert_importance: Vec<f64>,
    pub expert_load: Vec<f64>,
}

/// Token-weighted mean cross-entropy of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub stage: u8,
    pub epoch: usize,
    pub ce_image_nats: f64,
    pub ce_text_nats: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], mut w: impl Write) -> Result<()> {
    let n = rows.first().map_or(3, |r| r.expert_importance.len());
    let mut header = "step,stage,lr,ce_image_nats,ce_text_nats,aux_loss".to_string();
    for e in 0..n {
        header.push_str(&format!(",expert_importance_{e}"));
    }
    for e in 0..n {
        header.push_str(&format!(",expert_load_{e}"));
    }
    writeln!(w, "{header}")?;
    for r in rows {
        let mut line = format!(
            "{},{},{},{},{},{}",
            r.step, r.stage, r.lr, r.ce_image_nats, r.ce_text_nats, r.aux_loss
        );
        for v in r.expert_importance.iter().chain(&r.expert_load) {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Adam moments for the parameters of one stage.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &Params<f32>) -> Self {
        let mut sizes = Vec::new();
        params.visit(|_, t| sizes.push(t.len()));
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// Drives training and owns the evolving parameters.
pub struct Trainer<'d> {
    params: Params<f32>,
    config: TrainConfig,
    data: &'d TrainingData,
    rng: Xoshiro256StarStar,
    step: u64,
    metrics: Vec<MetricsRow>,
    epochs: Vec<EpochSummary>,
}

impl<'d> Trainer<'d> {
    pub fn new(params: Params<f32>, config: TrainConfig, data: &'d TrainingData) -> Result<Self> {
        config.validate()?;
        if params.is_merged() {
            return Err(Error::Merged("training needs reparameterization branches"));
        }
        if data.pairs_per_epoch() == 0 {
            return Err(Error::EmptyCorpus);
        }
        for m in Modality::ALL {
            for w in data.windows(m) {
                check_modality(w, m, params.config.vocab_total)?;
                if w.is_empty() {
                    return Err(Error::EmptyCorpus);
                }
            }
        }
        let rng = Xoshiro256StarStar::seed_from_u64(config.seed);
        Ok(Trainer { params, config, data, rng, step: 0, metrics: Vec::new(), epochs: Vec::new() })
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rng(&self) -> &Xoshiro256StarStar {
        &self.rng
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn epoch_summaries(&self) -> &[EpochSummary] {
        &self.epochs
    }

    pub fn into_params(self) -> Params<f32> {
        self.params
    }

    /// Optimizer steps in one epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.data.pairs_per_epoch().div_ceil(self.config.batch_pairs)
    }

    /// Runs the three stages in order.
    pub fn run(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    /// Runs every epoch of one stage, with fresh optimizer moments.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let epochs = stage.epochs(&self.config);
        let per_epoch = self.steps_per_epoch();
        let total = epochs * per_epoch;
        let mut adam = Adam::new(&self.params);
        let mut s = 0;
        for epoch in 0..epochs {
            let mut image: Vec<&[u32]> = self.data.image.iter().map(Vec::as_slice).collect();
            let mut text: Vec<&[u32]> = self.data.text.iter().map(Vec::as_slice).collect();
            image.shuffle(&mut self.rng);
            text.shuffle(&mut self.rng);
            let n = self.data.pairs_per_epoch();
            let mut sums = [0.0; 2];
            let mut counts = [0usize; 2];
            for start in (0..n).step_by(self.config.batch_pairs) {
                let end = (start + self.config.batch_pairs).min(n);
                let lr = match stage {
                    Stage::ModalitySpecific => self.config.lr_stage1,
                    Stage::Shared => self.config.lr_stage2,
                    Stage::Joint => cosine_lr(s, total, self.config.lr_max, self.config.lr_min),
                };
                let row = self.train_step(stage, &image[start..end], &text[start..end], lr, &mut adam)?;
                for (m, windows) in [(0, &image[start..end]), (1, &text[start..end])] {
                    let tokens: usize = windows.iter().map(|w| w.len()).sum();
                    let ce = if m == 0 { row.ce_image_nats } else { row.ce_text_nats };
                    sums[m] += ce * tokens as f64;
                    counts[m] += tokens;
                }
                self.metrics.push(row);
                s += 1;
            }
            self.epochs.push(EpochSummary {
                stage: stage.number(),
                epoch,
                ce_image_nats: sums[0] / counts[0] as f64,
                ce_text_nats: sums[1] / counts[1] as f64,
            });
        }
        Ok(())
    }

    fn train_step(
        &mut self,
        stage: Stage,
        image: &[&[u32]],
        text: &[&[u32]],
        lr: f64,
        adam: &mut Adam,
    ) -> Result<MetricsRow> {
        let streams: Vec<Stream> = image
            .iter()
            .map(|&tokens| Stream { tokens, modality: Modality::Image })
            .chain(text.iter().map(|&tokens| Stream { tokens, modality: Modality::Text }))
            .collect();
        let (grads, row) = {
            let mut g = Graph::new();
            let noise_std = self.params.config.moe.router_noise_std;
            let noise = Some(RouterNoise { rng: &mut self.rng, std: noise_std });
            let f = forward(&mut g, &self.params, &streams, |i| stage.trains(i), noise)?;
            let (ce, ce_parts) = modality_cross_entropy(&mut g, f.logits, &streams)?;
            let aux = aux_loss_var(&mut g, &f.routing)?;
            let weighted = g.scale(aux, self.config.aux_weight as f32)?;
            let loss = g.add(ce, weighted)?;
            let aux_value = g.value(aux).item()?.as_f64();
            let (importance, load) = match f.routing.last() {
                Some(l) => (g.value(l.importance).data().iter().map(|x| x.as_f64()).collect(), l.load.clone()),
                None => (Vec::new(), Vec::new()),
            };
            g.backward(loss)?;
            let mut vars: Vec<(bool, Var)> = Vec::new();
            f.params.visit(|i, &v| vars.push((stage.trains(i), v)));
            let grads: Vec<Option<Vec<f32>>> =
                vars.into_iter().map(|(t, v)| if t { g.take_grad(v) } else { None }).collect();
            let row = MetricsRow {
                step: self.step,
                stage: stage.number(),
                lr,
                ce_image_nats: ce_parts[0],
                ce_text_nats: ce_parts[1],
                aux_loss: aux_value,
                expert_importance: importance,
                expert_load: load,
            };
            (grads, row)
        };
        self.apply(grads, lr, adam)?;
        self.step += 1;
        Ok(row)
    }

    /// Clips the global gradient norm, then takes one Adam step.
    fn apply(&mut self, grads: Vec<Option<Vec<f32>>>, lr: f64, adam: &mut Adam) -> Result<()> {
        let c = &self.config;
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let clip = if norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        adam.t += 1;
        let correct1 = 1.0 - c.beta1.powi(adam.t);
        let correct2 = 1.0 - c.beta2.powi(adam.t);
        for (n, ((_, t), grad)) in self.params.entries_mut().into_iter().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut adam.m[n], &mut adam.v[n]);
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                let gj = grad[j] as f64 * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = lr * (m[j] / correct1) / ((v[j] / correct2).sqrt() + c.adam_eps);
                *x = (*x as f64 - update) as f32;
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over all rows, plus the per-modality means in nats
/// (NaN for a modality absent from the batch).
fn modality_cross_entropy<F: Real>(g: &mut Graph<'_, F>, logits: Var, streams: &[Stream]) -> Result<(Var, [f64; 2])> {
    let total: usize = streams.iter().map(|s| s.tokens.len()).sum();
    let mut parts = [f64::NAN; 2];
    let mut loss: Option<Var> = None;
    let mut row = 0;
    let mut i = 0;
    while i < streams.len() {
        let m = streams[i].modality;
        let mut targets = Vec::new();
        while i < streams.len() && streams[i].modality == m {
            targets.extend_from_slice(streams[i].tokens);
            i += 1;
        }
        let rows = if row == 0 && targets.len() == total {
            logits
        } else {
            g.slice_rows(logits, row, row + targets.len())?
        };
        let ce = g.cross_entropy(rows, &targets, None)?;
        parts[m.index()] = g.value(ce).item()?.as_f64();
        let weighted = g.scale(ce, F::from_f64_lossy(targets.len() as f64 / total as f64))?;
        loss = Some(match loss {
            Some(l) => g.add(l, weighted)?,
            None => weighted,
        });
        row += targets.len();
    }
    let loss = loss.ok_or(Error::EmptyCorpus)?;
    Ok((loss, parts))
}

/// Held-out statistics of a model, without router noise.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub ce_image_nats: f64,
    pub ce_text_nats: f64,
    /// Router importance summed over all evaluated tokens, last expert
    /// layer.
    pub importance: Vec<f64>,
    pub importance_cv2: f64,
}

/// Token-weighted cross-entropy of every window, evaluated `batch` windows
/// at a time.
pub fn evaluate(params: &Params<f32>, data: &TrainingData, batch: usize) -> Result<EvalStats> {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    let mut importance: Vec<f64> = Vec::new();
    for m in Modality::ALL {
        for chunk in data.windows(m).chunks(batch.max(1)) {
            let streams: Vec<Stream> = chunk.iter().map(|w| Stream { tokens: w, modality: m }).collect();
            let mut g = Graph::new();
            let f = forward(&mut g, params, &streams, |_| false, None)?;
            let (_, parts) = modality_cross_entropy(&mut g, f.logits, &streams)?;
            let tokens: usize = chunk.iter().map(Vec::len).sum();
            sums[m.index()] += parts[m.index()] * tokens as f64;
            counts[m.index()] += tokens;
            if let Some(layer) = f.routing.last() {
                let col = g.value(layer.importance).data();
                importance.resize(col.len(), 0.0);
                for (acc, &x) in importance.iter_mut().zip(col) {
                    *acc += x as f64;
                }
            }
        }
    }
    if counts.contains(&0) {
        return Err(Error::EmptyCorpus);
    }
    let importance_cv2 = if importance.is_empty() { 0.0 } else { cv_squared(&importance).unwrap_or(0.0) };
    Ok(EvalStats {
        ce_image_nats: sums[0] / counts[0] as f64,
        ce_text_nats: sums[1] / counts[1] as f64,
        importance,
        importance_cv2,
    })
}

#[cfg(test)]
mod tests;
