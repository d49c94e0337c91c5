use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::*;
use crate::model::{ModelConfig, RoutingRecord};
use crate::numerics::Tensor;
use crate::tokenizer::{tokenize_image, Image, Vocab, IMAGE_VOCAB};

fn record(scores: &[f64], selected: &[usize]) -> RoutingRecord {
    RoutingRecord { scores: scores.to_vec(), selected: selected.to_vec(), weights: Vec::new() }
}

#[test]
fn balanced_routing_has_no_penalty() {
    let records = [record(&[0.5, 0.25, 0.25], &[0, 1]), record(&[0.25, 0.5, 0.25], &[1, 2]), record(&[0.25, 0.25, 0.5], &[0, 2])];
    let stats = aux_moe_loss(&records).unwrap();
    assert_eq!(stats.importance, vec![1.0, 1.0, 1.0]);
    assert_eq!(stats.load, vec![2.0, 2.0, 2.0]);
    assert_eq!(stats.value, 0.0);
}

#[test]
fn skewed_importance_and_dead_expert() {
    // importance [2, 1, 1], load [2, 2, 0]
    let records = [record(&[1.0, 0.0, 0.0], &[0, 1]), record(&[1.0, 0.5, 0.5], &[0, 1])];
    let stats = aux_moe_loss(&records).unwrap();
    assert_eq!(stats.importance, vec![2.0, 0.5, 0.5]);
    let records = [record(&[1.0, 0.5, 0.5], &[0, 1]), record(&[1.0, 0.5, 0.5], &[0, 1])];
    let stats = aux_moe_loss(&records).unwrap();
    assert_eq!(stats.importance, vec![2.0, 1.0, 1.0]);
    let oracle = |x: &[f64]| {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64 / (mean * mean)
    };
    assert!((oracle(&[2.0, 1.0, 1.0]) - 0.125).abs() < 1e-15);
    assert!((oracle(&[2.0, 2.0, 0.0]) - 0.5).abs() < 1e-15);
    assert!((stats.value - 0.625).abs() < 1e-12, "{}", stats.value);
    assert!(aux_moe_loss(&[]).is_err());
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::MIN, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[test]
fn total_loss_matches_a_scalar_evaluation() {
    // V = 4, T = 2, three experts.
    let logits_v = [0.3, -1.2, 2.0, 0.1, 1.5, 0.0, -0.4, 0.9];
    let scores_v = [0.6, 0.3, 0.1, 0.2, 0.2, 0.6];
    let targets = [2u32, 3];
    let logits_t = Tensor::from_f64([2, 4], &logits_v).unwrap();
    let scores_t = Tensor::from_f64([2, 3], &scores_v).unwrap();
    let lambda = 0.25;
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(&logits_t);
    let scores = g.leaf(&scores_t);
    let importance = g.column_sum(scores).unwrap();
    let routing = [crate::model::LayerRouting { importance, load: vec![1.0, 1.0, 2.0], records: Vec::new() }];
    let loss = total_loss(&mut g, logits, &targets, &routing, lambda).unwrap();

    let ce = (0..2).map(|t| log_sum_exp(&logits_v[4 * t..4 * t + 4]) - logits_v[4 * t + targets[t] as usize]).sum::<f64>() / 2.0;
    let cv2 = |x: [f64; 3]| {
        let mean = (x[0] + x[1] + x[2]) / 3.0;
        x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0 / (mean * mean)
    };
    let imp = [0.8, 0.5, 0.7];
    let expect = ce + lambda * (cv2(imp) + cv2([1.0, 1.0, 2.0]));
    assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-12);

    let mut g = Graph::<f64>::new();
    let logits = g.leaf(&logits_t);
    let scores = g.leaf(&scores_t);
    let importance = g.column_sum(scores).unwrap();
    let routing = [crate::model::LayerRouting { importance, load: vec![1.0, 1.0, 2.0], records: Vec::new() }];
    let zero = total_loss(&mut g, logits, &targets, &routing, 0.0).unwrap();
    let ce_only = g.cross_entropy(logits, &targets, None).unwrap();
    assert_eq!(g.value(zero).item().unwrap(), g.value(ce_only).item().unwrap());
}

#[test]
fn balanced_routing_leaves_cross_entropy_unchanged() {
    let logits_t = Tensor::from_f64([1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
    let scores_t = Tensor::from_f64([2, 3], &[0.5, 0.25, 0.25, 0.5, 0.75, 0.75]).unwrap();
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(&logits_t);
    let scores = g.leaf(&scores_t);
    let importance = g.column_sum(scores).unwrap();
    let routing = [crate::model::LayerRouting { importance, load: vec![4.0; 3], records: Vec::new() }];
    let loss = total_loss(&mut g, logits, &[1], &routing, 0.01).unwrap();
    let ce = g.cross_entropy(logits, &[1], None).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), g.value(ce).item().unwrap());
}

fn tiny_config(d: usize) -> ModelConfig {
    ModelConfig::new(2, d, IMAGE_VOCAB + 256).with_seed(3)
}

#[test]
fn router_gradient_of_total_loss_matches_finite_differences() {
    const EPS: f64 = 1e-5;
    let mut p = Params::<f64>::init(&tiny_config(8)).unwrap();
    let mut rng = Xoshiro256StarStar::seed_from_u64(4);
    for (_, t) in p.entries_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let image = [10u32, 200, 31, 90];
    let text = [300u32, 257, 511, 400];
    let streams = [
        Stream { tokens: &image, modality: Modality::Image },
        Stream { tokens: &text, modality: Modality::Text },
    ];
    let targets: Vec<u32> = image.iter().chain(&text).copied().collect();
    let lambda = 0.5;
    let loss_of = |params: &Params<f64>| {
        let mut g = Graph::new();
        let f = forward(&mut g, params, &streams, |_| false, None).unwrap();
        let l = total_loss(&mut g, f.logits, &targets, &f.routing, lambda).unwrap();
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let f = forward(&mut g, &p, &streams, |i| i.name.contains("moe"), None).unwrap();
    let loss = total_loss(&mut g, f.logits, &targets, &f.routing, lambda).unwrap();
    g.backward(loss).unwrap();
    let mut vars = Vec::new();
    f.params.visit(|i, &v| vars.push((i.name.clone(), v)));
    let analytic: Vec<(String, Option<Vec<f64>>)> = vars.iter().map(|(n, v)| (n.clone(), g.grad(*v).map(<[f64]>::to_vec))).collect();
    let router = analytic.iter().position(|(n, _)| n.ends_with("moe.router")).unwrap();
    let grad = analytic[router].1.as_ref().unwrap();
    for j in 0..grad.len() {
        let nudge = |delta: f64| {
            let mut q = p.clone();
            q.entries_mut()[router].1.data_mut()[j] += delta;
            loss_of(&q)
        };
        let numeric = (nudge(EPS) - nudge(-EPS)) / (2.0 * EPS);
        let rel = (grad[j] - numeric).abs() / grad[j].abs().max(numeric.abs()).max(1e-6);
        assert!(rel <= 1e-4, "router[{j}]: {} vs {numeric}", grad[j]);
    }
    // Only tracked tensors received gradients.
    assert!(analytic.iter().all(|(n, g)| g.is_some() == n.contains("moe")));
}

#[test]
fn cosine_schedule_endpoints_and_shape() {
    let (max, min) = (1e-4, 5e-6);
    assert_eq!(cosine_lr(0, 9, max, min), max);
    assert!((cosine_lr(8, 9, max, min) - min).abs() < 1e-18);
    assert!((cosine_lr(4, 9, max, min) - (max + min) / 2.0).abs() < 1e-15);
    assert_eq!(cosine_lr(0, 1, max, min), max);
    let lrs: Vec<f64> = (0..50).map(|s| cosine_lr(s, 50, max, min)).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn windows_split_sequences() {
    let vocab = Vocab::bytes_only();
    let text = vocab.encode_text(b"abcdefghij");
    let img = tokenize_image(&Image::new(1, 1, 3, vec![1, 2, 3]).unwrap());
    let data = TrainingData::from_sequences(&[text, img], 4, vocab.total()).unwrap();
    assert_eq!(data.text.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    assert_eq!(data.image.len(), 16 * 16 * 3 / 4);
    assert_eq!(data.pairs_per_epoch(), 3);
}

/// Repetitive text and smooth images: easy to learn.
fn synthetic_data(pairs: usize, seq_len: usize, seed: u64) -> TrainingData {
    let vocab = Vocab::bytes_only();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let phrase = b"the cat sat on the mat. ";
    let mut text = Vec::new();
    while text.len() < pairs * seq_len {
        text.extend_from_slice(phrase);
    }
    let mut seqs = vec![vocab.encode_text(&text[..pairs * seq_len])];
    let mut image_tokens = 0;
    while image_tokens < pairs * seq_len {
        let base = rng.random_range(0..200u32);
        let pixels: Vec<u8> = (0..16 * 16).flat_map(|i| {
            let v = (base + (i % 16) as u32) as u8;
            [v, v / 2, 255 - v]
        }).collect();
        let s = tokenize_image(&Image::new(16, 16, 3, pixels).unwrap());
        image_tokens += s.ids.len();
        seqs.push(s);
    }
    let mut data = TrainingData::from_sequences(&seqs, seq_len, IMAGE_VOCAB + 256).unwrap();
    data.image.truncate(pairs);
    data.text.truncate(pairs);
    data
}

fn quick_config(s1: usize, s2: usize, s3: usize) -> TrainConfig {
    TrainConfig {
        epochs: StageEpochs { s1, s2, s3 },
        lr_stage1: 1e-3,
        lr_stage2: 1e-3,
        lr_max: 3e-3,
        lr_min: 1e-4,
        seq_len: 64,
        batch_pairs: 1,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn stages_freeze_their_groups() {
    let data = synthetic_data(4, 64, 1);
    let params = Params::<f32>::init(&tiny_config(16)).unwrap();
    let mut t = Trainer::new(params, quick_config(1, 1, 0), &data).unwrap();
    let sums = |t: &Trainer| {
        (group_checksum(t.params(), ParamGroup::Shared), group_checksum(t.params(), ParamGroup::ModalitySpecific))
    };
    let (shared0, specific0) = sums(&t);
    t.run_stage(Stage::ModalitySpecific).unwrap();
    let (shared1, specific1) = sums(&t);
    assert_eq!(shared1, shared0);
    assert_ne!(specific1, specific0);
    t.run_stage(Stage::Shared).unwrap();
    let (shared2, specific2) = sums(&t);
    assert_eq!(specific2, specific1);
    assert_ne!(shared2, shared1);
    assert_eq!(t.step(), 8);
}

#[test]
fn training_reduces_loss_on_repetitive_data() {
    let data = synthetic_data(20, 64, 2);
    let params = Params::<f32>::init(&tiny_config(32)).unwrap();
    let before = evaluate(&params, &data, 8).unwrap();
    let mut t = Trainer::new(params, quick_config(0, 0, 10), &data).unwrap();
    t.run().unwrap();
    assert_eq!(t.step(), 200);
    let after = evaluate(t.params(), &data, 8).unwrap();
    let total = |s: &EvalStats| s.ce_image_nats + s.ce_text_nats;
    assert!(total(&after) <= 0.7 * total(&before), "{before:?} -> {after:?}");
    assert_eq!(t.epoch_summaries().len(), 10);

    let lrs: Vec<f64> = t.metrics().iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], 3e-3);
    assert!((lrs[199] - 1e-4).abs() < 1e-12);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn metrics_csv_layout() {
    let data = synthetic_data(2, 32, 3);
    let params = Params::<f32>::init(&tiny_config(8)).unwrap();
    let mut t = Trainer::new(params, quick_config(1, 0, 1), &data).unwrap();
    t.run().unwrap();
    let mut csv = Vec::new();
    write_metrics_csv(t.metrics(), &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "step,stage,lr,ce_image_nats,ce_text_nats,aux_loss,expert_importance_0,expert_importance_1,\
         expert_importance_2,expert_load_0,expert_load_1,expert_load_2"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,1,"));
    assert!(lines[4].starts_with("3,3,"));
    for l in &lines[1..] {
        let fields: Vec<f64> = l.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 12);
        // Two of three experts per token.
        assert_eq!(fields[9] + fields[10] + fields[11], 2.0 * 64.0);
    }
}

#[test]
fn training_is_deterministic() {
    let data = synthetic_data(3, 32, 4);
    let run = || {
        let params = Params::<f32>::init(&tiny_config(8)).unwrap();
        let mut t = Trainer::new(params, quick_config(1, 1, 2), &data).unwrap();
        t.run().unwrap();
        let mut c = Checkpoint::new(t.params().clone(), Vocab::bytes_only()).unwrap();
        c.step = t.step();
        c.rng = t.rng().clone();
        c.train = Some(t.config().clone());
        c.to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn trainer_rejects_bad_input() {
    let params = Params::<f32>::init(&tiny_config(8)).unwrap();
    let empty = TrainingData { image: vec![vec![1, 2]], text: Vec::new() };
    assert!(matches!(Trainer::new(params.clone(), TrainConfig::default(), &empty), Err(Error::EmptyCorpus)));
    let data = synthetic_data(1, 16, 5);
    let merged = params.merge_reparam().unwrap();
    assert!(matches!(Trainer::new(merged, TrainConfig::default(), &data), Err(Error::Merged(_))));
    let bad = TrainConfig { aux_weight: -1.0, ..TrainConfig::default() };
    assert!(matches!(Trainer::new(params, bad, &data), Err(Error::Config(_))));
}

fn sample_checkpoint() -> Checkpoint {
    let mut p = Params::<f32>::init(&tiny_config(8)).unwrap();
    let mut rng = Xoshiro256StarStar::seed_from_u64(6);
    for (_, t) in p.entries_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.1f32..0.1);
        }
    }
    let mut c = Checkpoint::new(p, Vocab::bytes_only()).unwrap();
    c.step = 1234;
    c.rng.next_u64();
    c.train = Some(TrainConfig { lr_max: 0.1 + 0.2, ..TrainConfig::default() });
    c
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let c = sample_checkpoint();
    let bytes = c.to_bytes().unwrap();
    assert_eq!(&bytes[..6], b"DCKP\x01\x00");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let mut r1 = back.rng.clone();
    let mut r2 = c.rng.clone();
    assert_eq!(r1.next_u64(), r2.next_u64());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dckp");
    c.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), c);
}

#[test]
fn merged_checkpoints_are_flagged_and_inference_only() {
    let c = sample_checkpoint();
    assert!(c.model_hash().is_err());
    let m = c.merged().unwrap();
    let bytes = m.to_bytes().unwrap();
    assert_eq!(bytes[5], 1);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(back.is_merged());
    assert_eq!(back.model_hash().unwrap(), m.model_hash().unwrap());
    let data = synthetic_data(1, 16, 7);
    assert!(matches!(Trainer::new(back.params, TrainConfig::default(), &data), Err(Error::Merged(_))));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    let mut short = bytes.clone();
    short.pop();
    assert!(matches!(Checkpoint::from_bytes(&short), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 4]);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(Checkpoint::from_bytes(&version).is_err());
    // Claiming "merged" while the manifest lists branches.
    let mut flag = bytes.clone();
    flag[5] = 1;
    assert!(Checkpoint::from_bytes(&flag).is_err());
    // A shape edited in the manifest.
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"shape\":[512,8]").unwrap();
    let mut shape = bytes.clone();
    shape[at + 10] = b'3';
    assert!(Checkpoint::from_bytes(&shape).is_err());
    assert!(Checkpoint::from_bytes(b"DCK").is_err());
}

#[test]
fn vocab_must_match_model() {
    let p = Params::<f32>::init(&tiny_config(8)).unwrap();
    let vocab = Vocab::from_merges(vec![(97, 98)]).unwrap();
    assert!(Checkpoint::new(p, vocab).is_err());
}

#[test]
fn fnv_reference_values() {
    assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
    assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
}
