use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bimodal::codec::{eval_corpus, modality_for_path, Codec};
use bimodal::model::{ModelConfig, MoeConfig, Params};
use bimodal::tokenizer::{tokenize_image, Image, Modality, Vocab, IMAGE_VOCAB};
use bimodal::trainer::{write_metrics_csv, Checkpoint, TrainConfig, Trainer, TrainingData};
use bimodal::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "bimodal", version, about = "Learned lossless compression for images and text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Image,
    Text,
    AutoByExtension,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a BPE text vocabulary.
    BpeTrain {
        /// Training text.
        input: PathBuf,
        /// Text vocabulary size, including the 256 byte tokens.
        #[arg(long, default_value_t = 16384)]
        size: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint, a merged copy next to it
    /// (`*.merged.dckp`) and a metrics CSV.
    Train {
        /// JSON run configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of P6 PPM training images.
        #[arg(long)]
        images: PathBuf,
        /// Training text file.
        #[arg(long)]
        text: PathBuf,
        /// Vocabulary from `bpe-train`.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Overrides both the model and the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fold the reparameterization branches into the projections.
    Merge { input: PathBuf, output: PathBuf },
    Compress {
        input: PathBuf,
        /// Defaults to the input path with `.dca` appended.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Merged checkpoint.
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "auto-by-extension")]
        modality: ModalityArg,
        /// Code over the full vocabulary (testing only; decompress needs it too).
        #[arg(long)]
        no_mask: bool,
    },
    Decompress {
        input: PathBuf,
        /// Defaults to the input path without `.dca`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(long)]
        no_mask: bool,
    },
    /// Compress and verify every file under `DIR/image` and `DIR/text`.
    Eval {
        dir: PathBuf,
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(long)]
        no_mask: bool,
    },
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelShape,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ModelShape {
    n_blocks: usize,
    embed_dim: usize,
    mlp_hidden_factor: usize,
    moe: MoeConfig,
    /// Defaults to four times `embed_dim`.
    reparam_rank: Option<usize>,
    seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { n_blocks: 2, embed_dim: 96, mlp_hidden_factor: 4, moe: MoeConfig::default(), reparam_rank: None, seed: 0 }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 2,
        Error::RoundTrip(_) => 4,
        _ => 3,
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, data: &[u8]) -> Result<(), Error> {
    fs::write(path, data).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::BpeTrain { input, size, out } => {
            let vocab = Vocab::train(&read(&input)?, size)?;
            let mut bytes = Vec::new();
            vocab.write_to(&mut bytes)?;
            write(&out, &bytes)?;
            eprintln!("{} merges, text vocabulary {}", vocab.merges().len(), vocab.text_size());
        }
        Command::Train { config, images, text, vocab, out, seed, metrics } => {
            let mut cfg: RunConfig = match config {
                Some(p) => serde_json::from_slice(&read(&p)?)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
            }
            let vocab = Vocab::read_from(read(&vocab)?.as_slice())?;
            let mut model = ModelConfig::new(cfg.model.n_blocks, cfg.model.embed_dim, IMAGE_VOCAB + vocab.text_size())
                .with_seed(cfg.model.seed);
            model.mlp_hidden_factor = cfg.model.mlp_hidden_factor;
            model.moe = cfg.model.moe.clone();
            if let Some(r) = cfg.model.reparam_rank {
                model.reparam_rank = r;
            }

            let mut paths: Vec<PathBuf> = fs::read_dir(&images)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            paths.retain(|p| modality_for_path(p) == Modality::Image);
            paths.sort();
            let mut sequences = Vec::with_capacity(paths.len() + 1);
            for p in &paths {
                sequences.push(tokenize_image(&Image::read_ppm(read(p)?.as_slice())?));
            }
            sequences.push(vocab.encode_text(&read(&text)?));
            let data = TrainingData::from_sequences(&sequences, cfg.train.seq_len, model.vocab_total)?;

            let params = Params::<f32>::init(&model)?;
            let mut trainer = Trainer::new(params, cfg.train.clone(), &data)?;
            eprintln!(
                "{} image and {} text windows, {} steps per epoch",
                data.image.len(),
                data.text.len(),
                trainer.steps_per_epoch()
            );
            trainer.run()?;
            for e in trainer.epoch_summaries() {
                eprintln!(
                    "stage {} epoch {}: image {:.4} nats/token, text {:.4} nats/token",
                    e.stage, e.epoch, e.ce_image_nats, e.ce_text_nats
                );
            }
            let mut csv = Vec::new();
            write_metrics_csv(trainer.metrics(), &mut csv)?;
            write(&metrics.unwrap_or_else(|| out.with_extension("metrics.csv")), &csv)?;
            let ckpt = Checkpoint {
                step: trainer.step(),
                rng: trainer.rng().clone(),
                train: Some(cfg.train),
                ..Checkpoint::new(trainer.into_params(), vocab)?
            };
            write(&out, &ckpt.to_bytes()?)?;
            write(&out.with_extension("merged.dckp"), &ckpt.merged()?.to_bytes()?)?;
        }
        Command::Merge { input, output } => {
            let ckpt = Checkpoint::from_bytes(&read(&input)?)?;
            write(&output, &ckpt.merged()?.to_bytes()?)?;
        }
        Command::Compress { input, out, checkpoint, modality, no_mask } => {
            let ckpt = Checkpoint::from_bytes(&read(&checkpoint)?)?;
            let codec = Codec::new(&ckpt)?.with_mask(!no_mask);
            let modality = match modality {
                ModalityArg::Image => Modality::Image,
                ModalityArg::Text => Modality::Text,
                ModalityArg::AutoByExtension => modality_for_path(&input),
            };
            let data = read(&input)?;
            let archive = codec.compress(&data, modality)?;
            write(&out.unwrap_or_else(|| with_suffix(&input, ".dca")), &archive)?;
        }
        Command::Decompress { input, out, checkpoint, no_mask } => {
            let ckpt = Checkpoint::from_bytes(&read(&checkpoint)?)?;
            let codec = Codec::new(&ckpt)?.with_mask(!no_mask);
            let data = codec.decompress(&read(&input)?)?;
            let out = out.unwrap_or_else(|| match input.extension() {
                Some(e) if e == "dca" => input.with_extension(""),
                _ => with_suffix(&input, ".out"),
            });
            write(&out, &data)?;
        }
        Command::Eval { dir, checkpoint, no_mask } => {
            let ckpt = Checkpoint::from_bytes(&read(&checkpoint)?)?;
            let codec = Codec::new(&ckpt)?.with_mask(!no_mask);
            let report = eval_corpus(&codec, &dir)?;
            for f in &report.files {
                println!(
                    "{}\t{}\t{}\t{}\t{:.4}",
                    f.path.display(),
                    f.modality.name(),
                    f.original_bytes,
                    f.compressed_bytes,
                    f.bits_per_byte()
                );
            }
            for m in [Some(Modality::Image), Some(Modality::Text), None] {
                let name = m.map_or("all", Modality::name);
                let Some(bpb) = report.aggregate(m) else { continue };
                match report.throughput_kbps(m) {
                    Some(kbps) => println!("{name}: {bpb:.4} bits/Byte, {kbps:.1} KB/s"),
                    None => println!("{name}: {bpb:.4} bits/Byte"),
                }
            }
        }
    }
    Ok(())
}
