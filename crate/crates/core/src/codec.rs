//! Archive format and the model-driven compressor.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::entropy_coder::{ac_decode, ac_encode, quantize_pmf, Bitstream, QuantizedPmf};
use crate::error::{Error, Result};
use crate::model::Session;
use crate::tokenizer::{detokenize_image, tokenize_image, Image, Modality};
use crate::trainer::Checkpoint;

const MAGIC: &[u8; 4] = b"DCA1";
pub const ARCHIVE_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub version: u8,
    pub modality: Modality,
    pub model_hash: u64,
    /// Bytes of the original: file length for text, raw RGB bytes for
    /// images.
    pub original_len: u64,
    /// Present exactly for images.
    pub image: Option<ImageDims>,
    pub token_count: u64,
}

impl ArchiveHeader {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(39);
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.push(self.modality.code());
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        out.extend_from_slice(&self.original_len.to_le_bytes());
        if let Some(d) = self.image {
            out.extend_from_slice(&d.width.to_le_bytes());
            out.extend_from_slice(&d.height.to_le_bytes());
            out.push(d.channels);
        }
        out.extend_from_slice(&self.token_count.to_le_bytes());
        out
    }

    /// Parses a header, returning it and the remaining bytes.
    pub fn parse(data: &[u8]) -> Result<(Self, &[u8])> {
        let mut r = data;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Format("archive header is truncated".into()));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("not an archive (bad magic)".into()));
        }
        let version = take(1)?[0];
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let modality = Modality::from_code(take(1)?[0])?;
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let model_hash = u64_at(take(8)?);
        let original_len = u64_at(take(8)?);
        let image = match modality {
            Modality::Image => {
                let width = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
                let height = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
                let channels = take(1)?[0];
                Some(ImageDims { width, height, channels })
            }
            Modality::Text => None,
        };
        let token_count = u64_at(take(8)?);
        let header = ArchiveHeader { version, modality, model_hash, original_len, image, token_count };
        Ok((header, r))
    }
}

/// Picks the modality from a file name: `.ppm` is an image, anything else
/// text.
pub fn modality_for_path(path: &Path) -> Modality {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => Modality::Image,
        _ => Modality::Text,
    }
}

/// Softmax of `logits` in f64, quantized for the coder.
fn logits_to_pmf(logits: &[f32], offset: u32) -> Result<QuantizedPmf> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let mut p: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    quantize_pmf(&p, offset)
}

/// Tokens of one input plus what the header records about it.
struct Prepared {
    ids: Vec<u32>,
    original_len: u64,
    image: Option<ImageDims>,
}

/// Compressor bound to one merged checkpoint.
pub struct Codec<'c> {
    checkpoint: &'c Checkpoint,
    hash: u64,
    mask: bool,
}

impl<'c> Codec<'c> {
    pub fn new(checkpoint: &'c Checkpoint) -> Result<Self> {
        let hash = checkpoint.model_hash()?;
        Ok(Codec { checkpoint, hash, mask: true })
    }

    /// Turns the modality mask off or on. Archives must be decoded with the
    /// setting they were written with.
    pub fn with_mask(mut self, mask: bool) -> Self {
        self.mask = mask;
        self
    }

    pub fn model_hash(&self) -> u64 {
        self.hash
    }

    fn prepare(&self, data: &[u8], modality: Modality) -> Result<Prepared> {
        match modality {
            Modality::Text => Ok(Prepared {
                ids: self.checkpoint.vocab.encode_text(data).ids,
                original_len: data.len() as u64,
                image: None,
            }),
            Modality::Image => {
                let image = Image::read_ppm(data)?;
                if image.to_ppm() != data {
                    return Err(Error::Format(
                        "images must be plain P6 files: header \"P6\\n<w> <h>\\n255\\n\", no comments or trailing bytes"
                            .into(),
                    ));
                }
                let dims = ImageDims {
                    width: u32::try_from(image.width()).map_err(|_| Error::Format("image too wide".into()))?,
                    height: u32::try_from(image.height()).map_err(|_| Error::Format("image too tall".into()))?,
                    channels: 3,
                };
                Ok(Prepared {
                    ids: tokenize_image(&image).ids,
                    original_len: image.pixels().len() as u64,
                    image: Some(dims),
                })
            }
        }
    }

    /// Next-token PMF source for one stream.
    fn pmfs(&self, modality: Modality) -> impl FnMut(usize, &[u32]) -> Result<QuantizedPmf> + '_ {
        let params = &self.checkpoint.params;
        let total = params.config.vocab_total;
        let columns = if self.mask { modality.id_range(total) } else { 0..total };
        let mut session = Session::new(params, modality);
        move |t, history| {
            let prev = t.checked_sub(1).map(|i| history[i]);
            let logits = session.step(prev, columns.clone())?;
            logits_to_pmf(logits, columns.start as u32)
        }
    }

    pub fn compress(&self, data: &[u8], modality: Modality) -> Result<Vec<u8>> {
        let prepared = self.prepare(data, modality)?;
        let bits = ac_encode(&prepared.ids, self.pmfs(modality))?;
        let header = ArchiveHeader {
            version: ARCHIVE_VERSION,
            modality,
            model_hash: self.hash,
            original_len: prepared.original_len,
            image: prepared.image,
            token_count: prepared.ids.len() as u64,
        };
        let mut out = header.to_bytes();
        bits.write_to(&mut out)?;
        Ok(out)
    }

    pub fn decompress(&self, archive: &[u8]) -> Result<Vec<u8>> {
        let (header, body) = ArchiveHeader::parse(archive)?;
        if header.model_hash != self.hash {
            return Err(Error::ModelMismatch { archive: header.model_hash, checkpoint: self.hash });
        }
        let bits = Bitstream::parse(body)?;
        let count = usize::try_from(header.token_count).map_err(|_| Error::Corrupt)?;
        // With counts of at most 65535/65536 a token costs over 1/45427 bit.
        if count as u128 > (bits.bit_len as u128 + 64) * 45_427 {
            return Err(Error::Corrupt);
        }
        let ids = ac_decode(&bits, self.pmfs(header.modality), count)?;
        let out = match header.image {
            Some(d) => {
                if d.channels != 3 {
                    return Err(Error::Channels(d.channels as usize));
                }
                let image = detokenize_image(&ids, d.width as usize, d.height as usize)?;
                if image.pixels().len() as u64 != header.original_len {
                    return Err(Error::Corrupt);
                }
                image.to_ppm()
            }
            None => {
                let text = self.checkpoint.vocab.decode_text(&ids)?;
                if text.len() as u64 != header.original_len {
                    return Err(Error::Corrupt);
                }
                text
            }
        };
        Ok(out)
    }

    /// Ideal code length of every token in bits, `−log₂(count / 2¹⁶)`.
    pub fn token_costs(&self, data: &[u8], modality: Modality) -> Result<Vec<f64>> {
        let ids = self.prepare(data, modality)?.ids;
        let mut pmfs = self.pmfs(modality);
        let mut costs = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            costs.push(pmfs(t, &ids[..t])?.code_length(ids[t]));
        }
        Ok(costs)
    }
}

/// Size of the data an archive reconstructs, as counted for bits/Byte.
pub fn original_size(data: &[u8], modality: Modality) -> Result<u64> {
    match modality {
        Modality::Text => Ok(data.len() as u64),
        Modality::Image => Ok(Image::read_ppm(data)?.pixels().len() as u64),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileReport {
    pub path: PathBuf,
    pub modality: Modality,
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub seconds: f64,
}

impl FileReport {
    pub fn bits_per_byte(&self) -> f64 {
        bits_per_byte(self.compressed_bytes, self.original_bytes)
    }
}

/// `8 · compressed / original`.
pub fn bits_per_byte(compressed: u64, original: u64) -> f64 {
    8.0 * compressed as f64 / original as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub files: Vec<FileReport>,
}

impl EvalReport {
    fn select(&self, modality: Option<Modality>) -> impl Iterator<Item = &FileReport> {
        self.files.iter().filter(move |f| modality.is_none_or(|m| f.modality == m))
    }

    /// Total compressed bits over total original bytes; `None` when there
    /// is nothing to measure.
    pub fn aggregate(&self, modality: Option<Modality>) -> Option<f64> {
        let (c, o) = self.select(modality).fold((0, 0), |(c, o), f| (c + f.compressed_bytes, o + f.original_bytes));
        (o > 0).then(|| bits_per_byte(c, o))
    }

    /// Original kilobytes compressed per second.
    pub fn throughput_kbps(&self, modality: Option<Modality>) -> Option<f64> {
        let (b, s) = self.select(modality).fold((0, 0.0), |(b, s), f| (b + f.original_bytes, s + f.seconds));
        (s > 0.0).then(|| b as f64 / 1000.0 / s)
    }
}

/// Compresses, decompresses and verifies every file under `dir/image` and
/// `dir/text`, in name order.
pub fn eval_corpus(codec: &Codec<'_>, dir: &Path) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for m in Modality::ALL {
        let sub = dir.join(m.name());
        if !sub.is_dir() {
            continue;
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&sub)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.is_file());
        paths.sort();
        for path in paths {
            let data = fs::read(&path)?;
            let start = Instant::now();
            let archive = codec.compress(&data, m)?;
            let seconds = start.elapsed().as_secs_f64();
            match codec.decompress(&archive) {
                Ok(back) if back == data => {}
                _ => return Err(Error::RoundTrip(path)),
            }
            report.files.push(FileReport {
                original_bytes: original_size(&data, m)?,
                compressed_bytes: archive.len() as u64,
                path,
                modality: m,
                seconds,
            });
        }
    }
    if report.files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(report)
}
