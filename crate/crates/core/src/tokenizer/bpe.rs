use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io::{Read, Write};

use super::{SourceMeta, TokenSequence, IMAGE_VOCAB};
use crate::error::{Error, Result};
use crate::tokenizer::Modality;

/// Longest pre-tokenized chunk in bytes. Merges never cross chunks.
pub const MAX_CHUNK: usize = 64;

const MAGIC: &[u8; 4] = b"DCVB";
const VERSION: u8 = 1;

type Pair = (u32, u32);

/// Splits text into the chunks merges operate within.
///
/// A chunk starts at each space that follows a non-space byte, and every
/// newline is a chunk of its own. Chunks longer than [`MAX_CHUNK`] are cut.
pub fn pre_tokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 0..text.len() {
        let b = text[i];
        let boundary = i > start
            && (b == b'\n'
                || text[i - 1] == b'\n'
                || (b == b' ' && text[i - 1] != b' ')
                || i - start == MAX_CHUNK);
        if boundary {
            chunks.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

/// Byte-level BPE vocabulary. Local ids `0..256` are bytes; merge `i`
/// creates local id `256 + i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<Pair>,
    expansions: Vec<Vec<u8>>,
    ranks: HashMap<Pair, u32>,
}

impl Vocab {
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges is always valid")
    }

    /// Rebuilds a vocabulary from its merge table.
    pub fn from_merges(merges: Vec<Pair>) -> Result<Self> {
        let mut expansions: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, &(l, r)) in merges.iter().enumerate() {
            let id = 256 + i;
            if l as usize >= id || r as usize >= id {
                return Err(Error::Format(format!("merge {i} refers to an undefined token")));
            }
            if ranks.insert((l, r), id as u32).is_some() {
                return Err(Error::Format(format!("merge {i} repeats an earlier pair")));
            }
            let mut e = expansions[l as usize].clone();
            e.extend_from_slice(&expansions[r as usize]);
            expansions.push(e);
        }
        Ok(Vocab { merges, expansions, ranks })
    }

    /// Trains merges greedily until the text vocabulary holds `target`
    /// tokens or no adjacent pair is left. The most frequent pair wins;
    /// ties go to the lowest `(left, right)`.
    pub fn train(corpus: &[u8], target: usize) -> Result<Self> {
        if target < 256 {
            return Err(Error::VocabTooSmall(target));
        }
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut chunk_freq: HashMap<&[u8], i64> = HashMap::new();
        for c in pre_tokenize(corpus) {
            *chunk_freq.entry(c).or_default() += 1;
        }
        let mut chunks: Vec<(&[u8], i64)> = chunk_freq.into_iter().collect();
        chunks.sort_unstable();
        let mut words: Vec<Vec<u32>> = chunks
            .iter()
            .map(|(c, _)| c.iter().map(|&b| b as u32).collect())
            .collect();
        let freqs: Vec<i64> = chunks.iter().map(|&(_, f)| f).collect();

        let mut counts: HashMap<Pair, i64> = HashMap::new();
        let mut occurs: HashMap<Pair, Vec<usize>> = HashMap::new();
        for (w, word) in words.iter().enumerate() {
            for p in word.windows(2) {
                let pair = (p[0], p[1]);
                *counts.entry(pair).or_default() += freqs[w];
                occurs.entry(pair).or_default().push(w);
            }
        }
        let mut heap: BinaryHeap<(i64, Reverse<Pair>)> =
            counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

        let mut merges = Vec::new();
        let mut last_seen = vec![usize::MAX; words.len()];
        while 256 + merges.len() < target {
            let Some((count, Reverse(pair))) = heap.pop() else {
                break;
            };
            if counts.get(&pair).copied() != Some(count) || count <= 0 {
                continue;
            }
            let new_id = (256 + merges.len()) as u32;
            let mut delta: HashMap<Pair, i64> = HashMap::new();
            for w in occurs.remove(&pair).unwrap_or_default() {
                if last_seen[w] == merges.len() {
                    continue;
                }
                last_seen[w] = merges.len();
                let word = &words[w];
                if !word.windows(2).any(|p| (p[0], p[1]) == pair) {
                    continue;
                }
                let f = freqs[w];
                for p in word.windows(2) {
                    *delta.entry((p[0], p[1])).or_default() -= f;
                }
                let merged = merge_word(word, pair, new_id);
                for p in merged.windows(2) {
                    let q = (p[0], p[1]);
                    *delta.entry(q).or_default() += f;
                    if q.0 == new_id || q.1 == new_id {
                        occurs.entry(q).or_default().push(w);
                    }
                }
                words[w] = merged;
            }
            let mut changed: Vec<(Pair, i64)> = delta.into_iter().filter(|&(_, d)| d != 0).collect();
            changed.sort_unstable();
            for (q, d) in changed {
                let c = counts.entry(q).or_default();
                *c += d;
                if *c > 0 {
                    heap.push((*c, Reverse(q)));
                } else {
                    counts.remove(&q);
                }
            }
            merges.push(pair);
        }
        Self::from_merges(merges)
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    /// Number of text tokens: 256 bytes plus one per merge.
    pub fn text_size(&self) -> usize {
        256 + self.merges.len()
    }

    /// Size of the unified vocabulary.
    pub fn total(&self) -> usize {
        IMAGE_VOCAB + self.text_size()
    }

    /// Encodes text into unified ids (local id + 256).
    pub fn encode_text(&self, text: &[u8]) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.len() / 2);
        let mut cache: HashMap<&[u8], Vec<u32>> = HashMap::new();
        for chunk in pre_tokenize(text) {
            let local = cache.entry(chunk).or_insert_with(|| self.encode_chunk(chunk));
            ids.extend(local.iter().map(|&id| id + IMAGE_VOCAB as u32));
        }
        TokenSequence {
            ids,
            modality: Modality::Text,
            meta: SourceMeta::Text { len: text.len() },
        }
    }

    fn encode_chunk(&self, chunk: &[u8]) -> Vec<u32> {
        let mut word: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&id| (id, (p[0], p[1]))))
                .min();
            match best {
                Some((id, pair)) => word = merge_word(&word, pair, id),
                None => return word,
            }
        }
    }

    /// Inverse of [`Vocab::encode_text`].
    pub fn decode_text(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            let local = (id as usize)
                .checked_sub(IMAGE_VOCAB)
                .and_then(|l| self.expansions.get(l))
                .ok_or(Error::Modality { id, expected: Modality::Text })?;
            out.extend_from_slice(local);
        }
        Ok(out)
    }

    /// Writes the `DCVB` vocabulary file.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.text_size() as u32).to_le_bytes())?;
        for &(l, r) in &self.merges {
            w.write_all(&l.to_le_bytes())?;
            w.write_all(&r.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 9];
        r.read_exact(&mut head).map_err(|_| Error::Format("vocabulary header is truncated".into()))?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("not a vocabulary file".into()));
        }
        if head[4] != VERSION {
            return Err(Error::Format(format!("unsupported vocabulary version {}", head[4])));
        }
        let text_size = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
        if text_size < 256 {
            return Err(Error::VocabTooSmall(text_size));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != (text_size - 256) * 8 {
            return Err(Error::Format("merge table length does not match text size".into()));
        }
        let merges = body
            .chunks_exact(8)
            .map(|c| {
                (
                    u32::from_le_bytes(c[..4].try_into().unwrap()),
                    u32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect();
        Self::from_merges(merges)
    }
}

/// Replaces non-overlapping occurrences of `pair`, left to right.
fn merge_word(word: &[u32], pair: Pair, id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}
