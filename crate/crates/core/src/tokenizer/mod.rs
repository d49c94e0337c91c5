//! Unified image + text vocabulary.
//!
//! Ids `[0, 256)` are raw sub-pixel values; ids from 256 upward are text
//! tokens, offset by 256 from their local BPE id.

mod bpe;
mod image;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use bpe::{pre_tokenize, Vocab, MAX_CHUNK};
pub use image::{detokenize_image, image_token_count, tokenize_image, Image, PATCH};

use crate::error::{Error, Result};

/// Number of image token ids.
pub const IMAGE_VOCAB: usize = 256;

/// Text vocabulary size of the default configuration.
pub const DEFAULT_TEXT_VOCAB: usize = 16384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Text];

    /// Archive byte: 0 for image, 1 for text.
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            other => Err(Error::Format(format!("unknown modality byte {other}"))),
        }
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }

    /// Token ids this modality may emit, given the total vocabulary size.
    pub fn id_range(self, total: usize) -> Range<usize> {
        match self {
            Modality::Image => 0..IMAGE_VOCAB,
            Modality::Text => IMAGE_VOCAB..total,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// Where a token sequence came from, enough to rebuild the original bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceMeta {
    Image {
        width: usize,
        height: usize,
        pad_right: usize,
        pad_bottom: usize,
    },
    Text {
        len: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub modality: Modality,
    pub meta: SourceMeta,
}

/// Allowed-entry mask over the unified vocabulary for one modality.
pub fn modality_mask(modality: Modality, total: usize) -> Vec<bool> {
    let allowed = modality.id_range(total);
    (0..total).map(|id| allowed.contains(&id)).collect()
}

/// Checks that every id lies in the modality's range.
pub fn check_modality(ids: &[u32], modality: Modality, total: usize) -> Result<()> {
    let range = modality.id_range(total);
    match ids.iter().find(|&&id| !range.contains(&(id as usize))) {
        Some(&id) => Err(Error::Modality { id, expected: modality }),
        None => Ok(()),
    }
}
