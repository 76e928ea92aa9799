//! Vocabulary layout, visual patch codebook, continuous patch embedding and
//! the fixed-length DCT trajectory tokenizer.

mod action;
mod codebook;
mod patch;

pub use action::{dct_forward, dct_inverse, ActionTokenizer, COEFFS, SYMBOL_MAX, SYMBOL_MIN};
pub use codebook::{CodebookFit, VisualCodebook, CODEBOOK_K, CODEBOOK_PARAM};
pub use patch::{
    image_from_patches, image_patches, patch_bytes, PatchEmbed, PATCHES, PATCH_DIM, PATCH_GRID, PATCH_SIZE,
};

use thiserror::Error;

use crate::gridworld::Command;

pub const LANG_BASE: usize = 0;
pub const VISUAL_BASE: usize = 4;
pub const ACTION_BASE: usize = 260;
pub const BOS: usize = 516;
pub const BOV: usize = 517;
pub const BOA: usize = 518;
pub const EOS: usize = 519;
pub const VOCAB: usize = 520;
pub const VISUAL_TOKENS: usize = 256;
pub const ACTION_TOKENS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Language = 0,
    Visual = 1,
    Action = 2,
    Special = 3,
}

/// Modality of a token id; `None` for ids outside the vocabulary.
pub fn modality(id: usize) -> Option<Modality> {
    match id {
        0..=3 => Some(Modality::Language),
        4..=259 => Some(Modality::Visual),
        260..=515 => Some(Modality::Action),
        516..=519 => Some(Modality::Special),
        _ => None,
    }
}

/// Half-open id range of a modality.
pub fn id_range(m: Modality) -> std::ops::Range<usize> {
    match m {
        Modality::Language => LANG_BASE..VISUAL_BASE,
        Modality::Visual => VISUAL_BASE..ACTION_BASE,
        Modality::Action => ACTION_BASE..BOS,
        Modality::Special => BOS..VOCAB,
    }
}

pub fn command_token(c: Command) -> usize {
    LANG_BASE + c as usize
}

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("token id {id} outside {range:?}")]
    OutOfRange { id: usize, range: std::ops::Range<usize> },
    #[error("expected {expected} tokens, got {got}")]
    Length { expected: usize, got: usize },
    #[error("trajectory exceeds workspace bound {bound} m")]
    OutOfBounds { bound: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;
