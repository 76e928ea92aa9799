//! Interleaved command / vision / action sequences.
//!
//! Chunk layout: `[BOS]` (first chunk only), `L`, `BOV`, 64 visual tokens,
//! `BOA`, 12 tokens of the action taken on the frame before. The training
//! continuation after the last chunk is `BOA`, the 12 tokens of the current
//! expert action and `EOS`.

use std::ops::Range;

use crate::error::{invalid, Result};
use crate::gridworld::{Command, SceneRecord, CLIP_LEN};
use crate::par::Exec;
use crate::tokenizers::{
    command_token, image_patches, ActionTokenizer, Modality, VisualCodebook, BOA, BOS, BOV, COEFFS, EOS, PATCHES,
    PATCH_DIM,
};

pub const MAX_SEQ_LEN: usize = 512;
/// Tokens per chunk excluding `BOS`.
pub const CHUNK_LEN: usize = 1 + 1 + PATCHES + 1 + COEFFS;
pub const CONTINUATION_LEN: usize = 1 + COEFFS + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Frontend {
    Discrete,
    Continuous,
}

impl Frontend {
    pub fn name(self) -> &'static str {
        match self {
            Frontend::Discrete => "discrete",
            Frontend::Continuous => "continuous",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "discrete" => Some(Frontend::Discrete),
            "continuous" => Some(Frontend::Continuous),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceConfig {
    /// Number of chunks H.
    pub history: usize,
    /// Spacing between chunks in frames (2 per second).
    pub interval_frames: usize,
    pub frontend: Frontend,
    /// Command and action slots become padding that nothing attends to.
    pub vision_only: bool,
}

impl SequenceConfig {
    pub fn new(history: usize, interval_s: f64, frontend: Frontend) -> Result<Self> {
        let frames = interval_s * 2.0;
        if !frames.is_finite() || frames < 0.0 || (frames - frames.round()).abs() > 1e-9 {
            return Err(invalid(format!("interval {interval_s} s is not a multiple of 0.5 s")));
        }
        let interval_frames = frames.round() as usize;
        if history == 0 {
            return Err(invalid("history must be at least 1"));
        }
        if history > 1 && interval_frames == 0 {
            return Err(invalid("multi-chunk history needs a positive interval"));
        }
        let cfg = Self {
            history,
            interval_frames,
            frontend,
            vision_only: false,
        };
        if cfg.full_len() > MAX_SEQ_LEN {
            return Err(invalid(format!("{history} chunks need {} positions", cfg.full_len())));
        }
        Ok(cfg)
    }

    pub fn context_len(&self) -> usize {
        1 + self.history * CHUNK_LEN
    }

    pub fn full_len(&self) -> usize {
        self.context_len() + CONTINUATION_LEN
    }

    /// Frames between the first chunk and the target frame.
    pub fn span(&self) -> usize {
        (self.history - 1) * self.interval_frames
    }

    /// Earliest target frame with a full history and a previous action.
    pub fn min_frame(&self) -> usize {
        self.span() + 1
    }
}

/// Inputs of one chunk.
#[derive(Clone, Debug)]
pub struct ChunkInput<'a> {
    pub command: Command,
    /// 64 visual token ids (discrete front end).
    pub visual_ids: Option<&'a [usize]>,
    /// 64 x 48 patch values in [0, 1] (continuous front end).
    pub patches: Option<Vec<f64>>,
    /// Tokens of the previous frame's expert action.
    pub prev_action: [usize; COEFFS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub tags: Vec<Modality>,
    pub chunk: Vec<usize>,
    /// Positions no query may attend to.
    pub pad: Vec<bool>,
    pub context_len: usize,
    pub frontend: Frontend,
    /// Patch values for every visual position, in position order.
    pub patches: Option<Vec<f64>>,
    /// Positions of the current chunk's visual tokens.
    pub current_visual: Range<usize>,
    /// `BOA`, action targets and `EOS` after the context; empty if absent.
    pub continuation: Range<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: usize, tag: Modality, chunk: usize, pad: bool) {
        self.ids.push(id);
        self.tags.push(tag);
        self.chunk.push(chunk);
        self.pad.push(pad);
    }

    pub fn visual_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == Modality::Visual).collect()
    }

    pub fn positions_of(&self, m: Modality) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == m && !self.pad[i]).collect()
    }

    /// `(logit row, target id)` pairs of the action continuation.
    pub fn action_targets(&self) -> Vec<(usize, usize)> {
        if self.continuation.is_empty() {
            return Vec::new();
        }
        let c = self.continuation.start;
        (0..COEFFS).map(|i| (c + i, self.ids[c + 1 + i])).collect()
    }

    /// `(logit row, target id)` pairs of the current frame's visual tokens.
    pub fn visual_targets(&self) -> Vec<(usize, usize)> {
        self.current_visual.clone().map(|p| (p - 1, self.ids[p])).collect()
    }

    /// Positions of the teacher-forced current-action tokens.
    pub fn action_continuation_positions(&self) -> Range<usize> {
        if self.continuation.is_empty() {
            return 0..0;
        }
        self.continuation.start + 1..self.continuation.start + 1 + COEFFS
    }

    /// Copy truncated to the first `len` positions.
    pub fn prefix(&self, len: usize) -> TokenSequence {
        let n_vis = self.tags[..len].iter().filter(|&&t| t == Modality::Visual).count();
        TokenSequence {
            ids: self.ids[..len].to_vec(),
            tags: self.tags[..len].to_vec(),
            chunk: self.chunk[..len].to_vec(),
            pad: self.pad[..len].to_vec(),
            context_len: self.context_len.min(len),
            frontend: self.frontend,
            patches: self.patches.as_ref().map(|p| p[..n_vis * PATCH_DIM].to_vec()),
            current_visual: self.current_visual.start.min(len)..self.current_visual.end.min(len),
            continuation: self.continuation.start.min(len)..self.continuation.end.min(len),
        }
    }

    /// Appends a generated token to the end of the sequence.
    pub fn append(&mut self, id: usize, tag: Modality) {
        let chunk = *self.chunk.last().unwrap_or(&0);
        self.push(id, tag, chunk, false);
    }

    /// Context followed by `BOA`, ready for action generation.
    pub fn generation_prefix(&self) -> TokenSequence {
        let mut s = self.prefix(self.context_len);
        let chunk = s.chunk.last().copied().unwrap_or(0);
        s.continuation = s.len()..s.len() + 1;
        s.push(BOA, Modality::Special, chunk, false);
        s
    }
}

pub fn build_sequence(
    chunks: &[ChunkInput<'_>],
    target: Option<&[usize; COEFFS]>,
    cfg: &SequenceConfig,
) -> Result<TokenSequence> {
    if chunks.len() != cfg.history {
        return Err(invalid(format!("{} chunks for history {}", chunks.len(), cfg.history)));
    }
    let mut s = TokenSequence {
        ids: Vec::with_capacity(cfg.full_len()),
        tags: Vec::new(),
        chunk: Vec::new(),
        pad: Vec::new(),
        context_len: 0,
        frontend: cfg.frontend,
        patches: match cfg.frontend {
            Frontend::Continuous => Some(Vec::with_capacity(cfg.history * PATCHES * PATCH_DIM)),
            Frontend::Discrete => None,
        },
        current_visual: 0..0,
        continuation: 0..0,
    };
    let hide = cfg.vision_only;
    s.push(BOS, Modality::Special, 0, false);
    for (j, ch) in chunks.iter().enumerate() {
        if hide {
            s.push(EOS, Modality::Special, j, true);
        } else {
            s.push(command_token(ch.command), Modality::Language, j, false);
        }
        s.push(BOV, Modality::Special, j, false);
        let start = s.len();
        match cfg.frontend {
            Frontend::Discrete => {
                let ids = ch
                    .visual_ids
                    .ok_or_else(|| invalid("discrete chunk without visual ids"))?;
                if ids.len() != PATCHES {
                    return Err(invalid(format!("{} visual ids", ids.len())));
                }
                for &id in ids {
                    s.push(id, Modality::Visual, j, false);
                }
            }
            Frontend::Continuous => {
                let p = ch
                    .patches
                    .as_ref()
                    .ok_or_else(|| invalid("continuous chunk without patches"))?;
                if p.len() != PATCHES * PATCH_DIM {
                    return Err(invalid(format!("{} patch values", p.len())));
                }
                // Placeholder ids; these positions are embedded from patches.
                for _ in 0..PATCHES {
                    s.push(BOV, Modality::Visual, j, false);
                }
                s.patches.as_mut().unwrap().extend_from_slice(p);
            }
        }
        s.current_visual = start..s.len();
        s.push(BOA, Modality::Special, j, false);
        for &a in &ch.prev_action {
            if hide {
                s.push(EOS, Modality::Special, j, true);
            } else {
                s.push(a, Modality::Action, j, false);
            }
        }
    }
    s.context_len = s.len();
    if let (Some(t), false) = (target, hide) {
        let j = cfg.history - 1;
        let c = s.len();
        s.push(BOA, Modality::Special, j, false);
        for &a in t {
            s.push(a, Modality::Action, j, false);
        }
        s.push(EOS, Modality::Special, j, false);
        s.continuation = c..s.len();
    }
    if s.len() > MAX_SEQ_LEN {
        return Err(invalid(format!("sequence of {} exceeds {MAX_SEQ_LEN}", s.len())));
    }
    Ok(s)
}

/// Per-frame tokens of a dataset.
#[derive(Clone, Debug)]
pub struct FrameTokens {
    pub visual: Option<Vec<usize>>,
    pub action: [usize; COEFFS],
}

/// A dataset with its tokens and clip boundaries.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<SceneRecord>,
    pub tokens: Vec<FrameTokens>,
    /// Record index range of each clip.
    pub clips: Vec<Range<usize>>,
}

impl Corpus {
    pub fn new(
        records: Vec<SceneRecord>,
        codebook: Option<&VisualCodebook>,
        actions: &ActionTokenizer,
        exec: Exec,
    ) -> Result<Self> {
        let visual: Vec<Option<Vec<usize>>> = match codebook {
            Some(cb) => {
                let imgs: Vec<&[u8]> = records.iter().map(|r| r.image.as_slice()).collect();
                cb.encode_many(&imgs, exec).into_iter().map(Some).collect()
            }
            None => vec![None; records.len()],
        };
        let mut tokens = Vec::with_capacity(records.len());
        for (r, v) in records.iter().zip(visual) {
            tokens.push(FrameTokens {
                visual: v,
                action: actions.tokenize(&r.expert)?,
            });
        }
        let mut clips = Vec::new();
        let mut start = 0;
        for i in 1..=records.len() {
            if i == records.len() || records[i].clip_id != records[start].clip_id || records[i].frame == 0 {
                clips.push(start..i);
                start = i;
            }
        }
        for c in &clips {
            if c.len() > CLIP_LEN {
                return Err(invalid(format!("clip of {} frames", c.len())));
            }
            for (k, i) in c.clone().enumerate() {
                if records[i].frame as usize != k {
                    return Err(invalid(format!("record {i}: frame {} at offset {k}", records[i].frame)));
                }
            }
        }
        Ok(Self { records, tokens, clips })
    }

    /// Record indices usable as target frames; `next_frame` additionally
    /// requires a following frame in the clip.
    pub fn targets(&self, cfg: &SequenceConfig, next_frame: bool) -> Vec<usize> {
        let mut out = Vec::new();
        for c in &self.clips {
            for i in c.clone() {
                let f = i - c.start;
                if f >= cfg.min_frame() && (!next_frame || i + 1 < c.end) {
                    out.push(i);
                }
            }
        }
        out
    }

    /// Sequence whose last chunk is record `t`.
    pub fn sequence(&self, t: usize, cfg: &SequenceConfig, with_target: bool) -> Result<TokenSequence> {
        let clip = self
            .clips
            .iter()
            .find(|c| c.contains(&t))
            .ok_or_else(|| invalid(format!("record {t} out of range")))?;
        if t - clip.start < cfg.min_frame() {
            return Err(invalid(format!(
                "frame {} too early for {} chunks at interval {}",
                t - clip.start,
                cfg.history,
                cfg.interval_frames
            )));
        }
        let mut chunks = Vec::with_capacity(cfg.history);
        for j in 0..cfg.history {
            let f = t - (cfg.history - 1 - j) * cfg.interval_frames;
            let rec = &self.records[f];
            let patches = match cfg.frontend {
                Frontend::Continuous => Some(image_patches(&rec.image)),
                Frontend::Discrete => None,
            };
            let visual_ids = match cfg.frontend {
                Frontend::Discrete => Some(
                    self.tokens[f]
                        .visual
                        .as_deref()
                        .ok_or_else(|| invalid("corpus has no visual tokens"))?,
                ),
                Frontend::Continuous => None,
            };
            chunks.push(ChunkInput {
                command: rec.command,
                visual_ids,
                patches,
                prev_action: self.tokens[f - 1].action,
            });
        }
        let target = with_target.then_some(&self.tokens[t].action);
        build_sequence(&chunks, target, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizers::ACTION_BASE;

    fn chunk(ids: &[usize]) -> ChunkInput<'_> {
        ChunkInput {
            command: Command::Left,
            visual_ids: Some(ids),
            patches: None,
            prev_action: [ACTION_BASE + 7; COEFFS],
        }
    }

    #[test]
    fn single_chunk_layout() {
        let ids = vec![9usize; PATCHES];
        let cfg = SequenceConfig::new(1, 0.0, Frontend::Discrete).unwrap();
        let s = build_sequence(&[chunk(&ids)], Some(&[ACTION_BASE + 1; COEFFS]), &cfg).unwrap();
        assert_eq!(s.context_len, 1 + 1 + 1 + 64 + 1 + 12);
        assert_eq!(s.len(), s.context_len + 14);
        assert_eq!(s.ids[0], BOS);
        assert_eq!(s.ids[1], command_token(Command::Left));
        assert_eq!(s.ids[2], BOV);
        assert_eq!(s.current_visual, 3..67);
        assert_eq!(s.ids[67], BOA);
        assert_eq!(s.ids[s.continuation.start], BOA);
        assert_eq!(*s.ids.last().unwrap(), EOS);
        let t = s.action_targets();
        assert_eq!(t.len(), 12);
        assert_eq!(t[0], (s.context_len, ACTION_BASE + 1));
        assert_eq!(s.visual_targets()[0], (2, 9));
    }

    #[test]
    fn tag_histogram_counts_chunks() {
        let ids = vec![9usize; PATCHES];
        for h in [1, 2, 6] {
            let cfg = SequenceConfig::new(h, 1.0, Frontend::Discrete).unwrap();
            let chunks: Vec<_> = (0..h).map(|_| chunk(&ids)).collect();
            let s = build_sequence(&chunks, None, &cfg).unwrap();
            let count = |m| s.tags.iter().filter(|&&t| t == m).count();
            assert_eq!(count(Modality::Language), h);
            assert_eq!(count(Modality::Visual), 64 * h);
            assert_eq!(count(Modality::Action), 12 * h);
            assert_eq!(s.len(), cfg.context_len());
        }
    }

    #[test]
    fn vision_only_has_no_action_positions() {
        let ids = vec![9usize; PATCHES];
        let mut cfg = SequenceConfig::new(6, 1.0, Frontend::Discrete).unwrap();
        cfg.vision_only = true;
        let chunks: Vec<_> = (0..6).map(|_| chunk(&ids)).collect();
        let s = build_sequence(&chunks, Some(&[ACTION_BASE; COEFFS]), &cfg).unwrap();
        assert!(s.tags.iter().all(|&t| t != Modality::Action && t != Modality::Language));
        assert_eq!(s.pad.iter().filter(|&&p| p).count(), 6 * 13);
        assert!(s.action_targets().is_empty());
    }

    #[test]
    fn config_limits() {
        assert!(SequenceConfig::new(6, 1.0, Frontend::Discrete).is_ok());
        assert!(SequenceConfig::new(2, 0.25, Frontend::Discrete).is_err());
        assert!(SequenceConfig::new(2, 0.0, Frontend::Discrete).is_err());
        assert!(SequenceConfig::new(7, 1.0, Frontend::Discrete).is_err());
    }
}
