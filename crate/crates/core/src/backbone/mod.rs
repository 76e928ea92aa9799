//! Causal transformer over interleaved command / vision / action chunks, its
//! action and autoregressive world-model losses, and masked token generation.

mod sequence;

pub use sequence::{
    build_sequence, ChunkInput, Corpus, FrameTokens, Frontend, SequenceConfig, TokenSequence, CHUNK_LEN,
    CONTINUATION_LEN, MAX_SEQ_LEN,
};

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::tokenizers::{id_range, Modality, PatchEmbed, VOCAB};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            max_len: MAX_SEQ_LEN,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "d_model {} with {} heads and {} layers",
                self.d_model, self.heads, self.layers
            )));
        }
        if self.max_len == 0 || self.max_len > MAX_SEQ_LEN {
            return Err(invalid(format!("max_len {} outside 1..={MAX_SEQ_LEN}", self.max_len)));
        }
        Ok(())
    }
}

pub const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub seg_emb: ParamId,
    pub patch: Option<PatchEmbed>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

/// Final-layer states of one forward pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `[len, d_model]` after the final layer norm.
    pub hidden: Var,
    /// Per-layer keys and values, for the expert side of joint attention.
    pub layer_kv: Vec<(Var, Var)>,
    pub len: usize,
}

/// Hidden states grouped by modality, each in position order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySplit {
    pub language: Vec<usize>,
    pub visual: Vec<usize>,
    pub action: Vec<usize>,
    pub special: Vec<usize>,
}

fn segment(m: Modality) -> usize {
    m as usize
}

/// Causal attention mask with padding excluded as keys.
pub fn causal_mask(pad: &[bool]) -> Vec<bool> {
    let n = pad.len();
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = !pad[j];
        }
    }
    m
}

/// Token distribution restricted to one modality's id range.
pub fn masked_choice<R: Rng + ?Sized>(
    logits: &[f64],
    range: std::ops::Range<usize>,
    temperature: f64,
    rng: &mut R,
) -> usize {
    let slice = &logits[range.clone()];
    let best = slice.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
    );
    if temperature <= 0.0 {
        return range.start + best.0;
    }
    let weights: Vec<f64> = slice.iter().map(|&v| ((v - best.1) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return range.start + best.0;
    }
    let mut pick = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        pick -= w;
        if pick < 0.0 {
            return range.start + i;
        }
    }
    range.start + best.0
}

impl Backbone {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: ModelConfig,
        frontend: Frontend,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok_emb = store.insert("backbone.tok_emb", Tensor::randn(&[VOCAB, d], EMBED_STD, rng))?;
        let pos_emb = store.insert("backbone.pos_emb", Tensor::randn(&[cfg.max_len, d], EMBED_STD, rng))?;
        let seg_emb = store.insert("backbone.seg_emb", Tensor::randn(&[4, d], EMBED_STD, rng))?;
        let patch = match frontend {
            Frontend::Continuous => Some(PatchEmbed::init(store, "backbone.patch", d, rng)?),
            Frontend::Discrete => None,
        };
        let blocks = (0..cfg.layers)
            .map(|l| {
                Block::init(
                    store,
                    &format!("backbone.block{l}"),
                    d,
                    d,
                    cfg.mlp_ratio * d,
                    cfg.layers,
                    rng,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            seg_emb,
            patch,
            blocks,
            ln_f: LayerNorm::init(store, "backbone.ln_f", d)?,
            head: Linear::init(store, "backbone.head", d, VOCAB, EMBED_STD, false, rng)?,
        })
    }

    pub fn frontend(&self) -> Frontend {
        if self.patch.is_some() {
            Frontend::Continuous
        } else {
            Frontend::Discrete
        }
    }

    /// Input rows: token or patch embedding plus position and segment embeddings.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, seq: &TokenSequence) -> Result<Var> {
        let n = seq.len();
        if n == 0 || n > self.cfg.max_len {
            return Err(invalid(format!("sequence length {n} outside 1..={}", self.cfg.max_len)));
        }
        if seq.frontend != self.frontend() {
            return Err(invalid(format!(
                "{} sequence for a {} backbone",
                seq.frontend.name(),
                self.frontend().name()
            )));
        }
        let table = g.param(self.tok_emb);
        let tokens = match (self.patch, &seq.patches) {
            (None, _) => g.embedding(table, &seq.ids)?,
            (Some(pe), Some(patches)) => {
                let visual = seq.visual_positions();
                let other: Vec<usize> = (0..n).filter(|&i| seq.tags[i] != Modality::Visual).collect();
                let tok = g.embedding(table, &other.iter().map(|&i| seq.ids[i]).collect::<Vec<_>>())?;
                let pat = pe.forward(g, patches)?;
                if g.shape(pat)[0] != visual.len() {
                    return Err(invalid("patch rows do not match visual positions"));
                }
                let both = g.concat_rows(&[tok, pat])?;
                // Row of `both` for each position.
                let mut map = vec![0; n];
                let (mut a, mut b) = (0, other.len());
                for (i, m) in map.iter_mut().enumerate() {
                    if seq.tags[i] == Modality::Visual {
                        *m = b;
                        b += 1;
                    } else {
                        *m = a;
                        a += 1;
                    }
                }
                g.gather_rows(both, &map)?
            }
            (Some(_), None) => return Err(invalid("continuous sequence without patches")),
        };
        let pos_table = g.param(self.pos_emb);
        let pos = g.embedding(pos_table, &(0..n).collect::<Vec<_>>())?;
        let seg_table = g.param(self.seg_emb);
        let seg_ids: Vec<usize> = seq.tags.iter().map(|&t| segment(t)).collect();
        let seg = g.embedding(seg_table, &seg_ids)?;
        let x = g.add(tokens, pos)?;
        Ok(g.add(x, seg)?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, seq: &TokenSequence) -> Result<BackboneOutput> {
        let mut x = self.embed(g, seq)?;
        let mask = causal_mask(&seq.pad);
        let mut layer_kv = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let qkv = b.qkv(g, x)?;
            let att = g.attention(qkv.q, qkv.k, qkv.v, self.cfg.heads, &mask)?;
            layer_kv.push((qkv.k, qkv.v));
            x = b.finish(g, x, att)?;
        }
        Ok(BackboneOutput {
            hidden: self.ln_f.forward(g, x)?,
            layer_kv,
            len: seq.len(),
        })
    }

    /// Next-token logits `[rows.len(), VOCAB]` at the given positions.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, out: &BackboneOutput, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(out.hidden, rows)?;
        Ok(self.head.forward(g, h)?)
    }

    /// Next-token logits at every position.
    pub fn all_logits<T: Scalar>(&self, g: &mut Graph<'_, T>, out: &BackboneOutput) -> Result<Var> {
        Ok(self.head.forward(g, out.hidden)?)
    }

    /// Cross-entropy of the 12 current-action tokens.
    pub fn loss_action<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        out: &BackboneOutput,
        seq: &TokenSequence,
    ) -> Result<Var> {
        let pairs = seq.action_targets();
        if pairs.is_empty() {
            return Err(invalid("sequence has no action targets"));
        }
        self.target_loss(g, out, &pairs)
    }

    /// Cross-entropy of the current frame's 64 visual tokens given all
    /// preceding context.
    pub fn loss_wm_ar<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        out: &BackboneOutput,
        seq: &TokenSequence,
    ) -> Result<Var> {
        if seq.frontend != Frontend::Discrete {
            return Err(invalid("autoregressive world-model loss needs the discrete front end"));
        }
        let pairs = seq.visual_targets();
        if pairs.is_empty() {
            return Err(invalid("sequence has no visual targets"));
        }
        self.target_loss(g, out, &pairs)
    }

    fn target_loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        out: &BackboneOutput,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let logits = self.logits(g, out, &rows)?;
        Ok(g.cross_entropy(logits, &targets, &vec![true; targets.len()])?)
    }

    /// Mean final hidden state over the current frame's visual positions.
    pub fn pool_visual<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        out: &BackboneOutput,
        seq: &TokenSequence,
    ) -> Result<Var> {
        let rows: Vec<usize> = seq.current_visual.clone().collect();
        if rows.is_empty() {
            return Err(invalid("no current visual positions"));
        }
        let h = g.gather_rows(out.hidden, &rows)?;
        Ok(g.mean_rows(h))
    }

    /// Mean final hidden state over the current action tokens.
    pub fn pool_action<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        out: &BackboneOutput,
        seq: &TokenSequence,
    ) -> Result<Var> {
        let rows: Vec<usize> = seq.action_continuation_positions().collect();
        if rows.is_empty() {
            return Err(invalid("no current action positions"));
        }
        let h = g.gather_rows(out.hidden, &rows)?;
        Ok(g.mean_rows(h))
    }

    /// Greedy (`temperature <= 0`) or sampled generation of `count` tokens
    /// restricted to `modality`, one full forward pass per token.
    pub fn generate<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        prefix: &TokenSequence,
        modality: Modality,
        count: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if modality == Modality::Visual && prefix.frontend != Frontend::Discrete {
            return Err(invalid("visual generation needs the discrete front end"));
        }
        let mut seq = prefix.clone();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut g = Graph::new(store);
            let o = self.forward(&mut g, &seq)?;
            let logits = self.logits(&mut g, &o, &[seq.len() - 1])?;
            let row: Vec<f64> = g.value(logits).iter().map(|v| v.as_f64()).collect();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite logits during generation".into()));
            }
            let id = masked_choice(&row, id_range(modality), temperature, rng);
            out.push(id);
            seq.append(id, modality);
        }
        Ok(out)
    }

    /// The 12 action tokens following a prefix that ends at `BOA`.
    pub fn generate_action_tokens<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        prefix: &TokenSequence,
        temperature: f64,
        rng: &mut R,
    ) -> Result<[usize; crate::tokenizers::COEFFS]> {
        if prefix.ids.last() != Some(&crate::tokenizers::BOA) {
            return Err(invalid("action prefix must end at BOA"));
        }
        let ids = self.generate(
            store,
            prefix,
            Modality::Action,
            crate::tokenizers::COEFFS,
            temperature,
            rng,
        )?;
        Ok(std::array::from_fn(|i| ids[i]))
    }

    /// The 64 visual tokens of the current frame, generated from the context
    /// that ends at the current chunk's `BOV`.
    pub fn generate_visual_tokens<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        seq: &TokenSequence,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if seq.frontend != Frontend::Discrete {
            return Err(invalid("visual generation needs the discrete front end"));
        }
        let prefix = seq.prefix(seq.current_visual.start);
        self.generate(
            store,
            &prefix,
            Modality::Visual,
            crate::tokenizers::PATCHES,
            temperature,
            rng,
        )
    }
}

/// Position indices of each modality.
pub fn split_positions(seq: &TokenSequence) -> ModalitySplit {
    let of = |m| (0..seq.len()).filter(|&i| seq.tags[i] == m).collect();
    ModalitySplit {
        language: of(Modality::Language),
        visual: of(Modality::Visual),
        action: of(Modality::Action),
        special: of(Modality::Special),
    }
}

/// Hidden states gathered into F^L, F^V, F^A (and the special rows).
pub fn split_features<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: &BackboneOutput,
    seq: &TokenSequence,
) -> Result<[Option<Var>; 4]> {
    let s = split_positions(seq);
    let mut parts = [None; 4];
    for (slot, rows) in parts.iter_mut().zip([&s.language, &s.visual, &s.action, &s.special]) {
        if !rows.is_empty() {
            *slot = Some(g.gather_rows(out.hidden, rows)?);
        }
    }
    Ok(parts)
}
