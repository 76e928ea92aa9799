//! Action expert coupled to the backbone by joint attention, with query,
//! autoregressive and flow-matching decoders.
//!
//! The expert sequence is the embedded previous action (12 rows) followed by
//! the decoder rows: 6 learned queries, `BOA` plus the teacher-forced action
//! tokens, or a single flow token.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::{causal_mask, masked_choice, Backbone, BackboneOutput, TokenSequence, EMBED_STD};
use crate::error::{invalid, Error, Result};
use crate::gridworld::{Trajectory, HORIZON, WORKSPACE_BOUND};
use crate::nn::{sinusoidal, Block, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::tokenizers::{id_range, Modality, BOA, COEFFS, VOCAB};

pub const PREFIX_LEN: usize = COEFFS;
pub const MAX_EXPERT_LEN: usize = 32;
/// Flow time is embedded as `sinusoidal(FLOW_TIME_SCALE * t)`.
pub const FLOW_TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderKind {
    Query,
    Autoregressive,
    Flow,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::Query, DecoderKind::Autoregressive, DecoderKind::Flow];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Query => "query",
            DecoderKind::Autoregressive => "autoregressive",
            DecoderKind::Flow => "flow",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "query" => Some(DecoderKind::Query),
            "autoregressive" | "ar" => Some(DecoderKind::Autoregressive),
            "flow" => Some(DecoderKind::Flow),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertConfig {
    pub d_model: usize,
    pub mlp_ratio: usize,
    pub decoder: DecoderKind,
    pub queries: usize,
    pub flow_steps: usize,
    /// Backbone rows may attend to expert rows.
    pub backbone_to_expert: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            mlp_ratio: 4,
            decoder: DecoderKind::Query,
            queries: HORIZON,
            flow_steps: 10,
            backbone_to_expert: false,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.flow_steps == 0 {
            return Err(invalid("expert width and flow steps must be positive"));
        }
        if self.queries != HORIZON {
            return Err(invalid(format!("{} queries for {HORIZON} waypoints", self.queries)));
        }
        if self.backbone_to_expert && self.decoder == DecoderKind::Autoregressive {
            return Err(invalid(
                "backbone-to-expert attention would expose teacher-forced action tokens to earlier expert rows",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub cfg: ExpertConfig,
    pub heads: usize,
    pub attn_width: usize,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    pub queries: Option<ParamId>,
    pub flow_in: Option<Linear>,
}

/// Mask over `[backbone rows; expert rows]` for one joint attention.
pub fn joint_mask(pad: &[bool], expert_rows: usize, backbone_to_expert: bool) -> Vec<bool> {
    let nb = pad.len();
    let n = nb + expert_rows;
    let mut m = vec![false; n * n];
    for i in 0..nb {
        for j in 0..=i {
            m[i * n + j] = !pad[j];
        }
        if backbone_to_expert {
            for j in nb..n {
                m[i * n + j] = true;
            }
        }
    }
    for i in nb..n {
        for j in 0..nb {
            m[i * n + j] = !pad[j];
        }
        for j in nb..=i {
            m[i * n + j] = true;
        }
    }
    m
}

/// One layer of joint attention: a single attention over the row-wise
/// concatenation of both sides' queries, keys and values, split back and
/// finished by each side's own block. `expert` is `None` for an empty side.
#[allow(clippy::too_many_arguments)]
pub fn joint_attention_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    backbone_block: &Block,
    expert_block: &Block,
    xb: Var,
    xe: Option<Var>,
    heads: usize,
    pad: &[bool],
    backbone_to_expert: bool,
) -> Result<(Var, Option<Var>)> {
    let b = backbone_block.qkv(g, xb)?;
    let nb = g.shape(xb)[0];
    let Some(xe) = xe else {
        let att = g.attention(b.q, b.k, b.v, heads, &causal_mask(pad))?;
        return Ok((backbone_block.finish(g, xb, att)?, None));
    };
    let e = expert_block.qkv(g, xe)?;
    if g.shape(e.q)[1] != g.shape(b.q)[1] {
        return Err(invalid(format!(
            "expert attention width {} differs from backbone {}",
            g.shape(e.q)[1],
            g.shape(b.q)[1]
        )));
    }
    let ne = g.shape(xe)[0];
    let q = g.concat_rows(&[b.q, e.q])?;
    let k = g.concat_rows(&[b.k, e.k])?;
    let v = g.concat_rows(&[b.v, e.v])?;
    let att = g.attention(q, k, v, heads, &joint_mask(pad, ne, backbone_to_expert))?;
    let ab = g.slice_rows(att, 0, nb)?;
    let ae = g.slice_rows(att, nb, ne)?;
    Ok((backbone_block.finish(g, xb, ab)?, Some(expert_block.finish(g, xe, ae)?)))
}

/// Decoder-specific rows appended after the previous-action prefix.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderInput {
    Query,
    /// `BOA` followed by up to 11 teacher-forced tokens (`BOA` alone predicts the first).
    Tokens(Vec<usize>),
    /// Normalised 12-d point and flow time.
    Flow {
        x: [f64; COEFFS],
        t: f64,
    },
}

/// Expert-side keys and values accumulated over processed rows.
#[derive(Clone, Debug)]
pub struct ExpertCache {
    keys: Vec<Vec<Var>>,
    values: Vec<Vec<Var>>,
    pub rows: usize,
}

/// Joint forward result.
#[derive(Clone, Debug)]
pub struct JointOutput {
    pub backbone: BackboneOutput,
    /// `[expert rows, d_expert]` after the expert's final norm.
    pub expert: Var,
}

impl Expert {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: ExpertConfig,
        backbone: &Backbone,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let attn = backbone.cfg.d_model;
        let layers = backbone.cfg.layers;
        let blocks = (0..layers)
            .map(|l| {
                Block::init(
                    store,
                    &format!("expert.block{l}"),
                    d,
                    attn,
                    cfg.mlp_ratio * d,
                    layers,
                    rng,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let head = match cfg.decoder {
            DecoderKind::Query => Linear::zeros(store, "expert.head", d, 2)?,
            DecoderKind::Autoregressive => Linear::init(store, "expert.head", d, VOCAB, EMBED_STD, false, rng)?,
            DecoderKind::Flow => Linear::init(store, "expert.head", d, COEFFS, EMBED_STD, true, rng)?,
        };
        let queries = match cfg.decoder {
            DecoderKind::Query => {
                Some(store.insert("expert.queries", Tensor::randn(&[cfg.queries, d], EMBED_STD, rng))?)
            }
            _ => None,
        };
        let flow_in = match cfg.decoder {
            DecoderKind::Flow => Some(Linear::init(
                store,
                "expert.flow_in",
                COEFFS,
                d,
                1.0 / (COEFFS as f64).sqrt(),
                true,
                rng,
            )?),
            _ => None,
        };
        Ok(Self {
            cfg,
            heads: backbone.cfg.heads,
            attn_width: attn,
            tok_emb: store.insert("expert.tok_emb", Tensor::randn(&[VOCAB, d], EMBED_STD, rng))?,
            pos_emb: store.insert("expert.pos_emb", Tensor::randn(&[MAX_EXPERT_LEN, d], EMBED_STD, rng))?,
            blocks,
            ln_f: LayerNorm::init(store, "expert.ln_f", d)?,
            head,
            queries,
            flow_in,
        })
    }

    fn check_input(&self, input: &DecoderInput) -> Result<()> {
        let ok = matches!(
            (self.cfg.decoder, input),
            (DecoderKind::Query, DecoderInput::Query)
                | (DecoderKind::Autoregressive, DecoderInput::Tokens(_))
                | (DecoderKind::Flow, DecoderInput::Flow { .. })
        );
        if !ok {
            return Err(invalid(format!(
                "{:?} input for a {} expert",
                input,
                self.cfg.decoder.name()
            )));
        }
        if let DecoderInput::Flow { t, .. } = input {
            if !(0.0..=1.0).contains(t) {
                return Err(invalid(format!("flow time {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Embedded rows of the decoder part, placed at positions `start..`.
    fn decoder_rows<T: Scalar>(&self, g: &mut Graph<'_, T>, input: &DecoderInput) -> Result<Var> {
        self.check_input(input)?;
        Ok(match input {
            DecoderInput::Query => g.param(self.queries.expect("query expert has queries")),
            DecoderInput::Tokens(ids) => {
                let table = g.param(self.tok_emb);
                g.embedding(table, ids)?
            }
            DecoderInput::Flow { x, t } => {
                let xv = g.constant(Tensor::from_f64(&[1, COEFFS], x)?);
                let h = self.flow_in.expect("flow expert has an input map").forward(g, xv)?;
                let emb = sinusoidal(FLOW_TIME_SCALE * t, self.cfg.d_model, 10_000.0);
                let te = g.constant(Tensor::from_f64(&[1, self.cfg.d_model], &emb)?);
                g.add(h, te)?
            }
        })
    }

    /// Token or decoder rows plus positional embeddings for positions `start..`.
    fn with_positions<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, start: usize) -> Result<Var> {
        let n = g.shape(x)[0];
        if start + n > MAX_EXPERT_LEN {
            return Err(invalid(format!(
                "expert sequence of {} rows exceeds {MAX_EXPERT_LEN}",
                start + n
            )));
        }
        let table = g.param(self.pos_emb);
        let pos = g.embedding(table, &(start..start + n).collect::<Vec<_>>())?;
        Ok(g.add(x, pos)?)
    }

    /// Embedded expert input: previous-action prefix then decoder rows.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        prev_action: &[usize; COEFFS],
        input: &DecoderInput,
    ) -> Result<Var> {
        let table = g.param(self.tok_emb);
        let prefix = g.embedding(table, prev_action)?;
        let dec = self.decoder_rows(g, input)?;
        let x = g.concat_rows(&[prefix, dec])?;
        self.with_positions(g, x, 0)
    }

    /// Backbone and expert run together, one joint attention per layer.
    pub fn joint_forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        backbone: &Backbone,
        seq: &TokenSequence,
        prev_action: &[usize; COEFFS],
        input: &DecoderInput,
    ) -> Result<JointOutput> {
        self.check_backbone(backbone)?;
        let mut xb = backbone.embed(g, seq)?;
        let mut xe = self.embed(g, prev_action, input)?;
        let mut layer_kv = Vec::new();
        for (bb, eb) in backbone.blocks.iter().zip(&self.blocks) {
            let (nb, ne) = joint_attention_layer(
                g,
                bb,
                eb,
                xb,
                Some(xe),
                self.heads,
                &seq.pad,
                self.cfg.backbone_to_expert,
            )?;
            xb = nb;
            xe = ne.expect("expert side present");
        }
        // Keys and values are not needed from the joint path.
        layer_kv.clear();
        Ok(JointOutput {
            backbone: BackboneOutput {
                hidden: backbone.ln_f.forward(g, xb)?,
                layer_kv,
                len: seq.len(),
            },
            expert: self.ln_f.forward(g, xe)?,
        })
    }

    fn check_backbone(&self, backbone: &Backbone) -> Result<()> {
        if backbone.blocks.len() != self.blocks.len()
            || backbone.cfg.heads != self.heads
            || backbone.cfg.d_model != self.attn_width
        {
            return Err(invalid("expert and backbone head geometry differ"));
        }
        Ok(())
    }

    pub fn new_cache(&self) -> ExpertCache {
        ExpertCache {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            rows: 0,
        }
    }

    /// Processes new expert rows (already embedded, without positions)
    /// against a finished backbone pass and the cached expert rows. Only valid
    /// while backbone rows do not attend to the expert.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        backbone: &BackboneOutput,
        pad: &[bool],
        cache: &mut ExpertCache,
        rows: Var,
    ) -> Result<Var> {
        if self.cfg.backbone_to_expert {
            return Err(invalid("cached expert steps need backbone-to-expert attention off"));
        }
        if backbone.layer_kv.len() != self.blocks.len() {
            return Err(invalid("backbone pass lacks per-layer keys and values"));
        }
        let mut x = self.with_positions(g, rows, cache.rows)?;
        let m = g.shape(x)[0];
        let nb = backbone.len;
        let nk = nb + cache.rows + m;
        let mut mask = vec![false; m * nk];
        for i in 0..m {
            for j in 0..nb {
                mask[i * nk + j] = !pad[j];
            }
            for j in nb..nb + cache.rows + i + 1 {
                mask[i * nk + j] = true;
            }
        }
        for (l, blk) in self.blocks.iter().enumerate() {
            let e = blk.qkv(g, x)?;
            let (kb, vb) = backbone.layer_kv[l];
            let mut ks = vec![kb];
            ks.extend(&cache.keys[l]);
            ks.push(e.k);
            let mut vs = vec![vb];
            vs.extend(&cache.values[l]);
            vs.push(e.v);
            let k = g.concat_rows(&ks)?;
            let v = g.concat_rows(&vs)?;
            let att = g.attention(e.q, k, v, self.heads, &mask)?;
            cache.keys[l].push(e.k);
            cache.values[l].push(e.v);
            x = blk.finish(g, x, att)?;
        }
        cache.rows += m;
        Ok(self.ln_f.forward(g, x)?)
    }

    /// Runs the backbone alone and feeds the previous-action prefix.
    pub fn prefill<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        backbone: &Backbone,
        seq: &TokenSequence,
        prev_action: &[usize; COEFFS],
    ) -> Result<(BackboneOutput, ExpertCache)> {
        self.check_backbone(backbone)?;
        let out = backbone.forward(g, seq)?;
        let mut cache = self.new_cache();
        let table = g.param(self.tok_emb);
        let prefix = g.embedding(table, prev_action)?;
        self.step(g, &out, &seq.pad, &mut cache, prefix)?;
        Ok((out, cache))
    }

    /// Decoder rows of a joint pass.
    fn decoder_hidden<T: Scalar>(&self, g: &mut Graph<'_, T>, out: &JointOutput) -> Result<Var> {
        let n = g.shape(out.expert)[0];
        Ok(g.slice_rows(out.expert, PREFIX_LEN, n - PREFIX_LEN)?)
    }

    /// `[6, 2]` waypoints in metres from the query rows.
    pub fn query_output<T: Scalar>(&self, g: &mut Graph<'_, T>, hidden: Var) -> Result<Var> {
        let y = self.head.forward(g, hidden)?;
        Ok(g.scale(y, WORKSPACE_BOUND))
    }

    /// Query expert L1 loss in metres.
    pub fn loss_query<T: Scalar>(&self, g: &mut Graph<'_, T>, out: &JointOutput, target: &Trajectory) -> Result<Var> {
        let h = self.decoder_hidden(g, out)?;
        let pred = self.query_output(g, h)?;
        let t = g.constant(Tensor::from_f64(&[HORIZON, 2], &target.flatten())?);
        Ok(g.l1(pred, t)?)
    }

    /// Cross-entropy of the 12 action tokens under teacher forcing.
    pub fn loss_ar<T: Scalar>(&self, g: &mut Graph<'_, T>, out: &JointOutput, target: &[usize; COEFFS]) -> Result<Var> {
        let h = self.decoder_hidden(g, out)?;
        if g.shape(h)[0] != COEFFS {
            return Err(invalid("autoregressive expert needs BOA plus 11 forced tokens"));
        }
        let logits = self.head.forward(g, h)?;
        Ok(g.cross_entropy(logits, target, &[true; COEFFS])?)
    }

    /// Flow-matching MSE against the straight-line velocity `a1 - a0`.
    pub fn loss_flow<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        out: &JointOutput,
        a0: &[f64; COEFFS],
        a1: &[f64; COEFFS],
    ) -> Result<Var> {
        let h = self.decoder_hidden(g, out)?;
        let v = self.head.forward(g, h)?;
        let u = flow_target(a0, a1);
        let t = g.constant(Tensor::from_f64(&[1, COEFFS], &u)?);
        Ok(g.mse(v, t)?)
    }

    /// Trajectory from the learned queries.
    pub fn query_decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        backbone: &Backbone,
        seq: &TokenSequence,
        prev_action: &[usize; COEFFS],
    ) -> Result<Trajectory> {
        self.check_input(&DecoderInput::Query)?;
        let mut g = Graph::new(store);
        let (out, mut cache) = self.prefill(&mut g, backbone, seq, prev_action)?;
        let q = g.param(self.queries.expect("query expert has queries"));
        let h = self.step(&mut g, &out, &seq.pad, &mut cache, q)?;
        let y = self.query_output(&mut g, h)?;
        let v: Vec<f64> = g.value(y).iter().map(|v| v.as_f64()).collect();
        Ok(Trajectory::from_flat(&v)?)
    }

    /// `count` tokens generated with cached expert rows; the backbone runs once.
    #[allow(clippy::too_many_arguments)]
    pub fn ar_decode<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        backbone: &Backbone,
        seq: &TokenSequence,
        prev_action: &[usize; COEFFS],
        count: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        self.check_input(&DecoderInput::Tokens(vec![BOA]))?;
        let mut g = Graph::new(store);
        let (out, mut cache) = self.prefill(&mut g, backbone, seq, prev_action)?;
        let mut next = BOA;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let table = g.param(self.tok_emb);
            let row = g.embedding(table, &[next])?;
            let h = self.step(&mut g, &out, &seq.pad, &mut cache, row)?;
            let logits = self.head.forward(&mut g, h)?;
            let v: Vec<f64> = g.value(logits).iter().map(|v| v.as_f64()).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite expert logits".into()));
            }
            next = masked_choice(&v, id_range(Modality::Action), temperature, rng);
            ids.push(next);
        }
        Ok(ids)
    }

    /// Flow velocity at `(x, t)` for a prefilled context.
    #[allow(clippy::too_many_arguments)]
    fn flow_velocity<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        out: &BackboneOutput,
        pad: &[bool],
        prefix_cache: &ExpertCache,
        x: &[f64; COEFFS],
        t: f64,
    ) -> Result<[f64; COEFFS]> {
        let mut cache = prefix_cache.clone();
        let row = self.decoder_rows(g, &DecoderInput::Flow { x: *x, t })?;
        let h = self.step(g, out, pad, &mut cache, row)?;
        let v = self.head.forward(g, h)?;
        let vals = g.value(v);
        Ok(std::array::from_fn(|i| vals[i].as_f64()))
    }

    /// Euler integration of the learned field from seeded noise; metres.
    pub fn flow_decode<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        backbone: &Backbone,
        seq: &TokenSequence,
        prev_action: &[usize; COEFFS],
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.check_input(&DecoderInput::Flow {
            x: [0.0; COEFFS],
            t: 0.0,
        })?;
        let mut g = Graph::new(store);
        let (out, cache) = self.prefill(&mut g, backbone, seq, prev_action)?;
        let x0: [f64; COEFFS] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let mut err = None;
        let x1 = flow_euler(&x0, self.cfg.flow_steps, |x, t| {
            match self.flow_velocity(&mut g, &out, &seq.pad, &cache, x, t) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    [0.0; COEFFS]
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        denormalize(&x1)
    }
}

/// Straight-line velocity target `a1 - a0`.
pub fn flow_target(a0: &[f64; COEFFS], a1: &[f64; COEFFS]) -> [f64; COEFFS] {
    std::array::from_fn(|i| a1[i] - a0[i])
}

/// Point on the straight path at time `t`.
pub fn flow_interpolate(a0: &[f64; COEFFS], a1: &[f64; COEFFS], t: f64) -> [f64; COEFFS] {
    std::array::from_fn(|i| (1.0 - t) * a0[i] + t * a1[i])
}

/// Explicit Euler from `t = 0` to `t = 1` in `steps` equal steps.
pub fn flow_euler(
    x0: &[f64; COEFFS],
    steps: usize,
    mut field: impl FnMut(&[f64; COEFFS], f64) -> [f64; COEFFS],
) -> [f64; COEFFS] {
    let h = 1.0 / steps as f64;
    let mut x = *x0;
    for i in 0..steps {
        let v = field(&x, i as f64 * h);
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += h * vi;
        }
    }
    x
}

/// Flattened waypoints divided by the workspace bound.
pub fn normalize(t: &Trajectory) -> [f64; COEFFS] {
    t.flatten().map(|v| v / WORKSPACE_BOUND)
}

pub fn denormalize(x: &[f64; COEFFS]) -> Result<Trajectory> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite flow sample".into()));
    }
    Ok(Trajectory::from_flat(&x.map(|v| v * WORKSPACE_BOUND))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_sequence, ChunkInput, Frontend, ModelConfig, SequenceConfig};
    use crate::gridworld::Command;
    use crate::rng;
    use crate::tokenizers::{ACTION_BASE, PATCHES, VISUAL_BASE};

    fn setup(decoder: DecoderKind) -> (ParamStore<f64>, Backbone, Expert, TokenSequence, [usize; COEFFS]) {
        let mut store = ParamStore::new();
        let mut r = rng::rng(5, rng::streams::INIT, 0);
        let mc = ModelConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            max_len: 256,
        };
        let b = Backbone::init(&mut store, mc, Frontend::Discrete, &mut r).unwrap();
        let ec = ExpertConfig {
            d_model: 8,
            decoder,
            ..Default::default()
        };
        let e = Expert::init(&mut store, ec, &b, &mut r).unwrap();
        let ids: Vec<usize> = (0..PATCHES).map(|i| VISUAL_BASE + i * 3 % 256).collect();
        let prev: [usize; COEFFS] = std::array::from_fn(|i| ACTION_BASE + 120 + i);
        let cfg = SequenceConfig::new(1, 0.0, Frontend::Discrete).unwrap();
        let seq = build_sequence(
            &[ChunkInput {
                command: Command::Follow,
                visual_ids: Some(&ids),
                patches: None,
                prev_action: prev,
            }],
            None,
            &cfg,
        )
        .unwrap();
        (store, b, e, seq, prev)
    }

    #[test]
    fn joint_layer_split_lengths() {
        let (store, b, e, seq, prev) = setup(DecoderKind::Query);
        let mut g = Graph::new(&store);
        let out = e.joint_forward(&mut g, &b, &seq, &prev, &DecoderInput::Query).unwrap();
        assert_eq!(g.shape(out.backbone.hidden), &[seq.len(), 16]);
        assert_eq!(g.shape(out.expert), &[PREFIX_LEN + HORIZON, 8]);
    }

    #[test]
    fn zero_query_head_gives_zero_trajectory() {
        let (store, b, e, seq, prev) = setup(DecoderKind::Query);
        let t = e.query_decode(&store, &b, &seq, &prev).unwrap();
        assert_eq!(t, Trajectory::zeros());
    }

    #[test]
    fn cached_path_matches_joint_path() {
        let (mut store, b, e, seq, prev) = setup(DecoderKind::Query);
        let mut r = rng::rng(9, 1, 1);
        let head = store.get_mut(e.head.w);
        head.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        let mut g = Graph::new(&store);
        let joint = e.joint_forward(&mut g, &b, &seq, &prev, &DecoderInput::Query).unwrap();
        let h = e.decoder_hidden(&mut g, &joint).unwrap();
        let y = e.query_output(&mut g, h).unwrap();
        let a = g.value(y).to_vec();
        let t = e.query_decode(&store, &b, &seq, &prev).unwrap().flatten();
        for (x, y) in a.iter().zip(&t) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn ar_cached_logits_match_teacher_forcing() {
        let (store, b, e, seq, prev) = setup(DecoderKind::Autoregressive);
        let mut r = rng::rng(0, rng::streams::SAMPLING, 0);
        let ids = e.ar_decode(&store, &b, &seq, &prev, COEFFS, 0.0, &mut r).unwrap();
        assert!(ids.iter().all(|&id| id_range(Modality::Action).contains(&id)));
        // Teacher forcing the greedy output reproduces the same argmaxes.
        let mut forced = vec![BOA];
        forced.extend_from_slice(&ids[..COEFFS - 1]);
        let mut g = Graph::new(&store);
        let out = e
            .joint_forward(&mut g, &b, &seq, &prev, &DecoderInput::Tokens(forced))
            .unwrap();
        let h = e.decoder_hidden(&mut g, &out).unwrap();
        let logits = e.head.forward(&mut g, h).unwrap();
        let v = g.value(logits).to_vec();
        for (i, &id) in ids.iter().enumerate() {
            let row = &v[i * VOCAB..(i + 1) * VOCAB];
            assert_eq!(masked_choice(row, id_range(Modality::Action), 0.0, &mut r), id);
        }
    }

    #[test]
    fn direction_off_isolates_backbone() {
        let (store, b, e, seq, prev) = setup(DecoderKind::Autoregressive);
        let run = |forced: Vec<usize>| {
            let mut g = Graph::new(&store);
            let out = e
                .joint_forward(&mut g, &b, &seq, &prev, &DecoderInput::Tokens(forced))
                .unwrap();
            g.value(out.backbone.hidden).to_vec()
        };
        let a = run(vec![BOA, ACTION_BASE + 1, ACTION_BASE + 2]);
        let c = run(vec![BOA, ACTION_BASE + 200, ACTION_BASE + 9]);
        assert_eq!(a, c);
    }

    #[test]
    fn ar_rejects_backbone_to_expert() {
        let cfg = ExpertConfig {
            decoder: DecoderKind::Autoregressive,
            backbone_to_expert: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn euler_planted_fields() {
        let x0: [f64; COEFFS] = std::array::from_fn(|i| i as f64 * 0.3 - 1.0);
        let c: [f64; COEFFS] = std::array::from_fn(|i| 0.5 - i as f64 * 0.1);
        let x = flow_euler(&x0, 10, |_, _| c);
        for i in 0..COEFFS {
            assert!((x[i] - (x0[i] + c[i])).abs() < 1e-12);
        }
        let y = flow_euler(&x0, 10, |x, _| x.map(|v| -v));
        for i in 0..COEFFS {
            assert!((y[i] - 0.9f64.powi(10) * x0[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_target_is_straight_line() {
        let a0 = [0.0; COEFFS];
        let a1 = [1.0; COEFFS];
        assert_eq!(flow_target(&a0, &a1), [1.0; COEFFS]);
        assert_eq!(flow_interpolate(&a0, &a1, 0.25), [0.25; COEFFS]);
    }
}
