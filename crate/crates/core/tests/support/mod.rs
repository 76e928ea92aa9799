//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use drivewm::backbone::{Backbone, Corpus, Frontend, ModelConfig, SequenceConfig, TokenSequence};
use drivewm::diffusion::{loss_wm_diff, Denoiser, NoiseDraw, NoiseSchedule};
use drivewm::experts::{DecoderInput, DecoderKind, Expert, ExpertConfig};
use drivewm::gridworld::{generate_records, ScenarioMix, SceneRecord, Trajectory};
use drivewm::par::Exec;
use drivewm::rng::{self, streams};
use drivewm::tensor::{
    gradient_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Result, Scalar, ScalarFn, Tensor, Var,
};
use drivewm::tokenizers::{ActionTokenizer, VisualCodebook};
use rand::Rng;

pub const TOL_F32: f64 = 1e-4;
pub const TOL_F64: f64 = 1e-6;

pub fn records(n: usize, seed: u64) -> Vec<SceneRecord> {
    generate_records(n, seed, &ScenarioMix::default(), Exec::Sequential)
        .unwrap()
        .into_iter()
        .flat_map(|c| c.records)
        .collect()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng::rng(seed, streams::INIT, 900))
}

/// Fixed non-trivial weights so that `sum(w * out)` exercises every output.
fn weights(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0 + 0.05).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

fn reduce<T: Scalar>(g: &mut Graph<'_, T>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(weights(&shape).cast());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// One differentiable op wired into a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpCase {
    Matmul,
    Linear,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Gelu,
    Softmax,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Mse,
    L1,
    ConcatRows,
    ConcatCols,
    GatherRows,
    SliceRows,
    MeanRows,
    Sum,
    Reshape,
    Attention,
}

pub const ALL_OPS: [OpCase; 22] = [
    OpCase::Matmul,
    OpCase::Linear,
    OpCase::Add,
    OpCase::Sub,
    OpCase::Mul,
    OpCase::AddRow,
    OpCase::Scale,
    OpCase::Gelu,
    OpCase::Softmax,
    OpCase::LayerNorm,
    OpCase::Embedding,
    OpCase::CrossEntropy,
    OpCase::Mse,
    OpCase::L1,
    OpCase::ConcatRows,
    OpCase::ConcatCols,
    OpCase::GatherRows,
    OpCase::SliceRows,
    OpCase::MeanRows,
    OpCase::Sum,
    OpCase::Reshape,
    OpCase::Attention,
];

impl OpCase {
    pub fn inputs(self) -> Vec<Tensor<f64>> {
        let s = self as u64;
        let r = |shape: &[usize], k: u64| randn(shape, 100 * s + k);
        match self {
            OpCase::Matmul => vec![r(&[3, 4], 0), r(&[4, 5], 1)],
            OpCase::Linear => vec![r(&[3, 4], 0), r(&[4, 5], 1), r(&[5], 2)],
            OpCase::Add | OpCase::Sub | OpCase::Mul | OpCase::Mse => vec![r(&[3, 4], 0), r(&[3, 4], 1)],
            OpCase::AddRow => vec![r(&[3, 4], 0), r(&[4], 1)],
            OpCase::LayerNorm => vec![r(&[3, 5], 0), r(&[5], 1), r(&[5], 2)],
            OpCase::Embedding => vec![r(&[7, 3], 0)],
            OpCase::CrossEntropy => vec![r(&[5, 7], 0)],
            OpCase::L1 => {
                // Differences bounded away from the kink at zero.
                let a = r(&[3, 4], 0);
                let mut rr = rng::rng(s, streams::INIT, 901);
                let d: Vec<f64> = (0..12)
                    .map(|_| {
                        let m: f64 = rr.gen_range(0.2..1.0);
                        if rr.gen::<bool>() {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect();
                let b: Vec<f64> = a.data().iter().zip(&d).map(|(x, y)| x + y).collect();
                vec![a, Tensor::from_f64(&[3, 4], &b).unwrap()]
            }
            OpCase::ConcatRows => vec![r(&[2, 3], 0), r(&[3, 3], 1)],
            OpCase::ConcatCols => vec![r(&[3, 2], 0), r(&[3, 4], 1)],
            OpCase::Attention => vec![r(&[4, 6], 0), r(&[5, 6], 1), r(&[5, 6], 2)],
            _ => vec![r(&[3, 4], 0)],
        }
    }
}

impl ScalarFn for OpCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let out = match self {
            OpCase::Matmul => g.matmul(x[0], x[1])?,
            OpCase::Linear => g.linear(x[0], x[1], Some(x[2]))?,
            OpCase::Add => g.add(x[0], x[1])?,
            OpCase::Sub => g.sub(x[0], x[1])?,
            OpCase::Mul => g.mul(x[0], x[1])?,
            OpCase::AddRow => g.add_row(x[0], x[1])?,
            OpCase::Scale => g.scale(x[0], -1.7),
            OpCase::Gelu => g.gelu(x[0]),
            OpCase::Softmax => g.softmax_rows(x[0])?,
            OpCase::LayerNorm => g.layer_norm(x[0], x[1], x[2], 1e-5)?,
            OpCase::Embedding => g.embedding(x[0], &[3, 0, 3, 6])?,
            OpCase::CrossEntropy => return g.cross_entropy(x[0], &[1, 6, 0, 2, 2], &[true, true, false, true, true]),
            OpCase::Mse => return g.mse(x[0], x[1]),
            OpCase::L1 => return g.l1(x[0], x[1]),
            OpCase::ConcatRows => g.concat_rows(&[x[0], x[1]])?,
            OpCase::ConcatCols => g.concat_cols(&[x[0], x[1]])?,
            OpCase::GatherRows => g.gather_rows(x[0], &[2, 0, 2])?,
            OpCase::SliceRows => g.slice_rows(x[0], 1, 2)?,
            OpCase::MeanRows => g.mean_rows(x[0]),
            OpCase::Sum => return Ok(g.sum(x[0])),
            OpCase::Reshape => g.reshape(x[0], &[2, 6])?,
            OpCase::Attention => {
                // Causal-style mask with query row 1 fully masked.
                let mut allowed = vec![false; 4 * 5];
                for i in 0..4 {
                    for j in 0..5 {
                        allowed[i * 5 + j] = i != 1 && j <= i + 1;
                    }
                }
                g.attention(x[0], x[1], x[2], 2, &allowed)?
            }
        };
        reduce(g, out)
    }
}

pub fn check_op<T: Scalar>(op: OpCase, tol: f64) -> GradCheckReport {
    let params = ParamStore::<f64>::new();
    gradient_check::<T, _>(
        &op,
        &params,
        &op.inputs(),
        GradCheckOptions {
            h: 1e-5,
            tol,
            max_per_tensor: None,
        },
    )
    .unwrap()
}

/// Small tokenised corpus for model-level checks.
pub struct Fixture {
    pub corpus: Corpus,
    pub codebook: VisualCodebook,
    pub actions: ActionTokenizer,
}

pub fn fixture(frontend: Frontend) -> Fixture {
    let recs = records(32, 7);
    let codebook = VisualCodebook::fit(recs.iter().map(|r| r.image.as_slice()), 0, Exec::Sequential)
        .unwrap()
        .codebook;
    let actions = ActionTokenizer::new(3.5).unwrap();
    let cb = (frontend == Frontend::Discrete).then_some(&codebook);
    let corpus = Corpus::new(recs, cb, &actions, Exec::Sequential).unwrap();
    Fixture {
        corpus,
        codebook,
        actions,
    }
}

pub fn mini_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        max_len: 512,
    }
}

/// Two-layer backbone with its action and world-model losses.
pub struct MiniBackbone {
    pub backbone: Backbone,
    pub seq: TokenSequence,
}

impl ScalarFn for MiniBackbone {
    fn eval<T: Scalar>(&self, g: &mut Graph<'_, T>, _: &[Var]) -> Result<Var> {
        let out = self.backbone.forward(g, &self.seq).map_err(tensor_err)?;
        let la = self.backbone.loss_action(g, &out, &self.seq).map_err(tensor_err)?;
        if self.seq.frontend == Frontend::Continuous {
            return Ok(la);
        }
        let lw = self.backbone.loss_wm_ar(g, &out, &self.seq).map_err(tensor_err)?;
        g.add(la, lw)
    }
}

fn tensor_err(e: drivewm::error::Error) -> drivewm::tensor::TensorError {
    match e {
        drivewm::error::Error::Tensor(t) => t,
        other => drivewm::tensor::TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

/// Larger-than-default init so gradients clear the relative-error floor.
fn widen(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::rng(seed, streams::INIT, 77);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if name.ends_with(".gain") {
            continue;
        }
        for v in store.get_mut(id).data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
}

pub fn mini_backbone(frontend: Frontend) -> (ParamStore<f64>, MiniBackbone) {
    let fx = fixture(frontend);
    let mut store = ParamStore::new();
    let backbone = Backbone::init(&mut store, mini_config(), frontend, &mut rng::rng(3, streams::INIT, 0)).unwrap();
    widen(&mut store, 3);
    let cfg = SequenceConfig::new(1, 0.0, frontend).unwrap();
    let seq = fx.corpus.sequence(5, &cfg, true).unwrap();
    (store, MiniBackbone { backbone, seq })
}

/// Backbone plus query expert through joint attention, L1 loss.
pub struct MiniExpert {
    pub backbone: Backbone,
    pub expert: Expert,
    pub seq: TokenSequence,
    pub prev: [usize; 12],
    pub target: Trajectory,
    pub input: DecoderInput,
}

impl ScalarFn for MiniExpert {
    fn eval<T: Scalar>(&self, g: &mut Graph<'_, T>, _: &[Var]) -> Result<Var> {
        let out = self
            .expert
            .joint_forward(g, &self.backbone, &self.seq, &self.prev, &self.input)
            .map_err(tensor_err)?;
        match self.expert.cfg.decoder {
            DecoderKind::Query => self.expert.loss_query(g, &out, &self.target).map_err(tensor_err),
            DecoderKind::Autoregressive => {
                let ids: [usize; 12] = std::array::from_fn(|i| self.prev[(i + 1) % 12]);
                self.expert.loss_ar(g, &out, &ids).map_err(tensor_err)
            }
            DecoderKind::Flow => {
                let a0 = [0.3; 12];
                let a1 = drivewm::experts::normalize(&self.target);
                self.expert.loss_flow(g, &out, &a0, &a1).map_err(tensor_err)
            }
        }
    }
}

pub fn mini_expert(decoder: DecoderKind, backbone_to_expert: bool) -> (ParamStore<f64>, MiniExpert) {
    let fx = fixture(Frontend::Discrete);
    let mut store = ParamStore::new();
    let backbone = Backbone::init(
        &mut store,
        mini_config(),
        Frontend::Discrete,
        &mut rng::rng(4, streams::INIT, 0),
    )
    .unwrap();
    let cfg = ExpertConfig {
        d_model: 8,
        mlp_ratio: 2,
        decoder,
        queries: 6,
        flow_steps: 10,
        backbone_to_expert,
    };
    let expert = Expert::init(&mut store, cfg, &backbone, &mut rng::rng(4, streams::INIT, 2)).unwrap();
    widen(&mut store, 4);
    let seqcfg = SequenceConfig::new(1, 0.0, Frontend::Discrete).unwrap();
    let seq = fx.corpus.sequence(5, &seqcfg, false).unwrap();
    let prev = fx.corpus.tokens[4].action;
    let input = match decoder {
        DecoderKind::Query => DecoderInput::Query,
        DecoderKind::Autoregressive => {
            let mut v = vec![drivewm::tokenizers::BOA];
            v.extend_from_slice(&prev[1..]);
            DecoderInput::Tokens(v)
        }
        DecoderKind::Flow => DecoderInput::Flow { x: [0.1; 12], t: 0.4 },
    };
    let target = fx.corpus.records[5].expert;
    (
        store,
        MiniExpert {
            backbone,
            expert,
            seq,
            prev,
            target,
            input,
        },
    )
}

/// Backbone features into the denoiser, epsilon-prediction loss.
pub struct MiniDiffusion {
    pub backbone: Backbone,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub seq: TokenSequence,
    pub next: Vec<u8>,
    pub draw: NoiseDraw,
}

impl ScalarFn for MiniDiffusion {
    fn eval<T: Scalar>(&self, g: &mut Graph<'_, T>, _: &[Var]) -> Result<Var> {
        let out = self.backbone.forward(g, &self.seq).map_err(tensor_err)?;
        let fv = self.backbone.pool_visual(g, &out, &self.seq).map_err(tensor_err)?;
        let fa = self.backbone.pool_action(g, &out, &self.seq).map_err(tensor_err)?;
        loss_wm_diff(g, &self.denoiser, &self.schedule, fv, fa, &self.next, &self.draw).map_err(tensor_err)
    }
}

pub fn mini_diffusion() -> (ParamStore<f64>, MiniDiffusion) {
    let fx = fixture(Frontend::Continuous);
    let mut store = ParamStore::new();
    let backbone = Backbone::init(
        &mut store,
        mini_config(),
        Frontend::Continuous,
        &mut rng::rng(5, streams::INIT, 0),
    )
    .unwrap();
    let denoiser = Denoiser::init(&mut store, 16, &mut rng::rng(5, streams::INIT, 1)).unwrap();
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2);
    let cfg = SequenceConfig::new(1, 0.0, Frontend::Continuous).unwrap();
    let seq = fx.corpus.sequence(5, &cfg, true).unwrap();
    let draw = NoiseDraw::sample(&schedule, &mut rng::rng(5, streams::NOISE, 0));
    let next = fx.corpus.records[6].image.clone();
    (
        store,
        MiniDiffusion {
            backbone,
            denoiser,
            schedule,
            seq,
            next,
            draw,
        },
    )
}

pub fn check_model<T: Scalar, F: ScalarFn>(f: &F, store: &ParamStore<f64>, tol: f64) -> GradCheckReport {
    gradient_check::<T, _>(
        f,
        store,
        &[],
        GradCheckOptions {
            h: 1e-5,
            tol,
            max_per_tensor: Some(12),
        },
    )
    .unwrap()
}
