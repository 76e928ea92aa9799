use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Model;
use crate::backbone::{Corpus, Frontend, SequenceConfig};
use crate::diffusion::{loss_wm_diff, NoiseDraw};
use crate::error::{invalid, Result};
use crate::experts::{flow_interpolate, normalize, DecoderInput, DecoderKind};
use crate::par::Exec;
use crate::rng::{self, streams};
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, Graph, Scalar, StepOutcome, Tensor, Var};
use crate::tokenizers::{BOA, COEFFS};

pub const LOSS_HEADER: &str = "step,lr,loss_total,loss_action,loss_wm,grad_norm";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Action cross-entropy plus the weighted world-model term of the
    /// backbone's front end.
    Stage1 { sequence: SequenceConfig, wm_weight: f64 },
    /// The expert decoder's own loss on the stage-2 context.
    Stage2 { sequence: SequenceConfig },
}

impl Objective {
    pub fn sequence(&self) -> &SequenceConfig {
        match self {
            Objective::Stage1 { sequence, .. } | Objective::Stage2 { sequence } => sequence,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub backbone_lr_scale: f64,
    pub warmup: usize,
    pub floor_frac: f64,
    pub adamw: AdamWConfig,
    /// Global-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 2e-4,
            backbone_lr_scale: 1.0,
            warmup: 100,
            floor_frac: 0.1,
            adamw: AdamWConfig::default(),
            grad_clip: 1.0,
            freeze_backbone: false,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// `None` when the objective has no action term.
    pub action: Option<f64>,
    /// `None` when the objective has no world-model term.
    pub wm: Option<f64>,
    pub grad_norm: f64,
    pub skipped: bool,
}

impl LossRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.total,
            opt(self.action),
            opt(self.wm),
            self.grad_norm
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<LossRow>,
    /// Samples whose clip had no next frame for the diffusion term.
    pub diffusion_skipped: usize,
    /// Steps skipped because a gradient was not finite.
    pub skipped_steps: usize,
    /// Gradient norm of the backbone parameters on the first step.
    pub first_backbone_grad_norm: f64,
    /// Set when a loss became non-finite; parameters hold the last good step.
    pub diverged: Option<String>,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(LOSS_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}

struct SampleOut<T> {
    action: Option<f64>,
    wm: Option<f64>,
    grads: Vec<Option<Vec<T>>>,
}

/// Which loss terms a sample contributes.
fn terms(objective: &Objective, corpus: &Corpus, t: usize, has_diffusion: bool, frontend: Frontend) -> (bool, bool) {
    match objective {
        Objective::Stage1 { sequence, wm_weight } => {
            let action = !sequence.vision_only;
            let wm = *wm_weight > 0.0
                && match frontend {
                    Frontend::Discrete => true,
                    Frontend::Continuous => has_diffusion && next_in_clip(corpus, t),
                };
            (action, wm)
        }
        Objective::Stage2 { .. } => (true, false),
    }
}

fn next_in_clip(corpus: &Corpus, t: usize) -> bool {
    corpus.clips.iter().any(|c| c.contains(&t) && t + 1 < c.end)
}

fn weighted<T: Scalar>(g: &mut Graph<'_, T>, parts: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in parts {
        let s = g.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    acc.ok_or_else(|| invalid("sample has no loss terms"))
}

#[allow(clippy::too_many_arguments)]
fn sample_step<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    objective: &Objective,
    t: usize,
    weights: (f64, f64),
    draw_index: u64,
    seed: u64,
) -> Result<SampleOut<T>> {
    let mut g = Graph::new(&model.store);
    let (use_a, use_w) = terms(objective, corpus, t, model.denoiser.is_some(), model.spec.frontend);
    let mut parts = Vec::new();
    let (mut la, mut lw) = (None, None);
    match objective {
        Objective::Stage1 { sequence, wm_weight } => {
            let seq = corpus.sequence(t, sequence, !sequence.vision_only)?;
            let out = model.backbone.forward(&mut g, &seq)?;
            if use_a {
                let l = model.backbone.loss_action(&mut g, &out, &seq)?;
                la = Some(g.scalar_value(l).as_f64());
                parts.push((l, weights.0));
            }
            if use_w {
                let l = match model.spec.frontend {
                    Frontend::Discrete => model.backbone.loss_wm_ar(&mut g, &out, &seq)?,
                    Frontend::Continuous => {
                        let den = model
                            .denoiser
                            .as_ref()
                            .ok_or_else(|| invalid("model has no denoiser"))?;
                        let fv = model.backbone.pool_visual(&mut g, &out, &seq)?;
                        let fa = if sequence.vision_only {
                            g.constant(Tensor::zeros(&[1, model.spec.model.d_model]))
                        } else {
                            model.backbone.pool_action(&mut g, &out, &seq)?
                        };
                        let draw = NoiseDraw::sample(&model.schedule, &mut rng::rng(seed, streams::NOISE, draw_index));
                        loss_wm_diff(
                            &mut g,
                            den,
                            &model.schedule,
                            fv,
                            fa,
                            &corpus.records[t + 1].image,
                            &draw,
                        )?
                    }
                };
                lw = Some(g.scalar_value(l).as_f64());
                parts.push((l, weights.1 * wm_weight));
            }
        }
        Objective::Stage2 { sequence } => {
            let expert = model
                .expert
                .as_ref()
                .ok_or_else(|| invalid("stage 2 needs an expert"))?;
            let seq = corpus.sequence(t, sequence, false)?;
            let prev = &corpus.tokens[t - 1].action;
            let record = &corpus.records[t];
            let l = match expert.cfg.decoder {
                DecoderKind::Query => {
                    let out = expert.joint_forward(&mut g, &model.backbone, &seq, prev, &DecoderInput::Query)?;
                    expert.loss_query(&mut g, &out, &record.expert)?
                }
                DecoderKind::Autoregressive => {
                    let target = &corpus.tokens[t].action;
                    let mut forced = vec![BOA];
                    forced.extend_from_slice(&target[..COEFFS - 1]);
                    let out =
                        expert.joint_forward(&mut g, &model.backbone, &seq, prev, &DecoderInput::Tokens(forced))?;
                    expert.loss_ar(&mut g, &out, target)?
                }
                DecoderKind::Flow => {
                    let mut r = rng::rng(seed, streams::NOISE, draw_index);
                    let a0: [f64; COEFFS] = std::array::from_fn(|_| r.sample(StandardNormal));
                    let tau: f64 = r.gen();
                    let a1 = normalize(&record.expert);
                    let x = flow_interpolate(&a0, &a1, tau);
                    let out =
                        expert.joint_forward(&mut g, &model.backbone, &seq, prev, &DecoderInput::Flow { x, t: tau })?;
                    expert.loss_flow(&mut g, &out, &a0, &a1)?
                }
            };
            la = Some(g.scalar_value(l).as_f64());
            parts.push((l, weights.0));
        }
    }
    if la.is_some_and(|v| !v.is_finite()) || lw.is_some_and(|v| !v.is_finite()) {
        return Ok(SampleOut {
            action: la,
            wm: lw,
            grads: Vec::new(),
        });
    }
    let loss = weighted(&mut g, &parts)?;
    let grads = g.backward(loss)?.into_param_grads();
    Ok(SampleOut {
        action: la,
        wm: lw,
        grads,
    })
}

/// Usable target records of an objective.
pub fn objective_targets(objective: &Objective, corpus: &Corpus) -> Vec<usize> {
    corpus.targets(objective.sequence(), false)
}

/// Optimises `model` in place on every usable target of the objective.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Corpus,
    objective: &Objective,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let samples = objective_targets(objective, corpus);
    if samples.is_empty() {
        return Err(invalid(
            "dataset has no usable target frames for this sequence configuration",
        ));
    }
    train_on(model, corpus, objective, opts, &samples)
}

/// Optimises `model` in place on the given target records. Batches walk
/// seeded per-epoch permutations of `samples`; per-sample gradients are
/// summed in batch order.
pub fn train_on<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Corpus,
    objective: &Objective,
    opts: &TrainOptions,
    samples: &[usize],
) -> Result<TrainReport> {
    if opts.steps == 0 || opts.batch == 0 {
        return Err(invalid("steps and batch must be positive"));
    }
    if let Objective::Stage1 { sequence, wm_weight } = objective {
        if sequence.vision_only && *wm_weight <= 0.0 {
            return Err(invalid("vision-only pretraining needs a positive world-model weight"));
        }
        if sequence.frontend != model.spec.frontend {
            return Err(invalid("objective and model front ends differ"));
        }
    }
    if matches!(objective, Objective::Stage2 { .. }) && model.expert.is_none() {
        return Err(invalid("stage 2 needs an expert"));
    }
    if samples.is_empty() {
        return Err(invalid("no target records to train on"));
    }
    let usable = objective_targets(objective, corpus);
    if let Some(t) = samples.iter().find(|t| usable.binary_search(t).is_err()) {
        return Err(invalid(format!("record {t} is not a usable target")));
    }
    model.store.set_trainable_prefix("backbone.", !opts.freeze_backbone);
    let mut opt = AdamW::new(&model.store, opts.adamw);
    if opts.backbone_lr_scale != 1.0 {
        opt.scale_lr_prefix(&model.store, "backbone.", opts.backbone_lr_scale);
    }
    let backbone_ids: Vec<usize> = model
        .store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.name.starts_with("backbone."))
        .map(|(i, _)| i)
        .collect();

    let mut report = TrainReport::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        while batch.len() < opts.batch {
            if cursor == order.len() {
                order = samples.to_vec();
                order.shuffle(&mut rng::rng(opts.seed, streams::DATA_ORDER, epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let has_diff = model.denoiser.is_some();
        let flags: Vec<(bool, bool)> = batch
            .iter()
            .map(|&t| terms(objective, corpus, t, has_diff, model.spec.frontend))
            .collect();
        let n_a = flags.iter().filter(|f| f.0).count();
        let n_w = flags.iter().filter(|f| f.1).count();
        if matches!(objective, Objective::Stage1 { wm_weight, .. } if *wm_weight > 0.0)
            && model.spec.frontend == Frontend::Continuous
        {
            report.diffusion_skipped += flags.iter().filter(|f| !f.1).count();
        }
        let weights = (
            if n_a > 0 { 1.0 / n_a as f64 } else { 0.0 },
            if n_w > 0 { 1.0 / n_w as f64 } else { 0.0 },
        );
        let items: Vec<(usize, u64)> = batch
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, (step * opts.batch + i) as u64))
            .collect();
        let m: &Model<T> = model;
        let outs = opts.exec.map(&items, |&(t, k)| {
            sample_step(m, corpus, objective, t, weights, k, opts.seed)
        });
        let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;

        let mean = |sel: fn(&SampleOut<T>) -> Option<f64>| {
            let v: Vec<f64> = outs.iter().filter_map(sel).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let action = mean(|o| o.action);
        let wm = mean(|o| o.wm);
        let w = match objective {
            Objective::Stage1 { wm_weight, .. } => *wm_weight,
            Objective::Stage2 { .. } => 0.0,
        };
        let total = action.unwrap_or(0.0) + wm.map_or(0.0, |x| w * x);
        let lr = cosine_lr(
            (step + 1) as u64,
            opts.warmup as u64,
            opts.steps as u64,
            opts.lr,
            opts.floor_frac,
        )?;
        if !total.is_finite() {
            report.diverged = Some(format!("non-finite loss at step {step}"));
            report.log.push(LossRow {
                step,
                lr,
                total,
                action,
                wm,
                grad_norm: f64::NAN,
                skipped: true,
            });
            break;
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; model.store.len()];
        for o in outs {
            for (acc, g) in grads.iter_mut().zip(o.grads) {
                if let Some(g) = g {
                    match acc {
                        None => *acc = Some(g),
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += *y),
                    }
                }
            }
        }
        let trainable = |i: usize| model.store.is_trainable(crate::tensor::ParamId(i));
        let sq = |g: &Vec<T>| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        let norm = grads
            .iter()
            .enumerate()
            .filter(|(i, _)| trainable(*i))
            .filter_map(|(_, g)| g.as_ref().map(sq))
            .sum::<f64>()
            .sqrt();
        if step == 0 {
            report.first_backbone_grad_norm = backbone_ids
                .iter()
                .filter_map(|&i| grads[i].as_ref().map(sq))
                .sum::<f64>()
                .sqrt();
        }
        if opts.grad_clip > 0.0 && norm > opts.grad_clip {
            let s = T::lit(opts.grad_clip / norm);
            grads
                .iter_mut()
                .flatten()
                .for_each(|g| g.iter_mut().for_each(|v| *v = *v * s));
        }
        let outcome = opt.step(&mut model.store, &grads, lr)?;
        let skipped = outcome == StepOutcome::SkippedNonFinite;
        if skipped {
            report.skipped_steps += 1;
        }
        report.log.push(LossRow {
            step,
            lr,
            total,
            action,
            wm,
            grad_norm: norm,
            skipped,
        });
    }
    model.store.set_trainable_prefix("backbone.", true);
    Ok(report)
}
