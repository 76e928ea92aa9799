//! Model assembly, two-stage training, evaluation, the scale sweep, the
//! sequence-design ablations and the decoder latency bench.

mod evaluate;
mod experiments;
mod latency;
mod trainer;

pub use evaluate::{eval_targets, evaluate, predict, EvalOutcome};
pub use experiments::{
    ablation_variants, median_ade, run_ablations, run_scale_sweep, sweep_cells, AblationVariant, SweepCell, SweepRow,
    SweepVariant, SWEEP_HEADER,
};
pub use latency::{linear_fit, measure_latency, time_median, LatencyReport, LatencyRow, LATENCY_HEADER};
pub use trainer::{objective_targets, train, train_on, LossRow, Objective, TrainOptions, TrainReport, LOSS_HEADER};

use std::path::{Path, PathBuf};

use crate::backbone::{Backbone, Corpus, Frontend, ModelConfig, SequenceConfig};
use crate::config::Config;
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::experts::{DecoderKind, Expert, ExpertConfig};
use crate::gridworld::{ScenarioMix, SceneRecord};
use crate::par::Exec;
use crate::rng::{self, streams};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamWConfig, CheckpointEntry, ParamStore, Scalar};
use crate::tokenizers::{ActionTokenizer, VisualCodebook};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Which parameter groups a model carries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub frontend: Frontend,
    pub diffusion: bool,
    pub expert: Option<ExpertConfig>,
}

/// Parameters plus the modules that index into them.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub denoiser: Option<Denoiser>,
    pub expert: Option<Expert>,
    pub schedule: NoiseSchedule,
    pub codebook: Option<VisualCodebook>,
    pub actions: ActionTokenizer,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters; each group draws from its own init stream, so the
    /// backbone initialisation does not depend on which other groups exist.
    pub fn new(
        spec: ModelSpec,
        seed: u64,
        schedule: NoiseSchedule,
        codebook: Option<VisualCodebook>,
        actions: ActionTokenizer,
    ) -> Result<Self> {
        if spec.frontend == Frontend::Discrete && codebook.is_none() {
            return Err(invalid("discrete front end needs a visual codebook"));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::init(
            &mut store,
            spec.model,
            spec.frontend,
            &mut rng::rng(seed, streams::INIT, 0),
        )?;
        let denoiser = if spec.diffusion {
            Some(Denoiser::init(
                &mut store,
                spec.model.d_model,
                &mut rng::rng(seed, streams::INIT, 1),
            )?)
        } else {
            None
        };
        let expert = match spec.expert {
            Some(ec) => Some(Expert::init(
                &mut store,
                ec,
                &backbone,
                &mut rng::rng(seed, streams::INIT, 2),
            )?),
            None => None,
        };
        Ok(Self {
            spec,
            store,
            backbone,
            denoiser,
            expert,
            schedule,
            codebook,
            actions,
        })
    }

    /// Parameters and codebook as checkpoint entries.
    pub fn entries(&self) -> Vec<CheckpointEntry> {
        let mut e = self.store.to_entries();
        if let Some(cb) = &self.codebook {
            e.push(cb.to_entry());
        }
        e
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_checkpoint::<T>(path, &self.entries())?)
    }

    /// Model whose every parameter is restored from `entries`.
    pub fn restore(
        spec: ModelSpec,
        entries: &[CheckpointEntry],
        schedule: NoiseSchedule,
        actions: ActionTokenizer,
    ) -> Result<Self> {
        let codebook = VisualCodebook::from_entries(entries);
        let mut m = Self::new(spec, 0, schedule, codebook, actions)?;
        let n = m.store.load_entries(entries)?;
        if n != m.store.len() {
            return Err(invalid(format!(
                "checkpoint restores {n} of {} parameters; architecture differs from the configuration",
                m.store.len()
            )));
        }
        Ok(m)
    }

    /// Copies every stored tensor whose name this model shares; returns the count.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<usize> {
        if let Some(cb) = VisualCodebook::from_entries(entries) {
            self.codebook = Some(cb);
        }
        Ok(self.store.load_entries(entries)?)
    }
}

/// Typed view of a [`Config`].
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub exec: Exec,
    pub precision: Precision,
    pub model: ModelConfig,
    pub sequence: SequenceConfig,
    pub expert: ExpertConfig,
    pub schedule: NoiseSchedule,
    pub gamma: f64,
    pub codebook_seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub stage: u8,
    pub train: TrainOptions,
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage2_history: usize,
    pub data_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub data_n: usize,
    pub mix: ScenarioMix,
    pub eval_max: usize,
    pub eval_temperature: f64,
}

fn parse_frontend(s: &str) -> Result<Frontend> {
    Frontend::from_name(s).ok_or_else(|| Error::Config(format!("unknown front end '{s}'")))
}

fn parse_decoder(s: &str) -> Result<DecoderKind> {
    DecoderKind::from_name(s).ok_or_else(|| Error::Config(format!("unknown decoder '{s}'")))
}

impl RunConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let model = ModelConfig {
            d_model: c.get("model.d_model")?,
            layers: c.get("model.layers")?,
            heads: c.get("model.heads")?,
            mlp_ratio: c.get("model.mlp_ratio")?,
            max_len: c.get("model.max_len")?,
        };
        model.validate()?;
        let mut sequence = SequenceConfig::new(
            c.get("sequence.history")?,
            c.get("sequence.interval_s")?,
            parse_frontend(c.raw("sequence.frontend")?)?,
        )?;
        sequence.vision_only = c.get("sequence.vision_only")?;
        let expert = ExpertConfig {
            d_model: c.get("expert.d_model")?,
            mlp_ratio: c.get("expert.mlp_ratio")?,
            decoder: parse_decoder(c.raw("expert.decoder")?)?,
            queries: c.get("expert.queries")?,
            flow_steps: c.get("expert.flow_steps")?,
            backbone_to_expert: c.get("expert.backbone_to_expert")?,
        };
        expert.validate()?;
        let steps: usize = c.get("diffusion.steps")?;
        if steps < 2 {
            return Err(Error::Config("diffusion.steps must be at least 2".into()));
        }
        let schedule = NoiseSchedule::linear(steps, c.get("diffusion.beta_start")?, c.get("diffusion.beta_end")?);
        if schedule.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("diffusion betas must lie in (0, 1)".into()));
        }
        let precision = match c.raw("train.precision")? {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(Error::Config(format!("unknown precision '{other}'"))),
        };
        let exec = if c.get::<bool>("run.parallel")? {
            Exec::Parallel
        } else {
            Exec::Sequential
        };
        let seed: u64 = c.get("run.seed")?;
        let train = TrainOptions {
            steps: c.get("train.steps")?,
            batch: c.get("train.batch")?,
            lr: c.get("train.lr")?,
            backbone_lr_scale: c.get("train.backbone_lr_scale")?,
            warmup: c.get("train.warmup")?,
            floor_frac: c.get("train.floor_frac")?,
            adamw: AdamWConfig {
                beta1: c.get("train.beta1")?,
                beta2: c.get("train.beta2")?,
                eps: c.get("train.eps")?,
                weight_decay: c.get("train.weight_decay")?,
            },
            grad_clip: c.get("train.grad_clip")?,
            freeze_backbone: c.get("train.freeze_backbone")?,
            seed,
            exec,
        };
        let stage: u8 = c.get("train.stage")?;
        if stage != 1 && stage != 2 {
            return Err(Error::Config(format!("train.stage must be 1 or 2, got {stage}")));
        }
        let stage1_checkpoint = c.path("train.stage1_checkpoint")?;
        if stage == 2 && stage1_checkpoint.is_none() {
            return Err(Error::Config("stage 2 needs train.stage1_checkpoint".into()));
        }
        Ok(Self {
            seed,
            exec,
            precision,
            model,
            sequence,
            expert,
            schedule,
            gamma: c.get("tokenizer.gamma")?,
            codebook_seed: c.get("tokenizer.codebook_seed")?,
            alpha: c.get("loss.alpha")?,
            beta: c.get("loss.beta")?,
            stage,
            train,
            stage1_checkpoint,
            stage2_history: c.get("train.stage2_history")?,
            data_path: c.path("data.path")?,
            eval_path: c.path("data.eval_path")?,
            data_n: c.get("data.n")?,
            mix: ScenarioMix::parse(c.raw("data.mix")?)?,
            eval_max: c.get("eval.max_records")?,
            eval_temperature: c.get("eval.temperature")?,
        })
    }

    pub fn actions(&self) -> Result<ActionTokenizer> {
        Ok(ActionTokenizer::new(self.gamma)?)
    }

    /// World-model weight of the configured front end.
    pub fn wm_weight(&self) -> f64 {
        match self.sequence.frontend {
            Frontend::Discrete => self.alpha,
            Frontend::Continuous => self.beta,
        }
    }

    pub fn stage1_spec(&self) -> ModelSpec {
        ModelSpec {
            model: self.model,
            frontend: self.sequence.frontend,
            diffusion: self.sequence.frontend == Frontend::Continuous && self.beta > 0.0,
            expert: None,
        }
    }

    pub fn stage2_spec(&self) -> ModelSpec {
        ModelSpec {
            model: self.model,
            frontend: self.sequence.frontend,
            diffusion: false,
            expert: Some(self.expert),
        }
    }

    /// Context configuration of stage 2.
    pub fn stage2_sequence(&self) -> Result<SequenceConfig> {
        let mut s = SequenceConfig::new(
            self.stage2_history,
            self.sequence.interval_frames as f64 / 2.0,
            self.sequence.frontend,
        )?;
        s.vision_only = false;
        Ok(s)
    }

    /// Parameter groups present in a checkpoint, with this configuration's
    /// architecture.
    pub fn spec_for_entries(&self, entries: &[CheckpointEntry]) -> ModelSpec {
        let has = |p: &str| entries.iter().any(|e| e.name.starts_with(p));
        ModelSpec {
            model: self.model,
            frontend: self.sequence.frontend,
            diffusion: has("diffusion."),
            expert: has("expert.").then_some(self.expert),
        }
    }

    /// Context configuration a model is evaluated with: stage 2's when it
    /// carries an expert.
    pub fn eval_sequence(&self, spec: &ModelSpec) -> Result<SequenceConfig> {
        if spec.expert.is_some() {
            self.stage2_sequence()
        } else {
            Ok(self.sequence)
        }
    }

    pub fn stage1_objective(&self) -> Objective {
        Objective::Stage1 {
            sequence: self.sequence,
            wm_weight: self.wm_weight(),
        }
    }

    pub fn stage2_objective(&self) -> Result<Objective> {
        Ok(Objective::Stage2 {
            sequence: self.stage2_sequence()?,
        })
    }
}

/// Fits the visual codebook on the training frames.
pub fn fit_codebook(records: &[SceneRecord], seed: u64, exec: Exec) -> Result<VisualCodebook> {
    let fit = VisualCodebook::fit(records.iter().map(|r| r.image.as_slice()), seed, exec)?;
    Ok(fit.codebook)
}

/// Reads a checkpoint, keeping its entries for loading into a model.
pub fn read_entries(path: &Path) -> Result<Vec<CheckpointEntry>> {
    Ok(read_checkpoint(path)?)
}

/// Tokenised corpus for a model's front end.
pub fn corpus_for<T: Scalar>(model: &Model<T>, records: Vec<SceneRecord>, exec: Exec) -> Result<Corpus> {
    let cb = match model.spec.frontend {
        Frontend::Discrete => Some(
            model
                .codebook
                .as_ref()
                .ok_or_else(|| invalid("model has no codebook"))?,
        ),
        Frontend::Continuous => None,
    };
    Corpus::new(records, cb, &model.actions, exec)
}
