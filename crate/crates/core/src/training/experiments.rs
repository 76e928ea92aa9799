use std::time::Instant;

use super::{corpus_for, evaluate, fit_codebook, train, Model, Objective, RunConfig, TrainOptions};
use crate::backbone::{Frontend, SequenceConfig};
use crate::error::{invalid, Result};
use crate::experts::DecoderKind;
use crate::gridworld::SceneRecord;
use crate::tokenizers::VisualCodebook;

pub const SWEEP_HEADER: &str = "size,frontend,variant,decoder,seed,ade_m,collision_rate,pdms_analog,wallclock_s";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepVariant {
    ActionOnly,
    WorldModel,
}

impl SweepVariant {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariant::ActionOnly => "action-only",
            SweepVariant::WorldModel => "world-model",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "action-only" => Some(SweepVariant::ActionOnly),
            "world-model" => Some(SweepVariant::WorldModel),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub size: usize,
    pub frontend: Frontend,
    pub variant: SweepVariant,
    pub seed: u64,
}

/// One result line; failed cells keep their error and NaN metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub frontend: String,
    pub variant: String,
    pub decoder: String,
    pub seed: u64,
    pub ade: f64,
    pub collision_rate: f64,
    pub pdms: f64,
    pub wallclock_s: f64,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.size,
            self.frontend,
            self.variant,
            self.decoder,
            self.seed,
            self.ade,
            self.collision_rate,
            self.pdms,
            self.wallclock_s
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(invalid(format!("sweep row with {} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| invalid(format!("'{s}': {e}")));
        Ok(Self {
            size: f[0].parse().map_err(|e| invalid(format!("size '{}': {e}", f[0])))?,
            frontend: f[1].into(),
            variant: f[2].into(),
            decoder: f[3].into(),
            seed: f[4].parse().map_err(|e| invalid(format!("seed '{}': {e}", f[4])))?,
            ade: num(f[5])?,
            collision_rate: num(f[6])?,
            pdms: num(f[7])?,
            wallclock_s: num(f[8])?,
            error: None,
        })
    }
}

/// Median ADE over the finite rows matching a cell group.
pub fn median_ade(rows: &[SweepRow], size: usize, frontend: &str, variant: &str) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.size == size && r.frontend == frontend && r.variant == variant && r.ade.is_finite())
        .map(|r| r.ade)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Cells in output order: size, front end, variant, seed.
pub fn sweep_cells(
    sizes: &[usize],
    frontends: &[Frontend],
    variants: &[SweepVariant],
    seeds: &[u64],
) -> Vec<SweepCell> {
    let mut out = Vec::new();
    for &size in sizes {
        for &frontend in frontends {
            for &variant in variants {
                for &seed in seeds {
                    out.push(SweepCell {
                        size,
                        frontend,
                        variant,
                        seed,
                    });
                }
            }
        }
    }
    out
}

fn failed(cell_size: usize, frontend: &str, variant: &str, decoder: &str, seed: u64, secs: f64, e: String) -> SweepRow {
    SweepRow {
        size: cell_size,
        frontend: frontend.into(),
        variant: variant.into(),
        decoder: decoder.into(),
        seed,
        ade: f64::NAN,
        collision_rate: f64::NAN,
        pdms: f64::NAN,
        wallclock_s: secs,
        error: Some(e),
    }
}

fn run_cell(
    rc: &RunConfig,
    cell: &SweepCell,
    train_records: &[SceneRecord],
    codebook: Option<&VisualCodebook>,
    eval_records: &[SceneRecord],
) -> Result<(f64, f64, f64)> {
    let mut sequence = rc.sequence;
    sequence.frontend = cell.frontend;
    sequence.vision_only = false;
    let wm_weight = match (cell.variant, cell.frontend) {
        (SweepVariant::ActionOnly, _) => 0.0,
        (SweepVariant::WorldModel, Frontend::Discrete) => rc.alpha,
        (SweepVariant::WorldModel, Frontend::Continuous) => rc.beta,
    };
    let mut spec = rc.stage1_spec();
    spec.frontend = cell.frontend;
    spec.diffusion = cell.frontend == Frontend::Continuous && wm_weight > 0.0;
    let mut model: Model<f32> = Model::new(spec, cell.seed, rc.schedule.clone(), codebook.cloned(), rc.actions()?)?;
    let corpus = corpus_for(&model, train_records.to_vec(), rc.exec)?;
    let opts = TrainOptions {
        seed: cell.seed,
        ..rc.train
    };
    let report = train(&mut model, &corpus, &Objective::Stage1 { sequence, wm_weight }, &opts)?;
    if let Some(d) = report.diverged {
        return Err(crate::error::Error::Numeric(d));
    }
    let eval_corpus = corpus_for(&model, eval_records.to_vec(), rc.exec)?;
    let out = evaluate(
        &model,
        &eval_corpus,
        &sequence,
        rc.eval_max,
        rc.eval_temperature,
        cell.seed,
        rc.exec,
    )?;
    Ok((out.aggregate.ade, out.aggregate.collision_rate, out.aggregate.pdms))
}

/// Stage-1 training and evaluation of every cell. `data(size)` supplies the
/// training records of a size; `on_row` sees each row as it completes.
pub fn run_scale_sweep(
    rc: &RunConfig,
    cells: &[SweepCell],
    data: &mut dyn FnMut(usize) -> Result<Vec<SceneRecord>>,
    eval_records: &[SceneRecord],
    on_row: &mut dyn FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    let mut loaded: Option<(usize, Vec<SceneRecord>, Option<VisualCodebook>)> = None;
    for cell in cells {
        let start = Instant::now();
        if loaded.as_ref().map(|l| l.0) != Some(cell.size) {
            loaded = Some((cell.size, data(cell.size)?, None));
        }
        let (_, records, cb) = loaded.as_mut().expect("loaded above");
        if cell.frontend == Frontend::Discrete && cb.is_none() {
            *cb = Some(fit_codebook(records, rc.codebook_seed, rc.exec)?);
        }
        let codebook = match cell.frontend {
            Frontend::Discrete => cb.as_ref(),
            Frontend::Continuous => None,
        };
        let res = run_cell(rc, cell, records, codebook, eval_records);
        let secs = start.elapsed().as_secs_f64();
        let (fe, var) = (cell.frontend.name(), cell.variant.name());
        let row = match res {
            Ok((ade, coll, pdms)) => SweepRow {
                size: cell.size,
                frontend: fe.into(),
                variant: var.into(),
                decoder: "backbone".into(),
                seed: cell.seed,
                ade,
                collision_rate: coll,
                pdms,
                wallclock_s: secs,
                error: None,
            },
            Err(e) => failed(cell.size, fe, var, "backbone", cell.seed, secs, e.to_string()),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Stage-1 sequence designs compared by the ablations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub history: usize,
    pub interval_s: f64,
    pub vision_only: bool,
}

pub fn ablation_variants() -> Vec<AblationVariant> {
    let v = |name, history, interval_s, vision_only| AblationVariant {
        name,
        history,
        interval_s,
        vision_only,
    };
    vec![
        v("6VA", 6, 1.0, false),
        v("6V", 6, 1.0, true),
        v("VA", 1, 0.0, false),
        v("2VA", 2, 1.0, false),
        v("interval-0", 1, 0.0, false),
        v("interval-1", 2, 1.0, false),
        v("interval-4", 2, 4.0, false),
    ]
}

impl AblationVariant {
    pub fn by_name(name: &str) -> Option<Self> {
        ablation_variants().into_iter().find(|v| v.name == name)
    }

    pub fn sequence(&self, frontend: Frontend) -> Result<SequenceConfig> {
        let mut s = SequenceConfig::new(self.history, self.interval_s, frontend)?;
        s.vision_only = self.vision_only;
        Ok(s)
    }
}

/// Each variant: discrete stage-1 pretraining with its sequence design,
/// then the same query-expert fine-tune on the stage-2 context, then
/// evaluation of the expert.
#[allow(clippy::too_many_arguments)]
pub fn run_ablations(
    rc: &RunConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    stage1_steps: usize,
    stage2_steps: usize,
    train_records: &[SceneRecord],
    eval_records: &[SceneRecord],
    on_row: &mut dyn FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let codebook = fit_codebook(train_records, rc.codebook_seed, rc.exec)?;
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let start = Instant::now();
            let res = (|| -> Result<(f64, f64, f64)> {
                let sequence = v.sequence(Frontend::Discrete)?;
                let mut spec = rc.stage1_spec();
                spec.frontend = Frontend::Discrete;
                spec.diffusion = false;
                let mut s1: Model<f32> =
                    Model::new(spec, seed, rc.schedule.clone(), Some(codebook.clone()), rc.actions()?)?;
                let corpus = corpus_for(&s1, train_records.to_vec(), rc.exec)?;
                let opts1 = TrainOptions {
                    seed,
                    steps: stage1_steps,
                    warmup: rc.train.warmup.min(stage1_steps / 10),
                    ..rc.train
                };
                let r1 = train(
                    &mut s1,
                    &corpus,
                    &Objective::Stage1 {
                        sequence,
                        wm_weight: rc.alpha,
                    },
                    &opts1,
                )?;
                if let Some(d) = r1.diverged {
                    return Err(crate::error::Error::Numeric(d));
                }
                let mut spec2 = rc.stage2_spec();
                spec2.frontend = Frontend::Discrete;
                spec2.expert = Some(crate::experts::ExpertConfig {
                    decoder: DecoderKind::Query,
                    backbone_to_expert: false,
                    ..rc.expert
                });
                let mut s2: Model<f32> =
                    Model::new(spec2, seed, rc.schedule.clone(), Some(codebook.clone()), rc.actions()?)?;
                s2.load_entries(&s1.entries())?;
                let mut seq2 = rc.stage2_sequence()?;
                seq2.frontend = Frontend::Discrete;
                let opts2 = TrainOptions {
                    seed,
                    steps: stage2_steps,
                    warmup: rc.train.warmup.min(stage2_steps / 10),
                    ..rc.train
                };
                let r2 = train(&mut s2, &corpus, &Objective::Stage2 { sequence: seq2 }, &opts2)?;
                if let Some(d) = r2.diverged {
                    return Err(crate::error::Error::Numeric(d));
                }
                let eval_corpus = corpus_for(&s2, eval_records.to_vec(), rc.exec)?;
                let out = evaluate(
                    &s2,
                    &eval_corpus,
                    &seq2,
                    rc.eval_max,
                    rc.eval_temperature,
                    seed,
                    rc.exec,
                )?;
                Ok((out.aggregate.ade, out.aggregate.collision_rate, out.aggregate.pdms))
            })();
            let secs = start.elapsed().as_secs_f64();
            let row = match res {
                Ok((ade, coll, pdms)) => SweepRow {
                    size: train_records.len(),
                    frontend: "discrete".into(),
                    variant: v.name.into(),
                    decoder: "query".into(),
                    seed,
                    ade,
                    collision_rate: coll,
                    pdms,
                    wallclock_s: secs,
                    error: None,
                },
                Err(e) => failed(
                    train_records.len(),
                    "discrete",
                    v.name,
                    "query",
                    seed,
                    secs,
                    e.to_string(),
                ),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
