use super::Model;
use crate::backbone::{Corpus, SequenceConfig};
use crate::error::{invalid, Result};
use crate::eval::{aggregate, scenario_id, Aggregate, ScenarioResult};
use crate::experts::DecoderKind;
use crate::gridworld::Trajectory;
use crate::par::Exec;
use crate::rng::{self, streams};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub results: Vec<ScenarioResult>,
    pub aggregate: Aggregate,
}

/// At most `max` usable target records, evenly spaced over the corpus.
pub fn eval_targets(corpus: &Corpus, sequence: &SequenceConfig, max: usize) -> Vec<usize> {
    let all = corpus.targets(sequence, false);
    if all.len() <= max {
        return all;
    }
    (0..max).map(|i| all[i * all.len() / max]).collect()
}

/// Planned trajectory for target record `t`: the expert's decoder when the
/// model has one, otherwise backbone action-token generation.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    t: usize,
    sequence: &SequenceConfig,
    temperature: f64,
    seed: u64,
) -> Result<Trajectory> {
    let mut r = rng::rng(seed, streams::SAMPLING, t as u64);
    let seq = corpus.sequence(t, sequence, false)?;
    let prev = &corpus.tokens[t - 1].action;
    match &model.expert {
        None => {
            if sequence.vision_only {
                return Err(invalid("a vision-only backbone cannot generate actions"));
            }
            let ids =
                model
                    .backbone
                    .generate_action_tokens(&model.store, &seq.generation_prefix(), temperature, &mut r)?;
            Ok(model.actions.detokenize(&ids)?)
        }
        Some(e) => match e.cfg.decoder {
            DecoderKind::Query => e.query_decode(&model.store, &model.backbone, &seq, prev),
            DecoderKind::Autoregressive => {
                let ids = e.ar_decode(
                    &model.store,
                    &model.backbone,
                    &seq,
                    prev,
                    crate::tokenizers::COEFFS,
                    temperature,
                    &mut r,
                )?;
                Ok(model.actions.detokenize(&ids)?)
            }
            DecoderKind::Flow => e.flow_decode(&model.store, &model.backbone, &seq, prev, &mut r),
        },
    }
}

/// Scores predictions on up to `max` records.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    sequence: &SequenceConfig,
    max: usize,
    temperature: f64,
    seed: u64,
    exec: Exec,
) -> Result<EvalOutcome> {
    let targets = eval_targets(corpus, sequence, max);
    if targets.is_empty() {
        return Err(invalid("no evaluable records"));
    }
    let results = exec.map(&targets, |&t| {
        let pred = predict(model, corpus, t, sequence, temperature, seed)?;
        let rec = &corpus.records[t];
        Ok(ScenarioResult::new(scenario_id(rec), &pred, rec)?)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&results)?;
    Ok(EvalOutcome { results, aggregate })
}
