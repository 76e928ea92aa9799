use std::time::Instant;

use super::{Model, ModelSpec};
use crate::backbone::{Corpus, SequenceConfig};
use crate::error::{invalid, Result};
use crate::experts::{DecoderKind, ExpertConfig};
use crate::rng::{self, streams};
use crate::tensor::Scalar;
use crate::tokenizers::COEFFS;

pub const LATENCY_HEADER: &str = "mode,tokens,median_ms,ratio_to_backbone_ar";

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub mode: String,
    /// Generated tokens for the AR modes, query rows for the query expert,
    /// integration steps for the flow expert.
    pub tokens: usize,
    pub median_ms: f64,
    pub ratio: f64,
}

impl LatencyRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.4},{:.4}", self.mode, self.tokens, self.median_ms, self.ratio)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    /// Slope (ms per token), intercept (ms) and R² of expert-AR time against L.
    pub ar_fit: (f64, f64, f64),
}

impl LatencyReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(LATENCY_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn ratio_of(&self, mode: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.ratio)
    }
}

/// Median wall-clock milliseconds of `repeats` calls after `warmup` untimed ones.
pub fn time_median(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if repeats == 0 {
        return Err(invalid("latency needs at least one repeat"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&mut ms))
}

fn median(ms: &mut [f64]) -> f64 {
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    if n % 2 == 1 {
        ms[n / 2]
    } else {
        0.5 * (ms[n / 2 - 1] + ms[n / 2])
    }
}

/// Least-squares line `y = a x + b` and its coefficient of determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("linear fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("linear fit needs distinct x values"));
    }
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a * x - b).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((a, b, r2))
}

/// Times backbone AR action generation against each expert decoder on the
/// context of target record `t`. Every expert shares `base`'s backbone
/// weights; expert weights are freshly initialised, which leaves the
/// amount of computation unchanged.
#[allow(clippy::too_many_arguments)]
pub fn measure_latency<T: Scalar>(
    base: &Model<T>,
    corpus: &Corpus,
    t: usize,
    sequence: &SequenceConfig,
    expert: ExpertConfig,
    warmup: usize,
    repeats: usize,
    ar_tokens: &[usize],
    seed: u64,
) -> Result<LatencyReport> {
    if ar_tokens.len() < 2 || repeats == 0 {
        return Err(invalid("latency needs at least two expert-AR token counts"));
    }
    let seq = corpus.sequence(t, sequence, false)?;
    let prev = &corpus.tokens[t - 1].action;
    let backbone_entries: Vec<_> = base
        .store
        .to_entries()
        .into_iter()
        .filter(|e| e.name.starts_with("backbone."))
        .collect();
    let build = |decoder: DecoderKind| -> Result<Model<T>> {
        let spec = ModelSpec {
            model: base.spec.model,
            frontend: base.spec.frontend,
            diffusion: false,
            expert: Some(ExpertConfig {
                decoder,
                backbone_to_expert: false,
                ..expert
            }),
        };
        let mut m = Model::new(spec, seed, base.schedule.clone(), base.codebook.clone(), base.actions)?;
        m.load_entries(&backbone_entries)?;
        Ok(m)
    };
    let mut r = rng::rng(seed, streams::SAMPLING, t as u64);

    let prefix = seq.generation_prefix();
    let backbone_ms = time_median(warmup, repeats, || {
        base.backbone
            .generate_action_tokens(&base.store, &prefix, 0.0, &mut r)?;
        Ok(())
    })?;
    let mut rows = vec![LatencyRow {
        mode: "backbone-ar".into(),
        tokens: COEFFS,
        median_ms: backbone_ms,
        ratio: 1.0,
    }];
    let mut push = |mode: &str, tokens: usize, ms: f64| {
        rows.push(LatencyRow {
            mode: mode.into(),
            tokens,
            median_ms: ms,
            ratio: ms / backbone_ms,
        })
    };

    let ar = build(DecoderKind::Autoregressive)?;
    let e = ar.expert.as_ref().expect("built with an expert");
    // Token counts are interleaved within each repeat, in alternating
    // order, so drift in machine speed lands on every L alike instead of
    // bending the line.
    let mut samples = vec![Vec::with_capacity(repeats); ar_tokens.len()];
    for rep in 0..warmup + repeats {
        let mut order: Vec<usize> = (0..ar_tokens.len()).collect();
        if rep % 2 == 1 {
            order.reverse();
        }
        for i in order {
            let l = ar_tokens[i];
            let t0 = Instant::now();
            e.ar_decode(&ar.store, &ar.backbone, &seq, prev, l, 0.0, &mut r)?;
            if rep >= warmup {
                samples[i].push(t0.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    let ar_ms: Vec<f64> = samples.iter_mut().map(|s| median(s)).collect();
    for (&l, &ms) in ar_tokens.iter().zip(&ar_ms) {
        push("expert-ar", l, ms);
    }
    let xs: Vec<f64> = ar_tokens.iter().map(|&l| l as f64).collect();
    let ar_fit = linear_fit(&xs, &ar_ms)?;

    let q = build(DecoderKind::Query)?;
    let e = q.expert.as_ref().expect("built with an expert");
    let ms = time_median(warmup, repeats, || {
        e.query_decode(&q.store, &q.backbone, &seq, prev)?;
        Ok(())
    })?;
    push("expert-query", expert.queries, ms);

    let f = build(DecoderKind::Flow)?;
    let e = f.expert.as_ref().expect("built with an expert");
    let ms = time_median(warmup, repeats, || {
        e.flow_decode(&f.store, &f.backbone, &seq, prev, &mut r)?;
        Ok(())
    })?;
    push("expert-flow", expert.flow_steps, ms);

    Ok(LatencyReport { rows, ar_fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_line() {
        let (a, b, r2) = linear_fit(&[4.0, 8.0, 12.0, 16.0], &[9.0, 17.0, 25.0, 33.0]).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 1.0, 3.0]).unwrap();
        assert!(r2 < 0.5);
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_excludes_warmup() {
        let mut calls = 0;
        time_median(5, 3, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 8);
        assert!(time_median(0, 0, || Ok(())).is_err());
    }
}
