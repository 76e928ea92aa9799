//! Sequential against rayon execution on the three data-parallel hot paths:
//! scene generation, codebook fitting and a batched training step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drivewm::backbone::{Frontend, ModelConfig, SequenceConfig};
use drivewm::diffusion::{NoiseSchedule, BETA_END, BETA_START};
use drivewm::gridworld::{generate_records, ScenarioMix};
use drivewm::par::Exec;
use drivewm::tokenizers::ActionTokenizer;
use drivewm::training::{corpus_for, fit_codebook, train, Model, ModelSpec, Objective, TrainOptions};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn records(n: usize) -> Vec<drivewm::gridworld::SceneRecord> {
    generate_records(n, 0, &ScenarioMix::default(), Exec::Parallel)
        .unwrap()
        .into_iter()
        .flat_map(|c| c.records)
        .collect()
}

fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("exec");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("generate_200", name), &exec, |b, &e| {
            b.iter(|| generate_records(200, 0, &ScenarioMix::default(), e).unwrap())
        });
    }

    let recs = records(400);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("codebook_400", name), &exec, |b, &e| {
            b.iter(|| fit_codebook(&recs, 0, e).unwrap())
        });
    }

    let cb = fit_codebook(&recs, 0, Exec::Parallel).unwrap();
    let spec = ModelSpec {
        model: ModelConfig {
            d_model: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 4,
            max_len: 512,
        },
        frontend: Frontend::Discrete,
        diffusion: false,
        expert: None,
    };
    let schedule = NoiseSchedule::linear(100, BETA_START, BETA_END);
    let actions = ActionTokenizer::new(3.5).unwrap();
    let base: Model<f32> = Model::new(spec, 0, schedule, Some(cb), actions).unwrap();
    let corpus = corpus_for(&base, recs, Exec::Parallel).unwrap();
    let obj = Objective::Stage1 {
        sequence: SequenceConfig::new(2, 1.0, Frontend::Discrete).unwrap(),
        wm_weight: 1.0,
    };
    for (name, exec) in MODES {
        let opts = TrainOptions {
            steps: 1,
            batch: 8,
            warmup: 0,
            exec,
            ..TrainOptions::default()
        };
        g.bench_with_input(BenchmarkId::new("train_step_b8", name), &opts, |b, o| {
            b.iter_batched(
                || base.clone(),
                |mut m| train(&mut m, &corpus, &obj, o).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
