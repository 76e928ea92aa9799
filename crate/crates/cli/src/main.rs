//! `drivewm` command-line driver.
//!
//! Every command resolves its configuration as defaults, then the checkpoint's
//! echoed `config.txt` (commands that load one), then `--config`, then each
//! `--set`, then `--seed`. The effective configuration is echoed into the
//! run directory. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use drivewm::backbone::Frontend;
use drivewm::config::Config;
use drivewm::diffusion::{sample_future, write_image_dump};
use drivewm::error::Error;
use drivewm::eval::report_csv;
use drivewm::gridworld::{generate_dataset, generate_records, read_dataset, validate_dataset_bytes, SceneRecord};
use drivewm::rng::{self, streams};
use drivewm::tensor::{Graph, Scalar, TensorError};
use drivewm::training::{
    corpus_for, eval_targets, evaluate, fit_codebook, measure_latency, median_ade, read_entries, run_ablations,
    run_scale_sweep, sweep_cells, train, AblationVariant, Model, Precision, RunConfig, SweepRow, SweepVariant,
    SWEEP_HEADER,
};

const CONFIG_ECHO: &str = "config.txt";
const LOSS_LOG: &str = "loss.csv";
const CHECKPOINT: &str = "checkpoint.dw0c";
const DATASET: &str = "dataset.dw0d";
const REPORT: &str = "report.csv";
const SWEEP_CSV: &str = "sweep.csv";
const ABLATION_CSV: &str = "ablation.csv";
const LATENCY_CSV: &str = "latency.csv";
const GENERATED: &str = "generated.dw0i";
const REFERENCE: &str = "reference.dw0i";

#[derive(Parser, Debug)]
#[command(
    name = "drivewm",
    version,
    about = "World-model-supervised driving policy on a synthetic grid world"
)]
struct Cli {
    /// Configuration file of dotted `key=value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory for outputs.
    #[arg(long, global = true, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of `data.n` frames into <out>/dataset.dw0d.
    GenData,
    /// Check a dataset file against the binary format.
    ValidateData { path: PathBuf },
    /// Train stage `train.stage`; writes config echo, loss log and checkpoint.
    Train,
    /// Score a checkpoint; writes <out>/report.csv.
    Eval {
        checkpoint: Option<PathBuf>,
        dataset: Option<PathBuf>,
    },
    /// Scale sweep over sizes, front ends, objectives and seeds.
    Sweep,
    /// Sequence-design ablations with a query-expert fine-tune per variant.
    Ablate,
    /// Predicted frame for record `generate.record` as an image dump.
    Generate {
        checkpoint: Option<PathBuf>,
        dataset: Option<PathBuf>,
    },
    /// Decoder latency bench.
    Latency { checkpoint: Option<PathBuf> },
}

/// Command-line misuse; exits with code 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(Error::Numeric(_)) | Some(Error::Tensor(TensorError::NonFinite { .. })) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData => gen_data(cli),
        Command::ValidateData { path } => validate_data(path),
        Command::Train => {
            let (c, rc) = resolve(cli, None)?;
            match rc.precision {
                Precision::F32 => train_cmd::<f32>(cli, &c, &rc),
                Precision::F64 => train_cmd::<f64>(cli, &c, &rc),
            }
        }
        Command::Eval { checkpoint, dataset } => {
            let ckpt = checkpoint_arg(cli, checkpoint.as_deref())?;
            let (c, rc) = resolve(cli, Some(&ckpt))?;
            match rc.precision {
                Precision::F32 => eval_cmd::<f32>(cli, &c, &rc, &ckpt, dataset.as_deref()),
                Precision::F64 => eval_cmd::<f64>(cli, &c, &rc, &ckpt, dataset.as_deref()),
            }
        }
        Command::Sweep => sweep_cmd(cli),
        Command::Ablate => ablate_cmd(cli),
        Command::Generate { checkpoint, dataset } => {
            let ckpt = checkpoint_arg(cli, checkpoint.as_deref())?;
            let (c, rc) = resolve(cli, Some(&ckpt))?;
            match rc.precision {
                Precision::F32 => generate_cmd::<f32>(cli, &c, &rc, &ckpt, dataset.as_deref()),
                Precision::F64 => generate_cmd::<f64>(cli, &c, &rc, &ckpt, dataset.as_deref()),
            }
        }
        Command::Latency { checkpoint } => {
            let ckpt = checkpoint_arg(cli, checkpoint.as_deref())?;
            let (c, rc) = resolve(cli, Some(&ckpt))?;
            match rc.precision {
                Precision::F32 => latency_cmd::<f32>(cli, &c, &rc, &ckpt),
                Precision::F64 => latency_cmd::<f64>(cli, &c, &rc, &ckpt),
            }
        }
    }
}

/// Effective configuration. `checkpoint`'s sibling echo, when present,
/// supplies the architecture it was trained with.
fn resolve(cli: &Cli, checkpoint: Option<&Path>) -> anyhow::Result<(Config, RunConfig)> {
    let mut c = Config::default();
    if let Some(echo) = checkpoint.and_then(|p| p.parent()).map(|d| d.join(CONFIG_ECHO)) {
        if echo.is_file() {
            c.apply_file(&echo)
                .with_context(|| format!("reading {}", echo.display()))?;
        }
    }
    if let Some(p) = &cli.config {
        c.apply_file(p).with_context(|| format!("reading {}", p.display()))?;
    }
    for pair in &cli.set {
        c.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        c.set("run.seed", &seed.to_string())?;
    }
    let rc = RunConfig::from_config(&c)?;
    Ok((c, rc))
}

fn checkpoint_arg(cli: &Cli, arg: Option<&Path>) -> anyhow::Result<PathBuf> {
    if let Some(p) = arg {
        return Ok(p.to_path_buf());
    }
    let mut c = Config::default();
    if let Some(p) = &cli.config {
        c.apply_file(p)?;
    }
    for pair in &cli.set {
        c.set_pair(pair)?;
    }
    c.path("eval.checkpoint")?
        .ok_or_else(|| usage("no checkpoint given (positional argument or eval.checkpoint)"))
}

/// Creates the run directory and refuses to replace `outputs` without `--force`.
fn prepare_out(cli: &Cli, outputs: &[&str]) -> anyhow::Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    if !cli.force {
        for name in outputs {
            let p = cli.out.join(name);
            if p.exists() {
                return Err(usage(format!("{} exists; pass --force to overwrite", p.display())));
            }
        }
    }
    Ok(())
}

fn write_echo(cli: &Cli, c: &Config) -> anyhow::Result<()> {
    fs::write(cli.out.join(CONFIG_ECHO), c.echo())?;
    Ok(())
}

fn flatten(clips: Vec<drivewm::gridworld::Clip>) -> Vec<SceneRecord> {
    clips.into_iter().flat_map(|c| c.records).collect()
}

/// Training frames: `data.path` when set, else `data.n` generated at `run.seed`.
fn training_records(rc: &RunConfig) -> anyhow::Result<Vec<SceneRecord>> {
    match &rc.data_path {
        Some(p) => read_dataset(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(flatten(generate_records(rc.data_n, rc.seed, &rc.mix, rc.exec)?)),
    }
}

/// Held-out frames: an explicit file, else `data.eval_path`, else
/// `sweep.eval_frames` generated at `sweep.eval_seed`.
fn eval_records(c: &Config, rc: &RunConfig, explicit: Option<&Path>) -> anyhow::Result<Vec<SceneRecord>> {
    match explicit.map(Path::to_path_buf).or_else(|| rc.eval_path.clone()) {
        Some(p) => read_dataset(&p).with_context(|| format!("reading {}", p.display())),
        None => {
            let n: usize = c.get("sweep.eval_frames")?;
            let seed: u64 = c.get("sweep.eval_seed")?;
            Ok(flatten(generate_records(n, seed, &rc.mix, rc.exec)?))
        }
    }
}

fn gen_data(cli: &Cli) -> anyhow::Result<()> {
    let (c, rc) = resolve(cli, None)?;
    prepare_out(cli, &[DATASET])?;
    let path = cli.out.join(DATASET);
    let clips = generate_dataset(rc.data_n, rc.seed, &rc.mix, &path, rc.exec)?;
    write_echo(cli, &c)?;
    let frames: usize = clips.iter().map(|c| c.records.len()).sum();
    println!("wrote {} ({} clips, {} frames)", path.display(), clips.len(), frames);
    Ok(())
}

fn validate_data(path: &Path) -> anyhow::Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let s = validate_dataset_bytes(&bytes)?;
    println!(
        "ok: {} records, {} clips, commands follow={} left={} right={} stop={}",
        s.records, s.clips, s.commands[0], s.commands[1], s.commands[2], s.commands[3]
    );
    Ok(())
}

fn train_cmd<T: Scalar>(cli: &Cli, c: &Config, rc: &RunConfig) -> anyhow::Result<()> {
    prepare_out(cli, &[CHECKPOINT, LOSS_LOG])?;
    write_echo(cli, c)?;
    let records = training_records(rc)?;
    let (mut model, objective) = if rc.stage == 1 {
        let codebook = match rc.sequence.frontend {
            Frontend::Discrete => Some(fit_codebook(&records, rc.codebook_seed, rc.exec)?),
            Frontend::Continuous => None,
        };
        let m = Model::<T>::new(rc.stage1_spec(), rc.seed, rc.schedule.clone(), codebook, rc.actions()?)?;
        (m, rc.stage1_objective())
    } else {
        let path = rc.stage1_checkpoint.as_ref().expect("validated by RunConfig");
        let entries = read_entries(path).with_context(|| format!("reading {}", path.display()))?;
        let codebook = drivewm::tokenizers::VisualCodebook::from_entries(&entries);
        let mut m = Model::<T>::new(rc.stage2_spec(), rc.seed, rc.schedule.clone(), codebook, rc.actions()?)?;
        let backbone = m
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("backbone."))
            .count();
        let loaded = m.load_entries(&entries)?;
        if loaded < backbone {
            return Err(anyhow!(Error::Invalid(format!(
                "{} restores {loaded} tensors but the backbone has {backbone}",
                path.display()
            ))));
        }
        (m, rc.stage2_objective()?)
    };
    let corpus = corpus_for(&model, records, rc.exec)?;
    let report = train(&mut model, &corpus, &objective, &rc.train)?;
    fs::write(cli.out.join(LOSS_LOG), report.csv())?;
    model.save(&cli.out.join(CHECKPOINT))?;
    if report.skipped_steps > 0 {
        eprintln!(
            "warning: {} steps skipped on non-finite gradients",
            report.skipped_steps
        );
    }
    if report.diffusion_skipped > 0 {
        eprintln!(
            "note: {} samples had no next frame for the diffusion term",
            report.diffusion_skipped
        );
    }
    if let Some(msg) = report.diverged {
        return Err(anyhow!(Error::Numeric(format!("{msg}; last good parameters saved"))));
    }
    if let Some(last) = report.log.last() {
        println!("stage {} done: {}", rc.stage, last.csv());
    }
    Ok(())
}

fn restore<T: Scalar>(rc: &RunConfig, ckpt: &Path) -> anyhow::Result<Model<T>> {
    let entries = read_entries(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let spec = rc.spec_for_entries(&entries);
    Ok(Model::restore(spec, &entries, rc.schedule.clone(), rc.actions()?)?)
}

fn eval_cmd<T: Scalar>(
    cli: &Cli,
    c: &Config,
    rc: &RunConfig,
    ckpt: &Path,
    dataset: Option<&Path>,
) -> anyhow::Result<()> {
    prepare_out(cli, &[REPORT])?;
    let model = restore::<T>(rc, ckpt)?;
    let records = eval_records(c, rc, dataset)?;
    let corpus = corpus_for(&model, records, rc.exec)?;
    let seq = rc.eval_sequence(&model.spec)?;
    let out = evaluate(
        &model,
        &corpus,
        &seq,
        rc.eval_max,
        rc.eval_temperature,
        rc.seed,
        rc.exec,
    )?;
    fs::write(cli.out.join(REPORT), report_csv(&out.results)?)?;
    write_echo(cli, c)?;
    let a = &out.aggregate;
    println!(
        "AGG scenarios={} ade_m={:.4} collision_rate={:.4} pdms={:.4}",
        a.count, a.ade, a.collision_rate, a.pdms
    );
    Ok(())
}

fn generate_cmd<T: Scalar>(
    cli: &Cli,
    c: &Config,
    rc: &RunConfig,
    ckpt: &Path,
    dataset: Option<&Path>,
) -> anyhow::Result<()> {
    prepare_out(cli, &[GENERATED, REFERENCE])?;
    let model = restore::<T>(rc, ckpt)?;
    let records = match dataset {
        Some(p) => read_dataset(p).with_context(|| format!("reading {}", p.display()))?,
        None => eval_records(c, rc, None)?,
    };
    let corpus = corpus_for(&model, records, rc.exec)?;
    let t: usize = c.get("generate.record")?;
    let temperature: f64 = c.get("generate.temperature")?;
    let seq_cfg = rc.sequence;
    let seq = corpus
        .sequence(t, &seq_cfg, false)
        .map_err(|e| anyhow!(Error::Invalid(format!("record {t} has no full context: {e}"))))?;
    let mut r = rng::rng(rc.seed, streams::SAMPLING, t as u64);
    let (image, reference) = match model.spec.frontend {
        Frontend::Discrete => {
            let ids = model
                .backbone
                .generate_visual_tokens(&model.store, &seq, temperature, &mut r)?;
            let cb = model.codebook.as_ref().expect("discrete models carry a codebook");
            (cb.decode(&ids)?, corpus.records[t].image.clone())
        }
        Frontend::Continuous => {
            let den = model
                .denoiser
                .as_ref()
                .ok_or_else(|| anyhow!(Error::Invalid("checkpoint has no diffusion world model".into())))?;
            // The denoiser is conditioned on the action executed at frame t.
            let seq = corpus.sequence(t, &seq_cfg, true)?;
            let mut g = Graph::new(&model.store);
            let out = model.backbone.forward(&mut g, &seq)?;
            let fv = model.backbone.pool_visual(&mut g, &out, &seq)?;
            let fa = model.backbone.pool_action(&mut g, &out, &seq)?;
            let fv: Vec<f64> = g.value(fv).iter().map(|v| v.as_f64()).collect();
            let fa: Vec<f64> = g.value(fa).iter().map(|v| v.as_f64()).collect();
            let image = sample_future(&model.store, den, &model.schedule, &fv, &fa, &mut r)?;
            let next = corpus
                .records
                .get(t + 1)
                .filter(|n| n.clip_id == corpus.records[t].clip_id)
                .ok_or_else(|| anyhow!(Error::Invalid(format!("record {t} has no next frame"))))?;
            (image, next.image.clone())
        }
    };
    write_image_dump(&cli.out.join(GENERATED), &image)?;
    write_image_dump(&cli.out.join(REFERENCE), &reference)?;
    write_echo(cli, c)?;
    let mse = image
        .iter()
        .zip(&reference)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / image.len() as f64;
    println!(
        "wrote {} (pixel mse vs reference {:.2})",
        cli.out.join(GENERATED).display(),
        mse
    );
    Ok(())
}

fn latency_cmd<T: Scalar>(cli: &Cli, c: &Config, rc: &RunConfig, ckpt: &Path) -> anyhow::Result<()> {
    prepare_out(cli, &[LATENCY_CSV])?;
    let model = restore::<T>(rc, ckpt)?;
    let records = eval_records(c, rc, None)?;
    let corpus = corpus_for(&model, records, rc.exec)?;
    let seq = rc.stage2_sequence()?;
    let t = *eval_targets(&corpus, &seq, 1)
        .first()
        .ok_or_else(|| anyhow!(Error::Invalid("no record with a full context".into())))?;
    let report = measure_latency(
        &model,
        &corpus,
        t,
        &seq,
        rc.expert,
        c.get("latency.warmup")?,
        c.get("latency.repeats")?,
        &c.list::<usize>("latency.tokens")?,
        rc.seed,
    )?;
    fs::write(cli.out.join(LATENCY_CSV), report.csv())?;
    write_echo(cli, c)?;
    print!("{}", report.csv());
    let (slope, intercept, r2) = report.ar_fit;
    println!("expert-ar fit: {slope:.4} ms/token + {intercept:.4} ms, r2={r2:.5}");
    Ok(())
}

fn parse_frontends(c: &Config) -> anyhow::Result<Vec<Frontend>> {
    c.list::<String>("sweep.frontends")?
        .iter()
        .map(|s| Frontend::from_name(s).ok_or_else(|| anyhow!(Error::Config(format!("unknown front end '{s}'")))))
        .collect()
}

fn parse_variants(c: &Config) -> anyhow::Result<Vec<SweepVariant>> {
    c.list::<String>("sweep.variants")?
        .iter()
        .map(|s| {
            SweepVariant::from_name(s).ok_or_else(|| anyhow!(Error::Config(format!("unknown sweep variant '{s}'"))))
        })
        .collect()
}

/// Appends rows to a CSV as they complete.
struct RowSink {
    file: fs::File,
}

impl RowSink {
    fn create(path: &Path) -> anyhow::Result<Self> {
        let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        writeln!(file, "{SWEEP_HEADER}")?;
        Ok(Self { file })
    }

    fn push(&mut self, row: &SweepRow) {
        if let Err(e) = writeln!(self.file, "{}", row.csv()).and_then(|_| self.file.flush()) {
            eprintln!("warning: could not append row: {e}");
        }
        match &row.error {
            Some(e) => eprintln!(
                "{} {} {} seed {}: FAILED: {e}",
                row.size, row.frontend, row.variant, row.seed
            ),
            None => eprintln!(
                "{} {} {} seed {}: ade {:.4} m, {:.1} s",
                row.size, row.frontend, row.variant, row.seed, row.ade, row.wallclock_s
            ),
        }
    }
}

fn sweep_cmd(cli: &Cli) -> anyhow::Result<()> {
    let (c, rc) = resolve(cli, None)?;
    prepare_out(cli, &[SWEEP_CSV])?;
    write_echo(cli, &c)?;
    let sizes: Vec<usize> = c.list("sweep.sizes")?;
    let seeds: Vec<u64> = c.list("sweep.seeds")?;
    let frontends = parse_frontends(&c)?;
    let variants = parse_variants(&c)?;
    let cells = sweep_cells(&sizes, &frontends, &variants, &seeds);
    let eval = eval_records(&c, &rc, None)?;
    let mut sink = RowSink::create(&cli.out.join(SWEEP_CSV))?;
    let mut data = |n: usize| -> drivewm::error::Result<Vec<SceneRecord>> {
        Ok(flatten(generate_records(n, rc.seed, &rc.mix, rc.exec)?))
    };
    let rows = run_scale_sweep(&rc, &cells, &mut data, &eval, &mut |r| sink.push(r))?;
    for &size in &sizes {
        for fe in &frontends {
            let med = |v: SweepVariant| median_ade(&rows, size, fe.name(), v.name());
            if let (Some(a), Some(w)) = (med(SweepVariant::ActionOnly), med(SweepVariant::WorldModel)) {
                println!(
                    "{size} {}: median ade action-only {a:.4} m, world-model {w:.4} m, ratio {:.3}",
                    fe.name(),
                    w / a
                );
            }
        }
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} cells failed; see {}",
            rows.len(),
            cli.out.join(SWEEP_CSV).display()
        );
    }
    Ok(())
}

fn ablate_cmd(cli: &Cli) -> anyhow::Result<()> {
    let (c, rc) = resolve(cli, None)?;
    prepare_out(cli, &[ABLATION_CSV])?;
    write_echo(cli, &c)?;
    let variants = c
        .list::<String>("ablate.variants")?
        .iter()
        .map(|s| {
            AblationVariant::by_name(s).ok_or_else(|| anyhow!(Error::Config(format!("unknown ablation variant '{s}'"))))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let seeds: Vec<u64> = c.list("ablate.seeds")?;
    let records = training_records(&rc)?;
    let eval = eval_records(&c, &rc, None)?;
    let mut sink = RowSink::create(&cli.out.join(ABLATION_CSV))?;
    let rows = run_ablations(
        &rc,
        &variants,
        &seeds,
        c.get("ablate.stage1_steps")?,
        c.get("ablate.stage2_steps")?,
        &records,
        &eval,
        &mut |r| sink.push(r),
    )?;
    for v in &variants {
        if let Some(m) = median_ade(&rows, records.len(), "discrete", v.name) {
            println!("{}: median ade {m:.4} m", v.name);
        }
    }
    Ok(())
}
