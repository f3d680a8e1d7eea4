use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use serde::{de::DeserializeOwned, Serialize};
use streamforge::bundle::{load_conditions, load_dataset, save_conditions, save_dataset};
use streamforge::conditions::{filter_conditions, generate_conditions, generate_conditions_with_kinds, Degradation};
use streamforge::config::RunConfig;
use streamforge::diffusion::{GaussianWorld, MultimodalCondition};
use streamforge::distill::{
    ablation_rows, build_ode_dataset, degraded_arm, dmd_train_steps, exposure_bias_probe, ode_train_steps,
    run_ablation, standard_arms, DmdTrainState, OdeTrainState, TrainLog,
};
use streamforge::eval::{frechet_to_world, max_sync_offset, mean_sync_confidence, write_report, ReportRow};
use streamforge::ltv1::Tensor;
use streamforge::rng::seeded;
use streamforge::streaming::{
    identity_drift_probe, run_stream, standard_policies, write_events_jsonl, write_stream_reports, CachePolicy,
    ClockKind, Decoder, PipelineMode, StreamOutput,
};
use streamforge::student::{load_snapshot, save_snapshot, StudentParams};

/// Exit status of a training run stopped early on purpose.
const INCOMPLETE: u8 = 2;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps, leaving a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DmdArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Snapshot stem of the ODE-initialized generator.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckpointArg {
    /// Generator snapshot stem; defaults to the best DMD checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Sequential,
    Pipelined,
}

#[derive(Args, Debug)]
pub struct StreamArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Measure real time with sleeping stage workers instead of the simulated clock.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Also run the converged-ODE arm on uncurated conditions.
    #[arg(long)]
    with_degraded: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
}

fn command_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.out.join(command);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = toml::to_string(&Manifest { command, config: cfg })?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    serde_json::to_writer(create(&tmp)?, value)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("no checkpoint at {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn world(cfg: &RunConfig) -> Result<GaussianWorld> {
    Ok(GaussianWorld::new(cfg.world.clone())?)
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("gen-data")
}

fn load_bundle(cfg: &RunConfig, name: &str) -> Result<Vec<MultimodalCondition>> {
    let (conds, _) = load_conditions(&data_dir(cfg), name)
        .with_context(|| format!("loading the {name} conditions; run gen-data first"))?;
    Ok(conds)
}

fn load_generator(cfg: &RunConfig, stem: Option<&PathBuf>) -> Result<(StudentParams, String)> {
    let stem = stem.cloned().unwrap_or_else(|| cfg.out.join("train-dmd").join("best"));
    let (p, m) = load_snapshot(&stem)
        .with_context(|| format!("loading checkpoint {}; train one first or pass --checkpoint", stem.display()))?;
    ensure!(
        m.grid == cfg.grid && m.d == cfg.world.dim && m.d_c == cfg.world.embed_dim,
        "checkpoint {} (k={}, d={}, d_c={}) does not match the configuration",
        stem.display(),
        m.k,
        m.d,
        m.d_c
    );
    let name = stem.file_name().map_or("generator".into(), |n| n.to_string_lossy().into_owned());
    Ok((p, name))
}

/// A clean condition with an audio track of `frames` frames.
fn long_condition(cfg: &RunConfig, stream: &str, frames: usize) -> Result<MultimodalCondition> {
    let spec = streamforge::conditions::ConditionSpec {
        frames,
        ..cfg.condition_spec()
    };
    let mut c = generate_conditions(cfg.derived_seed(stream), 1, &spec, Degradation::CLEAN)?;
    Ok(c.remove(0))
}

pub fn gen_data(cfg: &RunConfig) -> Result<ExitCode> {
    let dir = command_dir(cfg, "gen-data")?;
    let world = world(cfg)?;
    let spec = cfg.condition_spec();
    let (pool, kinds): (Vec<_>, Vec<_>) =
        generate_conditions_with_kinds(cfg.derived_seed("train-conditions"), cfg.data.n_train, &spec, cfg.data.degradation)?
            .into_iter()
            .unzip();
    save_conditions(&dir, "pool", &pool, Some(&kinds), &cfg.data.thresholds)?;
    let train = if cfg.data.curate {
        let out = filter_conditions(&pool, &cfg.data.thresholds);
        ensure!(!out.kept.is_empty(), "curation rejected every condition");
        println!("curation kept {} of {} conditions", out.kept.len(), pool.len());
        out.kept
    } else {
        pool
    };
    save_conditions(&dir, "train", &train, None, &cfg.data.thresholds)?;
    let eval = generate_conditions(cfg.derived_seed("eval-conditions"), cfg.data.n_eval, &spec, Degradation::CLEAN)?;
    save_conditions(&dir, "eval", &eval, None, &cfg.data.thresholds)?;
    let sampler = cfg.sampler()?;
    let ds = build_ode_dataset(
        &world,
        &train,
        &sampler.sched,
        cfg.data.ode_rollouts_per_condition,
        cfg.derived_seed("ode-data"),
    )?;
    save_dataset(&dir, "ode", &ds, &cfg.data.thresholds)?;
    println!("wrote {} trajectories to {}", ds.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    log.write_csv(create(path)?)?;
    Ok(())
}

pub fn train_ode(cfg: &RunConfig, args: &TrainArgs) -> Result<ExitCode> {
    let dir = command_dir(cfg, "train-ode")?;
    let ds = load_dataset(&data_dir(cfg), "ode").context("loading the ODE dataset; run gen-data first")?;
    let sampler = cfg.sampler()?;
    let ode = cfg.ode_config();
    let state_path = dir.join("state.json");
    let mut state: OdeTrainState = if args.resume {
        load_json(&state_path)?
    } else {
        let init = StudentParams::random(
            sampler.grid.k(),
            cfg.world.dim,
            cfg.world.embed_dim,
            cfg.init_scale,
            &mut seeded(cfg.derived_seed("student-init")),
        );
        OdeTrainState::new(init, &ode)
    };
    let stop = args.stop_after.unwrap_or(usize::MAX);
    while !state.finished && state.step < stop {
        let next = (state.step / cfg.checkpoint_every + 1) * cfg.checkpoint_every;
        ode_train_steps(&mut state, &ds, &sampler.grid, sampler.block_size, &ode, next.min(stop))?;
        save_json(&state_path, &state)?;
    }
    if !state.finished {
        println!("stopped at step {}; resume with --resume", state.step);
        return Ok(ExitCode::from(INCOMPLETE));
    }
    save_snapshot(&state.params, &sampler.grid, &dir.join("student"))?;
    write_log(&dir.join("train_log.csv"), &state.log)?;
    let last = state.losses.last().copied().unwrap_or(f64::NAN);
    if !state.log.converged {
        bail!(
            "ODE initialization did not converge within {} steps (last loss {last:.6})",
            state.step
        );
    }
    println!("converged after {} steps, loss {last:.6}", state.step);
    Ok(ExitCode::SUCCESS)
}

pub fn train_dmd(cfg: &RunConfig, args: &DmdArgs) -> Result<ExitCode> {
    let dir = command_dir(cfg, "train-dmd")?;
    let world = world(cfg)?;
    let sampler = cfg.sampler()?;
    let dmd = cfg.dmd_config();
    let conds = load_bundle(cfg, "train")?;
    let eval = load_bundle(cfg, "eval")?;
    let state_path = dir.join("state.json");
    let mut state: DmdTrainState = if args.train.resume {
        load_json(&state_path)?
    } else {
        let stem = args
            .init
            .clone()
            .unwrap_or_else(|| cfg.out.join("train-ode").join("student"));
        let (init, _) = load_generator(cfg, Some(&stem))?;
        DmdTrainState::new(init, &world, &sampler, &conds, &dmd)?
    };
    let stop = args.train.stop_after.unwrap_or(usize::MAX).min(dmd.total_steps);
    while state.generator_steps() < stop {
        let next = (state.generator_steps() / cfg.checkpoint_every + 1) * cfg.checkpoint_every;
        dmd_train_steps(&mut state, &world, &sampler, &conds, &eval, &dmd, next.min(stop))?;
        save_json(&state_path, &state)?;
    }
    if state.generator_steps() < dmd.total_steps {
        println!("stopped at step {}; resume with --resume", state.generator_steps());
        return Ok(ExitCode::from(INCOMPLETE));
    }
    save_snapshot(&state.best, &sampler.grid, &dir.join("best"))?;
    save_snapshot(&state.ema, &sampler.grid, &dir.join("ema"))?;
    save_snapshot(&state.gen, &sampler.grid, &dir.join("gen"))?;
    Tensor::vector(state.critic.as_slice()).save(dir.join("critic.ltv1"))?;
    write_log(&dir.join("train_log.csv"), &state.log)?;
    if let Some((step, f)) = state.log.best {
        println!("best eval Fréchet {f:.4} at step {step}");
    }
    if state.log.peak_then_degrade {
        println!("peak-then-degrade: final evaluation is worse than the best");
    }
    Ok(ExitCode::SUCCESS)
}

fn save_stream(dir: &Path, tag: &str, out: &StreamOutput) -> Result<()> {
    write_events_jsonl(&out.events(), create(&dir.join(format!("events{tag}.jsonl")))?)?;
    if !out.latents.is_empty() {
        Tensor::stack(&out.latents)?.save(dir.join(format!("latents{tag}.ltv1")))?;
        Tensor::stack(&out.pixels)?.save(dir.join(format!("pixels{tag}.ltv1")))?;
    }
    Ok(())
}

fn check_aborted(out: &StreamOutput) -> Result<()> {
    if let Some((j, msg)) = &out.aborted {
        bail!("stream aborted at block {j}: {msg}");
    }
    Ok(())
}

fn decoder(cfg: &RunConfig) -> Decoder {
    Decoder::random(cfg.world.dim, cfg.stream.pixel_dim, &mut seeded(cfg.derived_seed("decoder")))
}

fn clock(wall: bool) -> ClockKind {
    if wall {
        ClockKind::Wall
    } else {
        ClockKind::Simulated
    }
}

pub fn stream(cfg: &RunConfig, args: &StreamArgs) -> Result<ExitCode> {
    let dir = command_dir(cfg, "stream")?;
    let (gen, _) = load_generator(cfg, args.checkpoint.checkpoint.as_ref())?;
    let sampler = cfg.sampler()?;
    let b = sampler.block_size;
    let c = long_condition(cfg, "stream-condition", cfg.stream.blocks * b)?;
    let mode = match args.mode {
        Some(ModeArg::Sequential) => PipelineMode::Sequential,
        Some(ModeArg::Pipelined) => PipelineMode::Pipelined,
        None => cfg.stream.mode,
    };
    let scfg = cfg.stream_config(mode, clock(args.wall_clock));
    let out = run_stream(&gen, &sampler, &c, &c.audio, &decoder(cfg), &scfg)?;
    save_stream(&dir, "", &out)?;
    write_stream_reports(&[out.report.clone()], create(&dir.join("report.csv"))?)?;
    check_aborted(&out)?;
    let r = &out.report;
    println!(
        "{} blocks, first-frame latency {:.3} s, period {:.4} s, {:.1} fps, {} stalls",
        r.blocks, r.first_frame_latency, r.steady_state_period, r.throughput_fps, r.stall_count
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct BenchSummary {
    sequential_period: f64,
    pipelined_period: f64,
    speedup: f64,
    theoretical_speedup: f64,
    identical_outputs: bool,
}

pub fn bench(cfg: &RunConfig, args: &BenchArgs) -> Result<ExitCode> {
    let dir = command_dir(cfg, "bench")?;
    let (gen, _) = load_generator(cfg, args.checkpoint.checkpoint.as_ref())?;
    let sampler = cfg.sampler()?;
    let c = long_condition(cfg, "stream-condition", cfg.bench.blocks * sampler.block_size)?;
    let dec = decoder(cfg);
    let mut outs = Vec::new();
    for (mode, tag) in [(PipelineMode::Sequential, "_sequential"), (PipelineMode::Pipelined, "_pipelined")] {
        let scfg = cfg.bench_config(mode, clock(args.wall_clock));
        let out = run_stream(&gen, &sampler, &c, &c.audio, &dec, &scfg)?;
        check_aborted(&out)?;
        save_stream(&dir, tag, &out)?;
        outs.push(out);
    }
    let reports: Vec<_> = outs.iter().map(|o| o.report.clone()).collect();
    write_stream_reports(&reports, create(&dir.join("report.csv"))?)?;
    let (d, e) = (cfg.bench.denoise_ms, cfg.bench.decode_ms);
    let summary = BenchSummary {
        sequential_period: reports[0].steady_state_period,
        pipelined_period: reports[1].steady_state_period,
        speedup: reports[0].steady_state_period / reports[1].steady_state_period,
        theoretical_speedup: (d + e) / d.max(e),
        identical_outputs: outs[0].pixels == outs[1].pixels,
    };
    write_csv(&dir.join("summary.csv"), &[&summary])?;
    println!(
        "period sequential {:.4} s, pipelined {:.4} s, speedup {:.3} (theory {:.3})",
        summary.sequential_period, summary.pipelined_period, summary.speedup, summary.theoretical_speedup
    );
    ensure!(summary.identical_outputs, "pipelined and sequential outputs differ");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ExposureRow {
    block: usize,
    teacher_forced: f64,
    self_rollout: f64,
    gap: f64,
    shift: f64,
}

#[derive(Serialize)]
struct DriftRow {
    policy: String,
    block: usize,
    drift: f64,
}

pub fn eval(cfg: &RunConfig, args: &CheckpointArg) -> Result<ExitCode> {
    let dir = command_dir(cfg, "eval")?;
    let (gen, name) = load_generator(cfg, args.checkpoint.as_ref())?;
    let world = world(cfg)?;
    let sampler = cfg.sampler()?;
    let eval = load_bundle(cfg, "eval")?;
    let nb = world.num_blocks();
    let frechet = frechet_to_world(&gen, &sampler, &world, &eval, CachePolicy::Unbounded)?;
    let offset = max_sync_offset(world.frames(), cfg.eval.sync_max_offset);
    let sync = mean_sync_confidence(&gen, &sampler, &eval, nb, offset)?;
    let curve = exposure_bias_probe(&gen, &sampler, &world, &eval, nb, CachePolicy::Unbounded)?;
    let drift_c = long_condition(cfg, "drift-condition", cfg.eval.drift_blocks * sampler.block_size)?;
    let drifts = identity_drift_probe(&gen, &sampler, &world, &drift_c, cfg.eval.drift_blocks, &standard_policies())?;
    let row = |metric: &str, value: f64, n: usize| ReportRow {
        method: name.clone(),
        metric: metric.into(),
        value,
        n,
        seed: cfg.seed,
    };
    let mut rows = vec![
        row("frechet", frechet, eval.len()),
        row("sync", sync, eval.len()),
        row("exposure_gap_final", curve.final_gap(), eval.len()),
    ];
    for d in &drifts {
        rows.push(row(&format!("drift_final_{}", d.policy.label()), d.final_drift(), 1));
    }
    write_report(&rows, create(&dir.join("report.csv"))?)?;
    let exposure: Vec<_> = (0..nb)
        .map(|j| ExposureRow {
            block: j,
            teacher_forced: curve.teacher_forced[j],
            self_rollout: curve.self_rollout[j],
            gap: curve.gap[j],
            shift: curve.shift[j],
        })
        .collect();
    write_csv(&dir.join("exposure.csv"), &exposure)?;
    let drift_rows: Vec<_> = drifts
        .iter()
        .flat_map(|d| {
            d.drift.iter().enumerate().map(|(j, &v)| DriftRow {
                policy: d.policy.label(),
                block: j,
                drift: v,
            })
        })
        .collect();
    write_csv(&dir.join("drift.csv"), &drift_rows)?;
    println!("Fréchet {frechet:.4}, sync {sync:.4}, final exposure gap {:.4}", curve.final_gap());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ArmRow {
    arm: String,
    curated: bool,
    converged_ode: bool,
    aggressive_lr: bool,
    tuned_cfg: bool,
    train_conditions: usize,
    ode_steps: usize,
    ode_frechet: f64,
    best_frechet: f64,
    best_step: usize,
    final_frechet: f64,
    final_sync: f64,
    peak_then_degrade: bool,
}

pub fn ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<ExitCode> {
    let dir = command_dir(cfg, "ablate")?;
    let acfg = cfg.ablation_config();
    let mut arms = standard_arms();
    if args.with_degraded {
        arms.push(degraded_arm());
    }
    let results = run_ablation(&acfg, &arms)?;
    let rows: Vec<_> = results
        .iter()
        .map(|r| ArmRow {
            arm: r.name.clone(),
            curated: r.spec.curated,
            converged_ode: r.spec.converged_ode,
            aggressive_lr: r.spec.aggressive_lr,
            tuned_cfg: r.spec.tuned_cfg,
            train_conditions: r.train_conditions,
            ode_steps: r.ode_steps,
            ode_frechet: r.ode_frechet,
            best_frechet: r.best_frechet,
            best_step: r.best_step,
            final_frechet: r.final_frechet,
            final_sync: r.final_sync,
            peak_then_degrade: r.peak_then_degrade,
        })
        .collect();
    write_csv(&dir.join("arms.csv"), &rows)?;
    write_report(&ablation_rows(&results, acfg.n_eval, cfg.seed), create(&dir.join("report.csv"))?)?;
    for r in &rows {
        println!(
            "{:24} best Fréchet {:8.4} (step {:4})  final {:8.4}  sync {:.4}",
            r.arm, r.best_frechet, r.best_step, r.final_frechet, r.final_sync
        );
    }
    Ok(ExitCode::SUCCESS)
}
