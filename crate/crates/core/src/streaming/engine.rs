//! Block scheduler and the two-stage denoise/decode pipeline.
//!
//! Two executors share the per-block computation. The wall-clock executor runs
//! a denoise worker and a decode worker joined by a bounded handoff, with the
//! calling thread feeding audio. The simulated executor runs single-threaded
//! and derives timestamps from the same queueing rules, so its logs are
//! reproducible byte for byte.

use std::io::Write;
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::error::{Error, Result};
use crate::rng::indexed_stream;
use crate::streaming::cache::{CachePolicy, ContextCache};
use crate::streaming::decode::Decoder;
use crate::streaming::windower::{AudioWindow, AudioWindower, WindowSpec};
use crate::student::{BlockPredictor, KVEntry, Sampler};
use crate::tensor::Frames;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Sequential,
    #[default]
    Pipelined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    Wall,
    #[default]
    Simulated,
}

/// Artificial stage durations. A stage takes at least this long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageDelays {
    pub denoise_ns: u64,
    pub decode_ns: u64,
}

impl StageDelays {
    pub fn from_millis(denoise: u64, decode: u64) -> Self {
        Self {
            denoise_ns: denoise * 1_000_000,
            decode_ns: decode * 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub mode: PipelineMode,
    pub clock: ClockKind,
    pub delays: StageDelays,
    /// Blocks the handoff between denoise and decode can hold.
    pub handoff_depth: usize,
    pub window: WindowSpec,
    pub cache: CachePolicy,
    /// Playback rate in latent frames per second.
    pub fps: f64,
    /// Gap between audio frame arrivals; zero delivers the whole track at once.
    pub audio_frame_interval_ns: u64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Pipelined,
            clock: ClockKind::Simulated,
            delays: StageDelays::default(),
            handoff_depth: 1,
            window: WindowSpec::default(),
            cache: CachePolicy::DEFAULT_AHIS,
            fps: 16.0,
            audio_frame_interval_ns: 0,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.handoff_depth == 0 {
            return Err(Error::Config("handoff_depth must be at least 1".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.window.frames_per_block == 0 {
            return Err(Error::Config("frames_per_block must be positive".into()));
        }
        Ok(())
    }
}

/// Per-block timestamps in nanoseconds since the first audio frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub block_index: usize,
    pub audio_ready: u64,
    pub denoise_start: u64,
    pub denoise_end: u64,
    pub decode_start: u64,
    pub decode_end: u64,
    pub emit: u64,
}

impl StageTiming {
    pub fn is_monotone(&self) -> bool {
        self.audio_ready <= self.denoise_start
            && self.denoise_start <= self.denoise_end
            && self.denoise_end <= self.decode_start
            && self.decode_start <= self.decode_end
            && self.decode_end <= self.emit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AudioReady,
    Denoise,
    Decode,
    Emit,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub block_index: usize,
    pub stage: Stage,
    pub t_start_ns: u64,
    pub t_end_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub mode: PipelineMode,
    pub clock: ClockKind,
    pub blocks: usize,
    /// Seconds from the first audio frame to the first emitted block.
    pub first_frame_latency: f64,
    pub throughput_fps: f64,
    /// Median gap between consecutive emissions, seconds.
    pub steady_state_period: f64,
    pub stall_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub latents: Vec<Frames>,
    pub pixels: Vec<Frames>,
    pub timings: Vec<StageTiming>,
    pub report: StreamReport,
    /// Set when a block produced non-finite latents; output stops before it.
    pub aborted: Option<(usize, String)>,
}

impl StreamOutput {
    pub fn events(&self) -> Vec<StreamEvent> {
        let mut ev = Vec::with_capacity(4 * self.timings.len() + 1);
        for t in &self.timings {
            let e = |stage, a, b| StreamEvent {
                block_index: t.block_index,
                stage,
                t_start_ns: a,
                t_end_ns: b,
                detail: None,
            };
            ev.push(e(Stage::AudioReady, t.audio_ready, t.audio_ready));
            ev.push(e(Stage::Denoise, t.denoise_start, t.denoise_end));
            ev.push(e(Stage::Decode, t.decode_start, t.decode_end));
            ev.push(e(Stage::Emit, t.emit, t.emit));
        }
        if let Some((j, msg)) = &self.aborted {
            let at = self.timings.last().map_or(0, |t| t.emit);
            ev.push(StreamEvent {
                block_index: *j,
                stage: Stage::Abort,
                t_start_ns: at,
                t_end_ns: at,
                detail: Some(msg.clone()),
            });
        }
        ev
    }
}

pub fn write_events_jsonl(events: &[StreamEvent], mut out: impl Write) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// One CSV row per report, with a header.
pub fn write_stream_reports(reports: &[StreamReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Noise stream for block `j` of a stream seeded with `seed`.
pub fn block_noise(seed: u64, j: usize) -> crate::rng::SeededRng {
    indexed_stream(seed, "stream-block", j as u64)
}

/// Condition seen by block `j`: the static embeddings plus the window's audio
/// at its stream positions.
fn windowed_condition(c_static: &MultimodalCondition, win: &AudioWindow) -> MultimodalCondition {
    let end = win.end().max(0) as usize;
    let mut audio = vec![0.0; end];
    for (f, a) in audio.iter_mut().enumerate() {
        if let Some(v) = win.at(f) {
            *a = v;
        }
    }
    c_static.with_audio(audio)
}

struct BlockJob<'a> {
    gen: &'a (dyn BlockPredictor + Sync),
    sampler: &'a Sampler,
    c_static: &'a MultimodalCondition,
    seed: u64,
}

impl BlockJob<'_> {
    fn denoise(&self, cache: &mut dyn ContextCache, win: &AudioWindow) -> Result<Frames> {
        let j = win.block_index;
        let c = windowed_condition(self.c_static, win);
        let context = cache.context();
        let s = self
            .sampler
            .sample_block(self.gen, &c, &context, j, &mut block_noise(self.seed, j))?;
        if !s.clean.is_finite() {
            return Err(Error::NonFinite(format!("latent of block {j}")));
        }
        cache.insert(KVEntry {
            block_index: j,
            feature: s.clean.clone(),
        })?;
        Ok(s.clean)
    }
}

pub fn run_stream(
    gen: &(dyn BlockPredictor + Sync),
    sampler: &Sampler,
    c_static: &MultimodalCondition,
    audio: &[f64],
    decoder: &Decoder,
    cfg: &StreamConfig,
) -> Result<StreamOutput> {
    cfg.validate()?;
    if cfg.window.frames_per_block != sampler.block_size {
        return Err(Error::Config(format!(
            "window block size {} differs from the sampler's {}",
            cfg.window.frames_per_block, sampler.block_size
        )));
    }
    if decoder.latent_dim() != sampler.dim {
        return Err(Error::shape(sampler.dim, decoder.latent_dim()));
    }
    if audio.len() < sampler.block_size {
        return Err(Error::invalid("audio shorter than one block"));
    }
    let job = BlockJob {
        gen,
        sampler,
        c_static,
        seed: cfg.seed,
    };
    let (latents, pixels, timings, aborted) = match cfg.clock {
        ClockKind::Simulated => run_simulated(&job, audio, decoder, cfg)?,
        ClockKind::Wall => run_wall(&job, audio, decoder, cfg)?,
    };
    let report = stream_report(&timings, cfg, sampler.block_size);
    Ok(StreamOutput {
        latents,
        pixels,
        timings,
        report,
        aborted,
    })
}

type Executed = (Vec<Frames>, Vec<Frames>, Vec<StageTiming>, Option<(usize, String)>);

fn abort_reason(e: Error) -> Result<String> {
    match e {
        Error::NonFinite(msg) => Ok(msg),
        other => Err(other),
    }
}

fn arrival_ns(frame: usize, cfg: &StreamConfig) -> u64 {
    frame as u64 * cfg.audio_frame_interval_ns
}

fn run_simulated(job: &BlockJob, audio: &[f64], decoder: &Decoder, cfg: &StreamConfig) -> Result<Executed> {
    let b = cfg.window.frames_per_block;
    let num_blocks = audio.len() / b;
    let mut windower = AudioWindower::new(cfg.window)?;
    windower.push_slice(audio)?;
    windower.end_stream();
    let mut cache = cfg.cache.build();
    let (d, c) = (cfg.delays.denoise_ns, cfg.delays.decode_ns);
    let q = cfg.handoff_depth;
    let mut latents = Vec::with_capacity(num_blocks);
    let mut pixels = Vec::with_capacity(num_blocks);
    let mut timings: Vec<StageTiming> = Vec::with_capacity(num_blocks);
    // Time the denoiser's handoff of each block completed.
    let mut handed: Vec<u64> = Vec::with_capacity(num_blocks);
    for j in 0..num_blocks {
        let need = windower.required_frames(j).min(audio.len());
        let ready = arrival_ns(need - 1, cfg);
        let win = windower.window(j).expect("stream ended");
        let latent = match job.denoise(cache.as_mut(), &win) {
            Ok(l) => l,
            Err(e) => return Ok((latents, pixels, timings, Some((j, abort_reason(e)?)))),
        };
        let px = decoder.decode(&latent)?;
        let prev = timings.last();
        let t = match cfg.mode {
            PipelineMode::Sequential => {
                let ds = ready.max(prev.map_or(0, |p| p.emit));
                let de = ds + d;
                StageTiming {
                    block_index: j,
                    audio_ready: ready,
                    denoise_start: ds,
                    denoise_end: de,
                    decode_start: de,
                    decode_end: de + c,
                    emit: de + c,
                }
            }
            PipelineMode::Pipelined => {
                let ds = ready.max(handed.last().copied().unwrap_or(0));
                let de = ds + d;
                let slot = if j >= q { timings[j - q].decode_start } else { 0 };
                let hand = de.max(slot);
                let cs = hand.max(prev.map_or(0, |p| p.decode_end));
                handed.push(hand);
                StageTiming {
                    block_index: j,
                    audio_ready: ready,
                    denoise_start: ds,
                    denoise_end: de,
                    decode_start: cs,
                    decode_end: cs + c,
                    emit: cs + c,
                }
            }
        };
        timings.push(t);
        latents.push(latent);
        pixels.push(px);
    }
    Ok((latents, pixels, timings, None))
}

enum Handoff {
    Block(StageTiming, Frames),
    Abort(usize, Error),
}

fn sleep_until(t0: Instant, at_ns: u64) {
    let target = t0 + Duration::from_nanos(at_ns);
    let now = Instant::now();
    if target > now {
        thread::sleep(target - now);
    }
}

fn since(t0: Instant) -> u64 {
    t0.elapsed().as_nanos() as u64
}

/// Pull audio until block `j` is ready. Returns false when the stream ended
/// before block `j` had all of its own frames.
fn await_block(windower: &mut AudioWindower, rx: &Receiver<f64>, j: usize) -> Result<bool> {
    let b = windower.spec().frames_per_block;
    while !windower.is_ready(j) {
        match rx.recv() {
            Ok(f) => windower.push(f)?,
            Err(_) => windower.end_stream(),
        }
    }
    Ok(windower.arrived() >= (j + 1) * b)
}

fn denoise_worker(
    job: &BlockJob,
    cfg: &StreamConfig,
    t0: Instant,
    audio_rx: Receiver<f64>,
    mut emit: impl FnMut(Handoff) -> bool,
) -> Result<()> {
    let mut windower = AudioWindower::new(cfg.window)?;
    let mut cache = cfg.cache.build();
    for j in 0.. {
        if !await_block(&mut windower, &audio_rx, j)? {
            break;
        }
        let ready = since(t0);
        let win = windower.window(j).expect("checked ready");
        let ds = since(t0);
        let out = job.denoise(cache.as_mut(), &win);
        sleep_until(t0, ds + cfg.delays.denoise_ns);
        let de = since(t0);
        let msg = match out {
            Ok(latent) => Handoff::Block(
                StageTiming {
                    block_index: j,
                    audio_ready: ready,
                    denoise_start: ds,
                    denoise_end: de,
                    ..StageTiming::default()
                },
                latent,
            ),
            Err(e) => {
                emit(Handoff::Abort(j, e));
                break;
            }
        };
        if !emit(msg) {
            break;
        }
    }
    Ok(())
}

#[derive(Default)]
struct Sink {
    latents: Vec<Frames>,
    pixels: Vec<Frames>,
    timings: Vec<StageTiming>,
    aborted: Option<(usize, String)>,
    error: Option<Error>,
}

impl Sink {
    fn decode(&mut self, decoder: &Decoder, cfg: &StreamConfig, t0: Instant, msg: Handoff) -> bool {
        match msg {
            Handoff::Block(mut t, latent) => {
                t.decode_start = since(t0);
                let px = decoder.decode(&latent);
                sleep_until(t0, t.decode_start + cfg.delays.decode_ns);
                t.decode_end = since(t0);
                t.emit = since(t0);
                match px {
                    Ok(px) => {
                        self.timings.push(t);
                        self.latents.push(latent);
                        self.pixels.push(px);
                        true
                    }
                    Err(e) => {
                        self.error = Some(e);
                        false
                    }
                }
            }
            Handoff::Abort(j, e) => {
                match abort_reason(e) {
                    Ok(msg) => self.aborted = Some((j, msg)),
                    Err(e) => self.error = Some(e),
                }
                false
            }
        }
    }

    fn finish(self) -> Result<Executed> {
        match self.error {
            Some(e) => Err(e),
            None => Ok((self.latents, self.pixels, self.timings, self.aborted)),
        }
    }
}

fn feed_audio(audio: &[f64], cfg: &StreamConfig, t0: Instant, tx: mpsc::Sender<f64>) {
    for (i, &a) in audio.iter().enumerate() {
        if cfg.audio_frame_interval_ns > 0 {
            sleep_until(t0, arrival_ns(i, cfg));
        }
        if tx.send(a).is_err() {
            return;
        }
    }
}

fn run_wall(job: &BlockJob, audio: &[f64], decoder: &Decoder, cfg: &StreamConfig) -> Result<Executed> {
    let (audio_tx, audio_rx) = mpsc::channel();
    let t0 = Instant::now();
    match cfg.mode {
        PipelineMode::Sequential => thread::scope(|s| {
            let worker = s.spawn(move || {
                let mut sink = Sink::default();
                let r = denoise_worker(job, cfg, t0, audio_rx, |msg| sink.decode(decoder, cfg, t0, msg));
                r.and_then(|_| sink.finish())
            });
            feed_audio(audio, cfg, t0, audio_tx);
            worker.join().expect("denoise worker panicked")
        }),
        PipelineMode::Pipelined => thread::scope(|s| {
            let (tx, rx): (SyncSender<Handoff>, Receiver<Handoff>) = mpsc::sync_channel(cfg.handoff_depth);
            let denoiser = s.spawn(move || denoise_worker(job, cfg, t0, audio_rx, |msg| tx.send(msg).is_ok()));
            let decoder_worker = s.spawn(move || {
                let mut sink = Sink::default();
                for msg in rx {
                    if !sink.decode(decoder, cfg, t0, msg) {
                        break;
                    }
                }
                sink.finish()
            });
            feed_audio(audio, cfg, t0, audio_tx);
            let produced = denoiser.join().expect("denoise worker panicked");
            let decoded = decoder_worker.join().expect("decode worker panicked");
            produced.and(decoded)
        }),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn stream_report(timings: &[StageTiming], cfg: &StreamConfig, block_size: usize) -> StreamReport {
    let secs = |ns: u64| ns as f64 * 1e-9;
    let mut report = StreamReport {
        mode: cfg.mode,
        clock: cfg.clock,
        blocks: timings.len(),
        first_frame_latency: 0.0,
        throughput_fps: 0.0,
        steady_state_period: 0.0,
        stall_count: 0,
    };
    let (Some(first), Some(last)) = (timings.first(), timings.last()) else {
        return report;
    };
    report.first_frame_latency = secs(first.emit);
    if last.emit > 0 {
        report.throughput_fps = (timings.len() * block_size) as f64 / secs(last.emit);
    }
    report.steady_state_period = median(
        timings
            .windows(2)
            .map(|w| secs(w[1].emit.saturating_sub(w[0].emit)))
            .collect(),
    );
    let deadline = |j: usize| first.emit + ((j * block_size) as f64 * 1e9 / cfg.fps).round() as u64;
    report.stall_count = timings
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(j, t)| t.emit > deadline(*j))
        .count();
    report
}
