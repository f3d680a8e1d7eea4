use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::NoiseSource;
use crate::streaming::cache::{ContextCache, UnboundedCache};
use crate::student::params::StudentParams;
use crate::student::predict::{backward_pooled, pool_context, BlockPredictor, KVEntry};
use crate::tensor::{Frames, LatentVideo};

/// Teacher-grid indices visited by the few-step sampler, descending in time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerGrid {
    indices: Vec<usize>,
}

impl SamplerGrid {
    pub fn new(indices: Vec<usize>, sched: &NoiseSchedule) -> Result<Self> {
        let n = sched.n_steps();
        if indices.first() != Some(&n) {
            return Err(Error::invalid(format!(
                "sampler grid must start at index {n} (t = 1), got {indices:?}"
            )));
        }
        if indices.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid(format!(
                "sampler grid must be strictly descending, got {indices:?}"
            )));
        }
        if indices.last() == Some(&0) {
            return Err(Error::invalid("sampler grid may not include t = 0"));
        }
        Ok(Self { indices })
    }

    /// `k` evenly spaced indices `N, N - N/k, …`.
    pub fn uniform(sched: &NoiseSchedule, k: usize) -> Result<Self> {
        let n = sched.n_steps();
        if k == 0 || k > n {
            return Err(Error::invalid(format!("cannot place {k} steps on a grid of {n}")));
        }
        Self::new((0..k).map(|i| n - i * n / k).collect(), sched)
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn time(&self, i: usize, sched: &NoiseSchedule) -> f64 {
        sched.time(self.indices[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Move along the predicted ODE direction between grid times.
    #[default]
    Deterministic,
    /// Re-noise the clean prediction with fresh noise at each grid time.
    Stochastic,
}

/// One block's pass through the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSample {
    /// The last clean prediction.
    pub clean: Frames,
    /// Noisy input at each step; `inputs[0]` is the initial noise.
    pub inputs: Vec<Frames>,
    /// Clean prediction at each step.
    pub preds: Vec<Frames>,
}

/// Everything the sampler needs besides the predictor and condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    pub grid: SamplerGrid,
    pub sched: NoiseSchedule,
    pub mode: SampleMode,
    pub block_size: usize,
    pub dim: usize,
}

/// Full-video rollout with the per-block sampler traces.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub video: LatentVideo,
    pub blocks: Vec<BlockSample>,
    /// Context visible to each block when it was generated.
    pub contexts: Vec<Vec<KVEntry>>,
}

impl Sampler {
    pub fn sample_block(
        &self,
        pred: &dyn BlockPredictor,
        c: &MultimodalCondition,
        context: &[KVEntry],
        block_index: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<BlockSample> {
        let k = self.grid.k();
        let mut x = Frames::zeros(self.block_size, self.dim);
        noise.fill(x.as_mut_slice());
        let mut inputs = Vec::with_capacity(k);
        let mut preds = Vec::with_capacity(k);
        for i in 0..k {
            let t = self.grid.time(i, &self.sched);
            let x0 = pred.predict_block(&x, i, t, context, c, block_index)?;
            let next = if i + 1 < k {
                let t_next = self.grid.time(i + 1, &self.sched);
                Some(match self.mode {
                    SampleMode::Deterministic => self.sched.ode_step(&x, &x0, t, t_next),
                    SampleMode::Stochastic => {
                        let mut eps = Frames::zeros(self.block_size, self.dim);
                        noise.fill(eps.as_mut_slice());
                        x0.lincomb(self.sched.alpha(t_next), &eps, self.sched.sigma(t_next))
                    }
                })
            } else {
                None
            };
            inputs.push(x);
            preds.push(x0);
            if let Some(n) = next {
                x = n;
            } else {
                break;
            }
        }
        let clean = preds.last().expect("k >= 1").clone();
        Ok(BlockSample {
            clean,
            inputs,
            preds,
        })
    }

    fn check_audio(&self, c: &MultimodalCondition, num_blocks: usize) -> Result<()> {
        let need = num_blocks * self.block_size;
        if c.num_frames() < need {
            return Err(Error::invalid(format!(
                "audio has {} frames but {num_blocks} blocks need {need}",
                c.num_frames()
            )));
        }
        Ok(())
    }

    pub fn rollout_traced(
        &self,
        pred: &dyn BlockPredictor,
        c: &MultimodalCondition,
        num_blocks: usize,
        cache: &mut dyn ContextCache,
        noise: &mut dyn NoiseSource,
    ) -> Result<RolloutTrace> {
        self.check_audio(c, num_blocks)?;
        let mut frames = Frames::zeros(num_blocks * self.block_size, self.dim);
        let mut blocks = Vec::with_capacity(num_blocks);
        let mut contexts = Vec::with_capacity(num_blocks);
        for j in 0..num_blocks {
            let context = cache.context();
            let s = self.sample_block(pred, c, &context, j, noise)?;
            if !s.clean.is_finite() {
                return Err(Error::NonFinite(format!("block {j} of rollout")));
            }
            frames.write_rows(j * self.block_size, &s.clean);
            cache.insert(KVEntry {
                block_index: j,
                feature: s.clean.clone(),
            })?;
            blocks.push(s);
            contexts.push(context);
        }
        Ok(RolloutTrace {
            video: LatentVideo::new(frames, self.block_size)?,
            blocks,
            contexts,
        })
    }

    pub fn rollout(
        &self,
        pred: &dyn BlockPredictor,
        c: &MultimodalCondition,
        num_blocks: usize,
        cache: &mut dyn ContextCache,
        noise: &mut dyn NoiseSource,
    ) -> Result<LatentVideo> {
        self.check_audio(c, num_blocks)?;
        let mut frames = Frames::zeros(num_blocks * self.block_size, self.dim);
        for j in 0..num_blocks {
            let context = cache.context();
            let s = self.sample_block(pred, c, &context, j, noise)?;
            if !s.clean.is_finite() {
                return Err(Error::NonFinite(format!("block {j} of rollout")));
            }
            frames.write_rows(j * self.block_size, &s.clean);
            cache.insert(KVEntry {
                block_index: j,
                feature: s.clean,
            })?;
        }
        LatentVideo::new(frames, self.block_size)
    }

    /// Rollout with an unbounded cache.
    pub fn rollout_unbounded(
        &self,
        pred: &dyn BlockPredictor,
        c: &MultimodalCondition,
        num_blocks: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<LatentVideo> {
        self.rollout(pred, c, num_blocks, &mut UnboundedCache::new(), noise)
    }

    /// Backpropagate `upstream` (gradient on `sample.clean`) through every
    /// sampler step of one block, accumulating into `grad`. The context is
    /// treated as a constant.
    #[allow(clippy::too_many_arguments)]
    pub fn block_backward(
        &self,
        p: &StudentParams,
        sample: &BlockSample,
        context: &[KVEntry],
        c: &MultimodalCondition,
        block_index: usize,
        upstream: &Frames,
        grad: &mut [f64],
    ) {
        let pool = pool_context(context, p.dim());
        let k = sample.preds.len();
        // gradient flowing into the noisy input of step i + 1
        let mut g_next: Option<Frames> = None;
        for i in (0..k).rev() {
            let mut g_pred = if i + 1 == k {
                upstream.clone()
            } else {
                Frames::zeros(self.block_size, self.dim)
            };
            let mut g_x = Frames::zeros(self.block_size, self.dim);
            if let Some(gn) = &g_next {
                let t = self.grid.time(i, &self.sched);
                let t_next = self.grid.time(i + 1, &self.sched);
                let (cx, c0) = match self.mode {
                    SampleMode::Deterministic => self.sched.ode_coeffs(t, t_next),
                    SampleMode::Stochastic => (0.0, self.sched.alpha(t_next)),
                };
                g_pred = g_pred.lincomb(1.0, gn, c0);
                g_x = gn.scale(cx);
            }
            let dx = backward_pooled(
                p,
                &sample.inputs[i],
                i,
                &pool,
                c,
                block_index,
                &g_pred,
                grad,
            );
            g_next = Some(g_x.add(&dx));
        }
    }
}

/// Sample one block from pure noise.
#[allow(clippy::too_many_arguments)]
pub fn few_step_sample_block(
    pred: &dyn BlockPredictor,
    c: &MultimodalCondition,
    context: &[KVEntry],
    block_index: usize,
    grid: &SamplerGrid,
    sched: &NoiseSchedule,
    block_shape: (usize, usize),
    noise: &mut dyn NoiseSource,
    mode: SampleMode,
) -> Result<BlockSample> {
    let s = Sampler {
        grid: grid.clone(),
        sched: sched.clone(),
        mode,
        block_size: block_shape.0,
        dim: block_shape.1,
    };
    s.sample_block(pred, c, context, block_index, noise)
}

/// Generate `num_blocks` blocks in order, feeding each finished block back
/// through `cache`.
pub fn rollout_video(
    pred: &dyn BlockPredictor,
    c: &MultimodalCondition,
    num_blocks: usize,
    cache: &mut dyn ContextCache,
    sampler: &Sampler,
    noise: &mut dyn NoiseSource,
) -> Result<LatentVideo> {
    sampler.rollout(pred, c, num_blocks, cache, noise)
}
