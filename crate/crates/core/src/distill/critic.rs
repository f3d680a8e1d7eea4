//! The fake-score critic: a non-causal, full-video x0-predictor.
//!
//! Frame `f` of the prediction is `Θ_β φ_f` where `β` is the noise-level
//! bucket and `φ_f` stacks the noisy frames within `radius` of `f` (zero
//! padded at the ends), the mean of all noisy frames, the condition feature of
//! frame `f` and a constant 1.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::error::{Error, Result};
use crate::tensor::Frames;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    buckets: usize,
    radius: usize,
    dim: usize,
    embed_dim: usize,
    /// Per bucket, a row-major `dim × feature_len` matrix.
    data: Vec<f64>,
}

/// One critic training example: a clean rollout, its noise level and the
/// noised version. `base` is a frozen prediction the critic output is added
/// to (zeros for a plain critic).
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSample {
    pub x0: Frames,
    pub tau: f64,
    pub x_tau: Frames,
    pub base: Frames,
    pub condition: MultimodalCondition,
}

impl CriticParams {
    pub fn zeros(buckets: usize, radius: usize, dim: usize, embed_dim: usize) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(Error::invalid("critic needs at least one bucket and dimension"));
        }
        let mut c = Self {
            buckets,
            radius,
            dim,
            embed_dim,
            data: Vec::new(),
        };
        c.data = vec![0.0; buckets * c.bucket_len()];
        Ok(c)
    }

    pub fn from_vec(
        buckets: usize,
        radius: usize,
        dim: usize,
        embed_dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let mut c = Self::zeros(buckets, radius, dim, embed_dim)?;
        if data.len() != c.data.len() {
            return Err(Error::shape(c.data.len(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("critic parameters".into()));
        }
        c.data = data;
        Ok(c)
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_len(&self) -> usize {
        (2 * self.radius + 2) * self.dim + 2 * self.embed_dim + 2
    }

    fn bucket_len(&self) -> usize {
        self.dim * self.feature_len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn bucket(&self, b: usize) -> &[f64] {
        let n = self.bucket_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// Uniform buckets on `(0, 1)`.
    pub fn bucket_of(&self, tau: f64) -> usize {
        ((tau * self.buckets as f64).floor().max(0.0) as usize).min(self.buckets - 1)
    }

    fn check(&self, x_tau: &Frames, c: &MultimodalCondition) -> Result<()> {
        if x_tau.dim() != self.dim {
            return Err(Error::shape(self.dim, x_tau.dim()));
        }
        if c.embed_dim() != self.embed_dim {
            return Err(Error::shape(self.embed_dim, c.embed_dim()));
        }
        Ok(())
    }

    /// `φ_f` for every frame, one row each.
    pub fn features(&self, x_tau: &Frames, c: &MultimodalCondition) -> Vec<Vec<f64>> {
        let (n, d, r) = (x_tau.rows(), self.dim, self.radius as isize);
        let mean = x_tau.row_mean();
        let mut cf = Vec::new();
        (0..n)
            .map(|f| {
                let mut phi = Vec::with_capacity(self.feature_len());
                for o in -r..=r {
                    let g = f as isize + o;
                    if g >= 0 && (g as usize) < n {
                        phi.extend_from_slice(x_tau.row(g as usize));
                    } else {
                        phi.extend(std::iter::repeat_n(0.0, d));
                    }
                }
                phi.extend_from_slice(&mean);
                c.write_feature(f, &mut cf);
                phi.extend_from_slice(&cf);
                phi.push(1.0);
                phi
            })
            .collect()
    }

    pub fn predict(&self, x_tau: &Frames, tau: f64, c: &MultimodalCondition) -> Result<Frames> {
        self.check(x_tau, c)?;
        let theta = self.bucket(self.bucket_of(tau));
        let p = self.feature_len();
        let phis = self.features(x_tau, c);
        let mut out = Frames::zeros(x_tau.rows(), self.dim);
        for (f, phi) in phis.iter().enumerate() {
            for (o, row) in out.row_mut(f).iter_mut().zip(theta.chunks(p)) {
                *o = row.iter().zip(phi).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// Accumulate `∂⟨upstream, predict⟩/∂θ` into `grad`.
    pub fn backward(
        &self,
        x_tau: &Frames,
        tau: f64,
        c: &MultimodalCondition,
        upstream: &Frames,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check(x_tau, c)?;
        x_tau.check_same_shape(upstream)?;
        if grad.len() != self.len() {
            return Err(Error::shape(self.len(), grad.len()));
        }
        let n = self.bucket_len();
        let b = self.bucket_of(tau);
        let g = &mut grad[b * n..(b + 1) * n];
        let p = self.feature_len();
        for (f, phi) in self.features(x_tau, c).iter().enumerate() {
            for (row, u) in g.chunks_mut(p).zip(upstream.row(f)) {
                for (gg, ph) in row.iter_mut().zip(phi) {
                    *gg += u * ph;
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mean over samples of `‖base + s_ψ(x_τ) - x0‖²`, with its gradient.
pub fn critic_loss(critic: &CriticParams, samples: &[CriticSample]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; critic.len()];
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let w = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    for s in samples {
        let diff = critic
            .predict(&s.x_tau, s.tau, &s.condition)?
            .add(&s.base)
            .sub(&s.x0);
        loss += w * diff.squared_norm();
        critic.backward(&s.x_tau, s.tau, &s.condition, &diff.scale(2.0 * w), &mut grad)?;
    }
    Ok((loss, grad))
}

/// Per-bucket minimum-norm least-squares fit. Buckets without samples keep
/// their current weights.
pub fn fit_critic_ls(critic: &CriticParams, samples: &[CriticSample]) -> Result<CriticParams> {
    let p = critic.feature_len();
    let d = critic.dim;
    let mut out = critic.clone();
    for b in 0..critic.buckets {
        let mine: Vec<&CriticSample> = samples
            .iter()
            .filter(|s| critic.bucket_of(s.tau) == b)
            .collect();
        if mine.is_empty() {
            continue;
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut targets: Vec<Vec<f64>> = Vec::new();
        for s in &mine {
            critic.check(&s.x_tau, &s.condition)?;
            rows.extend(critic.features(&s.x_tau, &s.condition));
            let resid = s.x0.sub(&s.base);
            targets.extend((0..resid.rows()).map(|f| resid.row(f).to_vec()));
        }
        let m = rows.len();
        let phi = DMatrix::from_fn(m, p, |i, j| rows[i][j]);
        let y = DMatrix::from_fn(m, d, |i, j| targets[i][j]);
        let theta = phi
            .svd(true, true)
            .solve(&y, 1e-10)
            .map_err(|e| Error::Config(format!("critic least squares: {e}")))?;
        let n = critic.bucket_len();
        let dst = &mut out.data[b * n..(b + 1) * n];
        for i in 0..d {
            for j in 0..p {
                dst[i * p + j] = theta[(j, i)];
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("critic least-squares fit".into()));
    }
    Ok(out)
}
