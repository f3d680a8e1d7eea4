//! A conditional Gaussian data distribution with a closed-form denoiser.
//!
//! Frame `f` of a video drawn under condition `c` has mean
//! `M_text c_text + M_img c_img + M_audio audio[f]`; the covariance is
//! `R ⊗ (base_var I_d)` with `R[f, g] = rho^|f - g|` (an AR(1) process in time,
//! isotropic across latent dimensions). Because the dimension factor is a
//! multiple of the identity, every posterior computation reduces to `F × F`
//! frame matrices applied column-wise.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{substream, NoiseSource};
use crate::tensor::{Frames, LatentVideo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    /// Latent dimension.
    pub dim: usize,
    /// Text/image embedding dimension.
    pub embed_dim: usize,
    /// Frames per video.
    pub frames: usize,
    pub block_size: usize,
    pub rho: f64,
    pub base_var: f64,
    /// Std of the entries of the text map (before `1/sqrt(embed_dim)` scaling).
    pub text_gain: f64,
    pub img_gain: f64,
    pub audio_gain: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            dim: 8,
            embed_dim: 4,
            frames: 21,
            block_size: 3,
            rho: 0.9,
            base_var: 0.25,
            text_gain: 1.0,
            img_gain: 1.0,
            audio_gain: 0.5,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianWorld {
    params: WorldParams,
    m_text: DMatrix<f64>,
    m_img: DMatrix<f64>,
    m_audio: DVector<f64>,
    corr_vecs: DMatrix<f64>,
    corr_vals: DVector<f64>,
}

/// Output of the exact teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPrediction {
    pub x0: Frames,
    /// Set when queried at `alpha(t) = 0`, where the posterior is the prior mean.
    pub degenerate: bool,
}

pub fn ar1_corr(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Apply an `F × F` frame operator to every latent dimension: `out[f] = Σ_g m[f,g] x[g]`.
pub fn apply_frame_op(m: &DMatrix<f64>, x: &Frames) -> Frames {
    let (rows, dim) = x.shape();
    debug_assert_eq!(m.ncols(), rows);
    let mut out = Frames::zeros(m.nrows(), dim);
    for f in 0..m.nrows() {
        let o = out.row_mut(f);
        for g in 0..rows {
            let w = m[(f, g)];
            if w != 0.0 {
                for (oo, xx) in o.iter_mut().zip(x.row(g)) {
                    *oo += w * xx;
                }
            }
        }
    }
    out
}

impl GaussianWorld {
    /// Draw the condition maps from `params.seed`.
    pub fn new(params: WorldParams) -> Result<Self> {
        let mut rng = substream(params.seed, "world-maps");
        let (d, dc) = (params.dim, params.embed_dim);
        let s = 1.0 / (dc.max(1) as f64).sqrt();
        let mut draw = |rows: usize, cols: usize, gain: f64| {
            DMatrix::from_fn(rows, cols, |_, _| {
                gain * s * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let m_text = draw(d, dc, params.text_gain);
        let m_img = draw(d, dc, params.img_gain);
        let m_audio = DVector::from_fn(d, |_, _| {
            params.audio_gain * rng.sample::<f64, _>(StandardNormal)
        });
        Self::from_maps(params, m_text, m_img, m_audio)
    }

    pub fn from_maps(
        params: WorldParams,
        m_text: DMatrix<f64>,
        m_img: DMatrix<f64>,
        m_audio: DVector<f64>,
    ) -> Result<Self> {
        if !(params.rho > -1.0 && params.rho < 1.0) {
            return Err(Error::Config(format!("rho {} outside (-1, 1)", params.rho)));
        }
        if !(params.base_var >= 0.0) || !params.base_var.is_finite() {
            return Err(Error::Config(format!("base_var {} must be >= 0", params.base_var)));
        }
        if params.block_size == 0 || params.frames % params.block_size != 0 {
            return Err(Error::Config(format!(
                "frames {} not a multiple of block size {}",
                params.frames, params.block_size
            )));
        }
        let (d, dc) = (params.dim, params.embed_dim);
        if m_text.shape() != (d, dc) || m_img.shape() != (d, dc) || m_audio.len() != d {
            return Err(Error::Config("condition map shapes do not match dims".into()));
        }
        let eig = SymmetricEigen::new(ar1_corr(params.frames, params.rho));
        Ok(Self {
            params,
            m_text,
            m_img,
            m_audio,
            corr_vecs: eig.eigenvectors,
            corr_vals: eig.eigenvalues,
        })
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn embed_dim(&self) -> usize {
        self.params.embed_dim
    }

    pub fn frames(&self) -> usize {
        self.params.frames
    }

    pub fn block_size(&self) -> usize {
        self.params.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.params.frames / self.params.block_size
    }

    pub fn m_audio(&self) -> &DVector<f64> {
        &self.m_audio
    }

    pub fn frame_corr(&self, f: usize, g: usize) -> f64 {
        self.params.rho.powi(f.abs_diff(g) as i32)
    }

    /// `trace(Σ)` for a full video.
    pub fn trace_cov(&self) -> f64 {
        (self.params.frames * self.params.dim) as f64 * self.params.base_var
    }

    fn check_cond(&self, c: &MultimodalCondition, frames: usize) -> Result<()> {
        if c.embed_dim() != self.params.embed_dim {
            return Err(Error::shape(
                format!("embedding dim {}", self.params.embed_dim),
                c.embed_dim(),
            ));
        }
        if c.num_frames() < frames {
            return Err(Error::invalid(format!(
                "audio track has {} frames, need {frames}",
                c.num_frames()
            )));
        }
        Ok(())
    }

    pub fn mean_frame(&self, c: &MultimodalCondition, f: usize) -> Vec<f64> {
        let t = DVector::from_column_slice(&c.text_emb);
        let i = DVector::from_column_slice(&c.img_emb);
        let a = c.audio.get(f).copied().unwrap_or(0.0);
        let m = &self.m_text * t + &self.m_img * i + &self.m_audio * a;
        m.iter().copied().collect()
    }

    /// Conditional mean for frames `start..start + len`.
    pub fn mean_range(&self, c: &MultimodalCondition, start: usize, len: usize) -> Result<Frames> {
        self.check_cond(c, start + len)?;
        let t = DVector::from_column_slice(&c.text_emb);
        let i = DVector::from_column_slice(&c.img_emb);
        let base = &self.m_text * t + &self.m_img * i;
        let mut out = Frames::zeros(len, self.params.dim);
        for r in 0..len {
            let a = c.audio[start + r];
            for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = base[k] + self.m_audio[k] * a;
            }
        }
        Ok(out)
    }

    /// `μ_c` over the world's frame count.
    pub fn mean(&self, c: &MultimodalCondition) -> Result<Frames> {
        self.mean_range(c, 0, self.params.frames)
    }

    /// Dense `(F d) × (F d)` covariance, frame-major.
    pub fn covariance(&self) -> DMatrix<f64> {
        let (n, d) = (self.params.frames, self.params.dim);
        let bv = self.params.base_var;
        DMatrix::from_fn(n * d, n * d, |i, j| {
            if i % d == j % d {
                bv * self.frame_corr(i / d, j / d)
            } else {
                0.0
            }
        })
    }

    /// Mean and dense covariance of block `j`.
    pub fn block_marginal(
        &self,
        c: &MultimodalCondition,
        j: usize,
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let b = self.params.block_size;
        let d = self.params.dim;
        let mean = self.mean_range(c, j * b, b)?.into_vec();
        let bv = self.params.base_var;
        let cov = DMatrix::from_fn(b * d, b * d, |p, q| {
            if p % d == q % d {
                bv * self.frame_corr(p / d, q / d)
            } else {
                0.0
            }
        });
        Ok((mean, cov))
    }

    /// Exact posterior mean `E[x0 | x_t, c]` for a full video.
    pub fn teacher_x0(
        &self,
        x_t: &Frames,
        t: f64,
        c: &MultimodalCondition,
        sched: &NoiseSchedule,
    ) -> Result<TeacherPrediction> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("teacher queried at t = {t}")));
        }
        if x_t.shape() != (self.params.frames, self.params.dim) {
            return Err(Error::shape(
                format!("{}x{}", self.params.frames, self.params.dim),
                format!("{}x{}", x_t.rows(), x_t.dim()),
            ));
        }
        let mu = self.mean(c)?;
        let alpha = sched.alpha(t);
        if alpha <= 0.0 {
            return Ok(TeacherPrediction {
                x0: mu,
                degenerate: true,
            });
        }
        let sigma = sched.sigma(t);
        let bv = self.params.base_var;
        // gain = alpha bv R (alpha^2 bv R + sigma^2 I)^-1, diagonal in R's eigenbasis
        let gains = self.corr_vals.map(|lam| {
            let num = alpha * bv * lam;
            let den = alpha * alpha * bv * lam + sigma * sigma;
            if den > 0.0 {
                num / den
            } else {
                1.0 / alpha
            }
        });
        let q = &self.corr_vecs;
        let op = q * DMatrix::from_diagonal(&gains) * q.transpose();
        let resid = x_t.lincomb(1.0, &mu, -alpha);
        Ok(TeacherPrediction {
            x0: mu.add(&apply_frame_op(&op, &resid)),
            degenerate: false,
        })
    }

    /// Score `∇ log p_t(x_t | c)` by a dense Cholesky solve of the full
    /// `(F d)`-dimensional marginal covariance `alpha² Σ + sigma² I`.
    pub fn analytic_score(
        &self,
        x_t: &Frames,
        t: f64,
        c: &MultimodalCondition,
        sched: &NoiseSchedule,
    ) -> Result<Frames> {
        let mu = self.mean(c)?;
        let (alpha, sigma) = (sched.alpha(t), sched.sigma(t));
        let n = self.params.frames * self.params.dim;
        let cov = self.covariance() * (alpha * alpha) + DMatrix::identity(n, n) * (sigma * sigma);
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Config("marginal covariance not SPD".into()))?;
        let r = DVector::from_iterator(
            n,
            x_t.as_slice()
                .iter()
                .zip(mu.as_slice())
                .map(|(x, m)| -(x - alpha * m)),
        );
        let s = chol.solve(&r);
        Frames::from_vec(self.params.frames, self.params.dim, s.iter().copied().collect())
    }

    /// Prior for block `block_index` given clean context frames.
    ///
    /// Returns the conditional mean (`b × d`) and the conditional frame
    /// correlation `P` (`b × b`); the block covariance is `P ⊗ base_var I`.
    pub fn block_conditional(
        &self,
        c: &MultimodalCondition,
        block_index: usize,
        context: &[(usize, &[f64])],
    ) -> Result<(Frames, DMatrix<f64>)> {
        let b = self.params.block_size;
        let start = block_index * b;
        let mu_b = self.mean_range(c, start, b)?;
        let block_frames: Vec<usize> = (start..start + b).collect();
        let corr = |fs: &[usize], gs: &[usize]| {
            DMatrix::from_fn(fs.len(), gs.len(), |i, j| self.frame_corr(fs[i], gs[j]))
        };
        let c_bb = corr(&block_frames, &block_frames);
        if context.is_empty() || self.params.rho == 0.0 {
            return Ok((mu_b, c_bb));
        }
        let ctx_frames: Vec<usize> = context.iter().map(|(f, _)| *f).collect();
        let c_cc = corr(&ctx_frames, &ctx_frames);
        let c_bc = corr(&block_frames, &ctx_frames);
        let chol = c_cc
            .cholesky()
            .ok_or_else(|| Error::Config("context correlation not SPD".into()))?;
        // K = C_bc C_cc^-1
        let k = chol.solve(&c_bc.transpose()).transpose();
        let p = &c_bb - &k * c_bc.transpose();
        let mut resid = Frames::zeros(context.len(), self.params.dim);
        for (r, (f, row)) in context.iter().enumerate() {
            let m = self.mean_frame(c, *f);
            for ((o, x), mm) in resid.row_mut(r).iter_mut().zip(row.iter()).zip(&m) {
                *o = x - mm;
            }
        }
        Ok((mu_b.add(&apply_frame_op(&k, &resid)), p))
    }

    /// Posterior mean of a block given its noisy version and a Gaussian prior
    /// `N(mean, P ⊗ base_var I)`.
    pub fn block_posterior_x0(
        &self,
        x_t: &Frames,
        t: f64,
        prior_mean: &Frames,
        prior_corr: &DMatrix<f64>,
        sched: &NoiseSchedule,
    ) -> Frames {
        let alpha = sched.alpha(t);
        if alpha <= 0.0 {
            return prior_mean.clone();
        }
        let sigma = sched.sigma(t);
        let bv = self.params.base_var;
        let n = prior_corr.nrows();
        let cov = prior_corr * bv;
        let marg = &cov * (alpha * alpha) + DMatrix::identity(n, n) * (sigma * sigma);
        let op = match marg.clone().cholesky() {
            Some(ch) => (ch.solve(&cov) * alpha).transpose(),
            // sigma = 0 with a singular prior: fall back to the pseudo-inverse.
            None => {
                let pinv = marg
                    .pseudo_inverse(1e-12)
                    .unwrap_or_else(|_| DMatrix::zeros(n, n));
                &cov * pinv * alpha
            }
        };
        let resid = x_t.lincomb(1.0, prior_mean, -alpha);
        prior_mean.add(&apply_frame_op(&op, &resid))
    }

    /// Exact draw from `N(μ_c, Σ)`.
    pub fn sample_world(&self, c: &MultimodalCondition, noise: &mut dyn NoiseSource) -> Result<LatentVideo> {
        let mu = self.mean(c)?;
        let (n, d) = (self.params.frames, self.params.dim);
        if self.params.base_var == 0.0 {
            return LatentVideo::new(mu, self.params.block_size);
        }
        let l = ar1_corr(n, self.params.rho)
            .cholesky()
            .ok_or_else(|| Error::Config("AR(1) correlation not SPD".into()))?
            .l();
        let mut xi = Frames::zeros(n, d);
        noise.fill(xi.as_mut_slice());
        let shaped = apply_frame_op(&l, &xi).scale(self.params.base_var.sqrt());
        LatentVideo::new(mu.add(&shaped), self.params.block_size)
    }
}
