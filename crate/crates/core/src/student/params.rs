use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step affine x0-predictor weights stored in one flat buffer.
///
/// Step `i` owns `[W_i (d×d) | V_i (d×d) | U_i (d×q) | bias_i (d)]`, all
/// row-major, where `q = 2 d_c + 1` is the width of `[c_text; c_img; audio[f]]`.
/// Optimizers, EMA and snapshots operate on [`StudentParams::as_slice`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    k: usize,
    dim: usize,
    embed_dim: usize,
    data: Vec<f64>,
}

/// Offsets of one step's blocks inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepLayout {
    pub w: usize,
    pub v: usize,
    pub u: usize,
    pub bias: usize,
    pub end: usize,
}

impl StudentParams {
    pub fn zeros(k: usize, dim: usize, embed_dim: usize) -> Self {
        let mut p = Self {
            k,
            dim,
            embed_dim,
            data: Vec::new(),
        };
        p.data = vec![0.0; k * p.step_len()];
        p
    }

    /// Gaussian init with std `scale / sqrt(fan_in)` for every matrix, zero bias.
    pub fn random(k: usize, dim: usize, embed_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(k, dim, embed_dim);
        let q = p.feature_dim();
        for i in 0..k {
            let l = p.layout(i);
            let sd = scale / (dim as f64).sqrt();
            for x in &mut p.data[l.w..l.u] {
                *x = sd * rng.sample::<f64, _>(StandardNormal);
            }
            let sq = scale / (q as f64).sqrt();
            for x in &mut p.data[l.u..l.bias] {
                *x = sq * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    pub fn from_vec(k: usize, dim: usize, embed_dim: usize, data: Vec<f64>) -> Result<Self> {
        let p = Self::zeros(k, dim, embed_dim);
        if data.len() != p.data.len() {
            return Err(Error::shape(p.data.len(), data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("student parameters".into()));
        }
        Ok(Self { data, ..p })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.embed_dim + 1
    }

    pub fn step_len(&self) -> usize {
        let d = self.dim;
        2 * d * d + d * self.feature_dim() + d
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layout(&self, step: usize) -> StepLayout {
        let d = self.dim;
        let w = step * self.step_len();
        let v = w + d * d;
        let u = v + d * d;
        let bias = u + d * self.feature_dim();
        StepLayout {
            w,
            v,
            u,
            bias,
            end: bias + d,
        }
    }

    pub fn step_range(&self, step: usize) -> Range<usize> {
        let l = self.layout(step);
        l.w..l.end
    }

    pub fn w(&self, step: usize) -> &[f64] {
        let l = self.layout(step);
        &self.data[l.w..l.v]
    }

    pub fn v(&self, step: usize) -> &[f64] {
        let l = self.layout(step);
        &self.data[l.v..l.u]
    }

    pub fn u(&self, step: usize) -> &[f64] {
        let l = self.layout(step);
        &self.data[l.u..l.bias]
    }

    pub fn bias(&self, step: usize) -> &[f64] {
        let l = self.layout(step);
        &self.data[l.bias..l.end]
    }

    pub fn w_mut(&mut self, step: usize) -> &mut [f64] {
        let l = self.layout(step);
        &mut self.data[l.w..l.v]
    }

    pub fn v_mut(&mut self, step: usize) -> &mut [f64] {
        let l = self.layout(step);
        &mut self.data[l.v..l.u]
    }

    pub fn u_mut(&mut self, step: usize) -> &mut [f64] {
        let l = self.layout(step);
        &mut self.data[l.u..l.bias]
    }

    pub fn bias_mut(&mut self, step: usize) -> &mut [f64] {
        let l = self.layout(step);
        &mut self.data[l.bias..l.end]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Set `W_i = I` for every step, leaving the rest untouched.
    pub fn set_identity_self_maps(&mut self) {
        let d = self.dim;
        for i in 0..self.k {
            let w = self.w_mut(i);
            w.iter_mut().for_each(|x| *x = 0.0);
            for r in 0..d {
                w[r * d + r] = 1.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn layout_is_contiguous() {
        let p = StudentParams::zeros(4, 8, 4);
        assert_eq!(p.step_len(), 64 + 64 + 72 + 8);
        assert_eq!(p.len(), 4 * 208);
        for i in 0..4 {
            let l = p.layout(i);
            assert_eq!(l.w, i * 208);
            assert_eq!(l.end, (i + 1) * 208);
        }
    }

    #[test]
    fn parameter_count_ignores_video_length() {
        let a = StudentParams::zeros(4, 8, 4);
        assert_eq!(a.len(), StudentParams::zeros(4, 8, 4).len());
    }

    #[test]
    fn random_init_has_zero_bias() {
        let p = StudentParams::random(2, 3, 2, 1.0, &mut seeded(1));
        assert!(p.bias(0).iter().chain(p.bias(1)).all(|&b| b == 0.0));
        assert!(p.w(1).iter().any(|&w| w != 0.0));
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(StudentParams::from_vec(1, 2, 1, vec![0.0; 3]).is_err());
        let n = StudentParams::zeros(1, 2, 1).len();
        let mut v = vec![0.0; n];
        v[0] = f64::NAN;
        assert!(StudentParams::from_vec(1, 2, 1, v).is_err());
    }
}
