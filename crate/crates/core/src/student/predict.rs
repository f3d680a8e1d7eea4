use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::guidance::{cfg_combine, CfgScales};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::world::GaussianWorld;
use crate::diffusion::Modality;
use crate::error::{Error, Result};
use crate::student::params::StudentParams;
use crate::tensor::Frames;

/// Cached clean latent of a finished block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KVEntry {
    pub block_index: usize,
    pub feature: Frames,
}

/// Anything that predicts a clean block from a noisy one under causal context.
pub trait BlockPredictor {
    #[allow(clippy::too_many_arguments)]
    fn predict_block(
        &self,
        x_t: &Frames,
        step: usize,
        t: f64,
        context: &[KVEntry],
        c: &MultimodalCondition,
        block_index: usize,
    ) -> Result<Frames>;
}

pub(crate) fn check_causal(context: &[KVEntry], block_index: usize) -> Result<()> {
    match context.iter().find(|e| e.block_index >= block_index) {
        Some(e) => Err(Error::CausalityViolation {
            block: block_index,
            context_block: e.block_index,
        }),
        None => Ok(()),
    }
}

/// Mean over every frame of every context entry; zeros when empty.
pub fn pool_context(context: &[KVEntry], dim: usize) -> Vec<f64> {
    let mut pool = vec![0.0; dim];
    let mut n = 0usize;
    for e in context {
        for r in 0..e.feature.rows() {
            for (p, x) in pool.iter_mut().zip(e.feature.row(r)) {
                *p += x;
            }
            n += 1;
        }
    }
    if n > 0 {
        pool.iter_mut().for_each(|p| *p /= n as f64);
    }
    pool
}

/// `out += M x` for row-major `M` with `out.len()` rows.
pub(crate) fn matvec_acc(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Mᵀ g`.
pub(crate) fn matvec_t_acc(out: &mut [f64], m: &[f64], g: &[f64]) {
    let cols = out.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += gr * a;
        }
    }
}

/// `dm += g xᵀ`.
pub(crate) fn outer_acc(dm: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (o, xx) in dm[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *o += gr * xx;
        }
    }
}

fn check_inputs(
    p: &StudentParams,
    x_t: &Frames,
    step: usize,
    c: &MultimodalCondition,
    block_index: usize,
) -> Result<()> {
    if step >= p.k() {
        return Err(Error::invalid(format!(
            "step index {step} out of range for k = {}",
            p.k()
        )));
    }
    if x_t.dim() != p.dim() {
        return Err(Error::shape(format!("latent dim {}", p.dim()), x_t.dim()));
    }
    if c.embed_dim() != p.embed_dim() {
        return Err(Error::shape(
            format!("embedding dim {}", p.embed_dim()),
            c.embed_dim(),
        ));
    }
    let need = (block_index + 1) * x_t.rows();
    if c.num_frames() < need {
        return Err(Error::invalid(format!(
            "audio has {} frames, block {block_index} needs {need}",
            c.num_frames()
        )));
    }
    Ok(())
}

/// Forward pass with a precomputed context pool.
pub(crate) fn forward_pooled(
    p: &StudentParams,
    x_t: &Frames,
    step: usize,
    pool: &[f64],
    c: &MultimodalCondition,
    block_index: usize,
) -> Frames {
    let b = x_t.rows();
    let mut out = Frames::zeros(b, p.dim());
    let mut ctx = p.bias(step).to_vec();
    matvec_acc(&mut ctx, p.v(step), pool);
    let mut feat = Vec::with_capacity(p.feature_dim());
    for r in 0..b {
        c.write_feature(block_index * b + r, &mut feat);
        let o = out.row_mut(r);
        o.copy_from_slice(&ctx);
        matvec_acc(o, p.w(step), x_t.row(r));
        matvec_acc(o, p.u(step), &feat);
    }
    out
}

/// Accumulate parameter gradients into `grad` (same layout as `p`) and return
/// the gradient with respect to `x_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_pooled(
    p: &StudentParams,
    x_t: &Frames,
    step: usize,
    pool: &[f64],
    c: &MultimodalCondition,
    block_index: usize,
    upstream: &Frames,
    grad: &mut [f64],
) -> Frames {
    let b = x_t.rows();
    let l = p.layout(step);
    let mut dx = Frames::zeros(b, p.dim());
    let mut feat = Vec::with_capacity(p.feature_dim());
    for r in 0..b {
        let g = upstream.row(r);
        c.write_feature(block_index * b + r, &mut feat);
        outer_acc(&mut grad[l.w..l.v], g, x_t.row(r));
        outer_acc(&mut grad[l.v..l.u], g, pool);
        outer_acc(&mut grad[l.u..l.bias], g, &feat);
        for (gb, gg) in grad[l.bias..l.end].iter_mut().zip(g) {
            *gb += gg;
        }
        matvec_t_acc(dx.row_mut(r), p.w(step), g);
    }
    dx
}

/// `x̂0[f] = W_i x_t[f] + V_i pool(context) + U_i [c_text; c_img; audio[f]] + bias_i`.
pub fn student_predict_x0(
    p: &StudentParams,
    x_t: &Frames,
    step: usize,
    context: &[KVEntry],
    c: &MultimodalCondition,
    block_index: usize,
) -> Result<Frames> {
    check_inputs(p, x_t, step, c, block_index)?;
    check_causal(context, block_index)?;
    let pool = pool_context(context, p.dim());
    Ok(forward_pooled(p, x_t, step, &pool, c, block_index))
}

/// Gradients of `<upstream, student_predict_x0(...)>`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrad {
    pub params: StudentParams,
    pub input: Frames,
}

pub fn student_backward(
    p: &StudentParams,
    x_t: &Frames,
    step: usize,
    context: &[KVEntry],
    c: &MultimodalCondition,
    block_index: usize,
    upstream: &Frames,
) -> Result<StudentGrad> {
    check_inputs(p, x_t, step, c, block_index)?;
    check_causal(context, block_index)?;
    x_t.check_same_shape(upstream)?;
    let pool = pool_context(context, p.dim());
    let mut grad = StudentParams::zeros(p.k(), p.dim(), p.embed_dim());
    let input = backward_pooled(
        p,
        x_t,
        step,
        &pool,
        c,
        block_index,
        upstream,
        grad.as_mut_slice(),
    );
    Ok(StudentGrad {
        params: grad,
        input,
    })
}

impl BlockPredictor for StudentParams {
    fn predict_block(
        &self,
        x_t: &Frames,
        step: usize,
        _t: f64,
        context: &[KVEntry],
        c: &MultimodalCondition,
        block_index: usize,
    ) -> Result<Frames> {
        student_predict_x0(self, x_t, step, context, c, block_index)
    }
}

/// Exact block posterior of the world given the cached clean context.
///
/// Because the world is Gaussian, `E[x0_B | x_t,B, context]` is available in
/// closed form; wiring this into the sampler gives a perfect few-step student.
#[derive(Debug, Clone)]
pub struct OracleStudent<'a> {
    pub world: &'a GaussianWorld,
    pub sched: &'a NoiseSchedule,
    /// Guidance applied to the oracle's prediction; `UNIT` reproduces the world.
    pub cfg: CfgScales,
}

impl<'a> OracleStudent<'a> {
    pub fn new(world: &'a GaussianWorld, sched: &'a NoiseSchedule) -> Self {
        Self {
            world,
            sched,
            cfg: CfgScales::UNIT,
        }
    }

    fn posterior(
        &self,
        x_t: &Frames,
        t: f64,
        context: &[KVEntry],
        c: &MultimodalCondition,
        block_index: usize,
    ) -> Result<Frames> {
        let rows: Vec<(usize, &[f64])> = context
            .iter()
            .flat_map(|e| {
                let b = e.feature.rows();
                (0..b).map(move |r| (e.block_index * b + r, e.feature.row(r)))
            })
            .collect();
        let (mean, corr) = self.world.block_conditional(c, block_index, &rows)?;
        Ok(self
            .world
            .block_posterior_x0(x_t, t, &mean, &corr, self.sched))
    }
}

impl BlockPredictor for OracleStudent<'_> {
    fn predict_block(
        &self,
        x_t: &Frames,
        _step: usize,
        t: f64,
        context: &[KVEntry],
        c: &MultimodalCondition,
        block_index: usize,
    ) -> Result<Frames> {
        check_causal(context, block_index)?;
        if x_t.rows() != self.world.block_size() || x_t.dim() != self.world.dim() {
            return Err(Error::shape(
                format!("{}x{}", self.world.block_size(), self.world.dim()),
                format!("{}x{}", x_t.rows(), x_t.dim()),
            ));
        }
        if self.cfg == CfgScales::UNIT {
            return self.posterior(x_t, t, context, c, block_index);
        }
        let null = self.posterior(x_t, t, context, &c.null_all(), block_index)?;
        let mut preds = Vec::new();
        let mut scales = Vec::new();
        for m in Modality::ALL {
            if !c.is_null(m) {
                preds.push(self.posterior(x_t, t, context, &c.only(m), block_index)?);
                scales.push(self.cfg.get(m));
            }
        }
        cfg_combine(&null, &preds, &scales)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};

    fn cond(dc: usize, frames: usize, seed: u64) -> MultimodalCondition {
        let mut rng = seeded(seed);
        MultimodalCondition::new(
            gaussian_vec(&mut rng, dc),
            gaussian_vec(&mut rng, dc),
            gaussian_vec(&mut rng, frames),
        )
        .unwrap()
    }

    #[test]
    fn bias_only_broadcasts() {
        let mut p = StudentParams::zeros(2, 3, 2);
        p.bias_mut(1).copy_from_slice(&[1.0, -2.0, 0.5]);
        let x = Frames::from_vec(3, 3, gaussian_vec(&mut seeded(1), 9)).unwrap();
        let out = student_predict_x0(&p, &x, 1, &[], &cond(2, 9, 2), 2).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn identity_self_map_returns_input() {
        let mut p = StudentParams::zeros(1, 4, 2);
        p.set_identity_self_maps();
        let c = cond(2, 3, 5).null_all();
        let x = Frames::from_vec(3, 4, gaussian_vec(&mut seeded(3), 12)).unwrap();
        assert_eq!(student_predict_x0(&p, &x, 0, &[], &c, 0).unwrap(), x);
    }

    #[test]
    fn future_context_is_rejected() {
        let p = StudentParams::zeros(1, 2, 1);
        let ctx = [KVEntry {
            block_index: 2,
            feature: Frames::zeros(3, 2),
        }];
        let err = student_predict_x0(&p, &Frames::zeros(3, 2), 0, &ctx, &cond(1, 9, 1), 2);
        assert!(matches!(
            err,
            Err(Error::CausalityViolation {
                block: 2,
                context_block: 2
            })
        ));
    }

    #[test]
    fn step_out_of_range() {
        let p = StudentParams::zeros(2, 2, 1);
        assert!(student_predict_x0(&p, &Frames::zeros(3, 2), 2, &[], &cond(1, 3, 1), 0).is_err());
    }

    #[test]
    fn pool_is_frame_mean() {
        let ctx = [
            KVEntry {
                block_index: 0,
                feature: Frames::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
            },
            KVEntry {
                block_index: 1,
                feature: Frames::from_vec(2, 1, vec![3.0, 6.0]).unwrap(),
            },
        ];
        assert_eq!(pool_context(&ctx, 1), vec![3.0]);
        assert_eq!(pool_context(&[], 2), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = StudentParams::random(2, 3, 2, 1.0, &mut seeded(4));
        let x = Frames::from_vec(3, 3, gaussian_vec(&mut seeded(5), 9)).unwrap();
        let g = student_backward(&p, &x, 1, &[], &cond(2, 3, 6), 0, &Frames::zeros(3, 3)).unwrap();
        assert!(g.params.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_column_sum() {
        let p = StudentParams::random(1, 3, 1, 1.0, &mut seeded(7));
        let x = Frames::from_vec(3, 3, gaussian_vec(&mut seeded(8), 9)).unwrap();
        let up = Frames::from_vec(3, 3, gaussian_vec(&mut seeded(9), 9)).unwrap();
        let g = student_backward(&p, &x, 0, &[], &cond(1, 3, 10), 0, &up).unwrap();
        for k in 0..3 {
            let s: f64 = (0..3).map(|r| up.get(r, k)).sum();
            assert!((g.params.bias(0)[k] - s).abs() < 1e-14);
        }
    }
}
