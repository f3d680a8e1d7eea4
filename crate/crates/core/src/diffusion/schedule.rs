use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Frames;

/// Signal/noise coefficient family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha = 1 - t`, `sigma = t`.
    #[default]
    RectifiedFlow,
    /// Variance-preserving cosine: `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    Cosine,
}

/// The teacher's `N`-step time grid on `[0, 1]`.
///
/// `times[j] = j / N`, so index `N` is pure noise and index `0` is clean data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    times: Vec<f64>,
}

pub fn make_schedule(n_steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(n_steps, ScheduleKind::RectifiedFlow)
}

impl NoiseSchedule {
    pub fn new(n_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::invalid(format!("n_steps must be >= 2, got {n_steps}")));
        }
        let times = (0..=n_steps).map(|j| j as f64 / n_steps as f64).collect();
        Ok(Self { kind, times })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, index: usize) -> f64 {
        self.times[index]
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => 1.0 - t,
            ScheduleKind::Cosine => {
                if t >= 1.0 {
                    0.0
                } else {
                    (std::f64::consts::FRAC_PI_2 * t).cos()
                }
            }
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => t,
            ScheduleKind::Cosine => {
                if t >= 1.0 {
                    1.0
                } else {
                    (std::f64::consts::FRAC_PI_2 * t).sin()
                }
            }
        }
    }

    /// Deterministic move from `t` to `t_next` given a clean prediction.
    ///
    /// `x' = alpha' x0 + sigma' (x - alpha x0) / sigma`. For the rectified-flow
    /// schedule this is exactly an Euler step of the probability-flow ODE with
    /// velocity `(x - x0) / t`.
    pub fn ode_step(&self, x: &Frames, x0: &Frames, t: f64, t_next: f64) -> Frames {
        let (cx, c0) = self.ode_coeffs(t, t_next);
        x.lincomb(cx, x0, c0)
    }

    /// Coefficients `(cx, c0)` with `ode_step(x, x0) = cx x + c0 x0`.
    pub fn ode_coeffs(&self, t: f64, t_next: f64) -> (f64, f64) {
        let (a, s) = (self.alpha(t), self.sigma(t));
        let (a2, s2) = (self.alpha(t_next), self.sigma(t_next));
        let r = s2 / s;
        // alpha' x0 + r (x - alpha x0) = r x + (alpha' - r alpha) x0
        (r, a2 - r * a)
    }
}

/// `alpha(t) x0 + sigma(t) eps`.
pub fn add_noise(x0: &Frames, t: f64, eps: &Frames, sched: &NoiseSchedule) -> Result<Frames> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("noise level {t} outside [0, 1]")));
    }
    x0.check_same_shape(eps)?;
    Ok(x0.lincomb(sched.alpha(t), eps, sched.sigma(t)))
}
