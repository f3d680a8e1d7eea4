use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::world::GaussianWorld;
use crate::error::{Error, Result};
use crate::tensor::Frames;

/// Teacher ODE trajectory from pure noise (`states[0]`, t = 1) to the clean
/// endpoint (`states[N]`, t = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Frames>,
    pub condition: MultimodalCondition,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    /// State at teacher grid index `g` (time `g / N`).
    pub fn at_grid(&self, g: usize) -> &Frames {
        &self.states[self.n_steps() - g]
    }

    pub fn endpoint(&self) -> &Frames {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Integrate the probability-flow ODE with the exact teacher from `z` at t = 1
/// down the schedule's grid.
pub fn teacher_ode_rollout(
    world: &GaussianWorld,
    c: &MultimodalCondition,
    sched: &NoiseSchedule,
    z: Frames,
) -> Result<Trajectory> {
    if z.shape() != (world.frames(), world.dim()) {
        return Err(Error::shape(
            format!("{}x{}", world.frames(), world.dim()),
            format!("{}x{}", z.rows(), z.dim()),
        ));
    }
    let n = sched.n_steps();
    let mut states = Vec::with_capacity(n + 1);
    states.push(z);
    for g in (1..=n).rev() {
        let t = sched.time(g);
        let t_next = sched.time(g - 1);
        let x = states.last().expect("non-empty");
        let x0 = world.teacher_x0(x, t, c, sched)?.x0;
        let next = if t_next == 0.0 {
            x0
        } else {
            sched.ode_step(x, &x0, t, t_next)
        };
        states.push(next);
    }
    Ok(Trajectory {
        states,
        condition: c.clone(),
    })
}
