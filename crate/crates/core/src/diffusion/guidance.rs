//! Classifier-free guidance with one scale per conditioning modality.

use serde::{Deserialize, Serialize};

use crate::diffusion::condition::{Modality, MultimodalCondition};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::world::GaussianWorld;
use crate::error::{Error, Result};
use crate::tensor::Frames;

/// `pred_null + Σ_m scale_m (pred_m - pred_null)`, in x0-space.
pub fn cfg_combine(pred_null: &Frames, preds: &[Frames], scales: &[f64]) -> Result<Frames> {
    if preds.len() != scales.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} scales",
            preds.len(),
            scales.len()
        )));
    }
    let mut out = pred_null.clone();
    for (p, &s) in preds.iter().zip(scales) {
        pred_null.check_same_shape(p)?;
        for ((o, pm), pn) in out
            .as_mut_slice()
            .iter_mut()
            .zip(p.as_slice())
            .zip(pred_null.as_slice())
        {
            *o += s * (pm - pn);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgScales {
    pub text: f64,
    pub image: f64,
    pub audio: f64,
}

impl CfgScales {
    /// No guidance: reproduces the fully conditional prediction.
    pub const UNIT: CfgScales = CfgScales {
        text: 1.0,
        image: 1.0,
        audio: 1.0,
    };

    /// Guide only the audio stream.
    pub fn audio_only(scale: f64) -> Self {
        Self {
            audio: scale,
            ..Self::UNIT
        }
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.text,
            Modality::Image => self.image,
            Modality::Audio => self.audio,
        }
    }
}

/// Teacher prediction combined across single-modality queries.
pub fn guided_teacher_x0(
    world: &GaussianWorld,
    x_t: &Frames,
    t: f64,
    c: &MultimodalCondition,
    scales: CfgScales,
    sched: &NoiseSchedule,
) -> Result<Frames> {
    let null = world.teacher_x0(x_t, t, &c.null_all(), sched)?.x0;
    let mut preds = Vec::with_capacity(3);
    let mut s = Vec::with_capacity(3);
    for m in Modality::ALL {
        if c.is_null(m) {
            continue;
        }
        preds.push(world.teacher_x0(x_t, t, &c.only(m), sched)?.x0);
        s.push(scales.get(m));
    }
    cfg_combine(&null, &preds, &s)
}
