//! Synthetic condition generation, quality scoring and filtering.
//!
//! Clean conditions have image embeddings with entries in `[0.5, 1.5]` and a
//! smooth audio track made of a few slow sinusoids. Degraded conditions are
//! either *dim* (image embedding scaled by 0.1) or *noisy* (heavy white noise
//! added to the audio track).

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, substream};

pub const DIM_FACTOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    pub clean_fraction: f64,
    pub dim_fraction: f64,
    pub noisy_fraction: f64,
}

impl Degradation {
    pub const CLEAN: Degradation = Degradation {
        clean_fraction: 1.0,
        dim_fraction: 0.0,
        noisy_fraction: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let f = [self.clean_fraction, self.dim_fraction, self.noisy_fraction];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "degradation fractions {f:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

impl Default for Degradation {
    fn default() -> Self {
        Self::CLEAN
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub embed_dim: usize,
    pub frames: usize,
    /// Variance of the white noise added to noisy audio tracks.
    pub noisy_audio_var: f64,
}

impl Default for ConditionSpec {
    fn default() -> Self {
        Self {
            embed_dim: 4,
            frames: 21,
            noisy_audio_var: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Clean,
    Dim,
    Noisy,
}

/// Smooth audio: three sinusoids with periods between 6 and 24 frames.
pub fn smooth_audio(rng: &mut impl Rng, frames: usize) -> Vec<f64> {
    let parts: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.3..0.7),
                rng.random_range(6.0..24.0),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    (0..frames)
        .map(|f| {
            parts
                .iter()
                .map(|(a, p, ph)| a * (TAU * f as f64 / p + ph).sin())
                .sum()
        })
        .collect()
}

pub fn clean_condition(rng: &mut impl Rng, spec: &ConditionSpec) -> MultimodalCondition {
    let text = (0..spec.embed_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let img = (0..spec.embed_dim)
        .map(|_| 1.0 + 0.5 * rng.random_range(-1.0..1.0))
        .collect();
    let audio = smooth_audio(rng, spec.frames);
    MultimodalCondition::new(text, img, audio).expect("embedding lengths agree")
}

pub fn make_dim(c: &MultimodalCondition) -> MultimodalCondition {
    let mut d = c.clone();
    d.img_emb.iter_mut().for_each(|x| *x *= DIM_FACTOR);
    d
}

pub fn make_noisy(c: &MultimodalCondition, noise_var: f64, rng: &mut impl Rng) -> MultimodalCondition {
    let mut d = c.clone();
    let sd = noise_var.sqrt();
    d.audio
        .iter_mut()
        .for_each(|x| *x += sd * rng.sample::<f64, _>(StandardNormal));
    d.audio_noise_var += noise_var;
    d
}

/// `n` conditions with the requested mix of clean, dim and noisy kinds.
///
/// Condition `i` depends only on `(seed, i)` and its kind, so the clean part
/// of a curated set and of a degraded set drawn with the same seed coincide.
pub fn generate_conditions(
    seed: u64,
    n: usize,
    spec: &ConditionSpec,
    degradation: Degradation,
) -> Result<Vec<MultimodalCondition>> {
    Ok(generate_conditions_with_kinds(seed, n, spec, degradation)?
        .into_iter()
        .map(|(c, _)| c)
        .collect())
}

pub fn generate_conditions_with_kinds(
    seed: u64,
    n: usize,
    spec: &ConditionSpec,
    degradation: Degradation,
) -> Result<Vec<(MultimodalCondition, ConditionKind)>> {
    degradation.validate()?;
    let n_dim = (n as f64 * degradation.dim_fraction).round() as usize;
    let n_noisy = ((n as f64 * degradation.noisy_fraction).round() as usize).min(n - n_dim.min(n));
    let n_dim = n_dim.min(n);
    let mut kinds = vec![ConditionKind::Clean; n - n_dim - n_noisy];
    kinds.extend(std::iter::repeat_n(ConditionKind::Dim, n_dim));
    kinds.extend(std::iter::repeat_n(ConditionKind::Noisy, n_noisy));
    kinds.shuffle(&mut substream(seed, "condition-kinds"));
    Ok(kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut rng = indexed_stream(seed, "condition", i as u64);
            let c = clean_condition(&mut rng, spec);
            let c = match kind {
                ConditionKind::Clean => c,
                ConditionKind::Dim => make_dim(&c),
                ConditionKind::Noisy => make_noisy(&c, spec.noisy_audio_var, &mut rng),
            };
            (c, kind)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionQuality {
    /// Mean of the image-embedding entries.
    pub brightness: f64,
    /// Variance of the image-embedding entries.
    pub sharpness: f64,
    /// Audio signal-to-injected-noise ratio in dB; `+∞` for clean tracks.
    pub audio_snr: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

/// The signal variance is the track variance minus the injected noise variance.
pub fn score_condition(c: &MultimodalCondition) -> ConditionQuality {
    let (brightness, sharpness) = mean_var(&c.img_emb);
    let audio_snr = if c.audio_noise_var > 0.0 {
        let (_, total) = mean_var(&c.audio);
        let signal = (total - c.audio_noise_var).max(f64::MIN_POSITIVE);
        10.0 * (signal / c.audio_noise_var).log10()
    } else {
        f64::INFINITY
    };
    ConditionQuality {
        brightness,
        sharpness,
        audio_snr,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub min_brightness: f64,
    pub min_sharpness: f64,
    pub min_snr_db: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_brightness: 0.5,
            min_sharpness: 0.0,
            min_snr_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMetric {
    Brightness,
    Sharpness,
    AudioSnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// Position in the input list.
    pub index: usize,
    pub condition: MultimodalCondition,
    pub quality: ConditionQuality,
    pub failed: Vec<QualityMetric>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<MultimodalCondition>,
    pub rejected: Vec<Rejection>,
}

pub fn failed_metrics(q: &ConditionQuality, t: &Thresholds) -> Vec<QualityMetric> {
    let mut f = Vec::new();
    if !(q.brightness >= t.min_brightness) {
        f.push(QualityMetric::Brightness);
    }
    if !(q.sharpness >= t.min_sharpness) {
        f.push(QualityMetric::Sharpness);
    }
    if !(q.audio_snr >= t.min_snr_db) {
        f.push(QualityMetric::AudioSnr);
    }
    f
}

/// Keep a condition iff every score meets its threshold. Order is preserved.
pub fn filter_conditions(list: &[MultimodalCondition], t: &Thresholds) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for (index, c) in list.iter().enumerate() {
        let quality = score_condition(c);
        let failed = failed_metrics(&quality, t);
        if failed.is_empty() {
            out.kept.push(c.clone());
        } else {
            out.rejected.push(Rejection {
                index,
                condition: c.clone(),
                quality,
                failed,
            });
        }
    }
    out
}

/// Hook for rewriting conditions before use.
pub trait Refiner {
    fn refine(&self, c: &MultimodalCondition) -> MultimodalCondition;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, c: &MultimodalCondition) -> MultimodalCondition {
        c.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_image_is_dark() {
        let c = MultimodalCondition::new(vec![1.0; 3], vec![0.0; 3], vec![0.0; 4]).unwrap();
        let q = score_condition(&c);
        assert_eq!(q.brightness, 0.0);
        assert_eq!(q.sharpness, 0.0);
        assert_eq!(q.audio_snr, f64::INFINITY);
    }

    #[test]
    fn fixture_scores() {
        let mut c = MultimodalCondition::new(
            vec![0.0; 4],
            vec![1.0, 2.0, 3.0, 6.0],
            vec![3.0, -3.0, 3.0, -3.0],
        )
        .unwrap();
        c.audio_noise_var = 0.9;
        let q = score_condition(&c);
        assert_eq!(q.brightness, 3.0);
        // deviations -2, -1, 0, 3
        assert_eq!(q.sharpness, 14.0 / 4.0);
        // total variance 9, signal 8.1, ratio 9 → 9.542 dB
        assert!((q.audio_snr - 10.0 * 9.0f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn dim_is_ten_times_darker() {
        let c = clean_condition(&mut seeded(1), &ConditionSpec::default());
        let b = score_condition(&c).brightness;
        assert!((score_condition(&make_dim(&c)).brightness - 0.1 * b).abs() < 1e-12);
    }

    #[test]
    fn invalid_fractions() {
        let bad = Degradation {
            clean_fraction: 0.5,
            dim_fraction: 0.2,
            noisy_fraction: 0.2,
        };
        assert!(generate_conditions(1, 10, &ConditionSpec::default(), bad).is_err());
    }

    #[test]
    fn kind_counts_follow_fractions() {
        let d = Degradation {
            clean_fraction: 0.4,
            dim_fraction: 0.3,
            noisy_fraction: 0.3,
        };
        let v = generate_conditions_with_kinds(3, 20, &ConditionSpec::default(), d).unwrap();
        let count = |k| v.iter().filter(|(_, kk)| *kk == k).count();
        assert_eq!(
            (
                count(ConditionKind::Clean),
                count(ConditionKind::Dim),
                count(ConditionKind::Noisy)
            ),
            (8, 6, 6)
        );
    }

    #[test]
    fn empty_filter() {
        let out = filter_conditions(&[], &Thresholds::default());
        assert!(out.kept.is_empty() && out.rejected.is_empty());
    }

    #[test]
    fn identity_refiner() {
        let c = clean_condition(&mut seeded(2), &ConditionSpec::default());
        assert_eq!(IdentityRefiner.refine(&c), c);
    }
}
