//! Audio–motion synchronization by normalized cross-correlation over lags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Frames;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    /// Peak correlation minus the median correlation over all lags.
    pub confidence: f64,
    /// Lag of the peak: motion trails audio by `offset` frames.
    pub offset: i64,
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Largest usable offset, at most `cap`, for a clip of `frames` frames.
pub fn max_sync_offset(frames: usize, cap: usize) -> usize {
    cap.min(frames.saturating_sub(2) / 2)
}

/// Correlate `audio[t]` with `motion[t + k]` for every `k` in
/// `-max_offset..=max_offset`.
pub fn sync_metric(audio: &[f64], motion: &[f64], max_offset: usize) -> Result<SyncResult> {
    if audio.len() != motion.len() {
        return Err(Error::shape(audio.len(), motion.len()));
    }
    let n = audio.len();
    if n <= 2 * max_offset {
        return Err(Error::invalid(format!(
            "series of length {n} too short for max offset {max_offset}"
        )));
    }
    if variance(audio) == 0.0 {
        return Err(Error::ZeroVariance("audio envelope".into()));
    }
    if variance(motion) == 0.0 {
        return Err(Error::ZeroVariance("motion series".into()));
    }
    let m = max_offset as i64;
    let mut corrs = Vec::with_capacity(2 * max_offset + 1);
    for k in -m..=m {
        let (a, b) = if k >= 0 {
            let k = k as usize;
            (&audio[..n - k], &motion[k..])
        } else {
            let k = (-k) as usize;
            (&audio[k..], &motion[..n - k])
        };
        corrs.push((k, pearson(a, b)));
    }
    let mut best = corrs[0];
    for &(k, r) in &corrs[1..] {
        if r > best.1 || (r == best.1 && k.abs() < best.0.abs()) {
            best = (k, r);
        }
    }
    let mut sorted: Vec<f64> = corrs.iter().map(|c| c.1).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(SyncResult {
        confidence: best.1 - median,
        offset: best.0,
    })
}

/// `|audio[f] - audio[f-1]|` for `f >= 1`.
pub fn audio_envelope(audio: &[f64]) -> Vec<f64> {
    audio.windows(2).map(|w| (w[1] - w[0]).abs()).collect()
}

/// `‖x[f] - x[f-1]‖` for `f >= 1`.
pub fn motion_series(x: &Frames) -> Vec<f64> {
    (1..x.rows())
        .map(|f| {
            x.row(f)
                .iter()
                .zip(x.row(f - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};

    #[test]
    fn identical_series_peak_at_zero() {
        let a = gaussian_vec(&mut seeded(1), 40);
        let r = sync_metric(&a, &a, 3).unwrap();
        assert_eq!(r.offset, 0);
        assert!(r.confidence > 0.8);
    }

    #[test]
    fn constant_series_rejected() {
        let a = gaussian_vec(&mut seeded(1), 20);
        assert!(matches!(
            sync_metric(&a, &[1.0; 20], 2),
            Err(Error::ZeroVariance(_))
        ));
        assert!(matches!(
            sync_metric(&[0.0; 20], &a, 2),
            Err(Error::ZeroVariance(_))
        ));
    }

    #[test]
    fn length_checks() {
        assert!(sync_metric(&[1.0, 2.0, 3.0], &[1.0, 2.0], 1).is_err());
        assert!(sync_metric(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0], 2).is_err());
    }

    #[test]
    fn envelope_and_motion() {
        assert_eq!(audio_envelope(&[0.0, 1.0, -1.0]), vec![1.0, 2.0]);
        let x = Frames::from_vec(3, 2, vec![0.0, 0.0, 3.0, 4.0, 3.0, 4.0]).unwrap();
        assert_eq!(motion_series(&x), vec![5.0, 0.0]);
    }
}
