//! On-disk bundles: condition sets and ODE trajectory datasets as LTv1 tensors
//! plus a TOML manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditions::{failed_metrics, score_condition, ConditionKind, QualityMetric, Thresholds};
use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::ode::Trajectory;
use crate::distill::ode::ODEDataset;
use crate::error::{Error, Result};
use crate::ltv1::Tensor;
use crate::tensor::Frames;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ConditionKind>,
    pub null_text: bool,
    pub null_img: bool,
    pub null_audio: bool,
    pub audio_noise_var: f64,
    pub brightness: f64,
    pub sharpness: f64,
    pub audio_snr_db: f64,
    pub failed: Vec<QualityMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionManifest {
    pub count: usize,
    pub embed_dim: usize,
    pub frames: usize,
    pub entries: Vec<ConditionEntry>,
}

fn part(dir: &Path, name: &str, ext: &str) -> PathBuf {
    dir.join(format!("{name}.{ext}"))
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_toml<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

/// Write `<name>.{text,img,audio}.ltv1` and `<name>.toml` under `dir`.
/// All conditions must share embedding width and track length.
pub fn save_conditions(
    dir: &Path,
    name: &str,
    conds: &[MultimodalCondition],
    kinds: Option<&[ConditionKind]>,
    thresholds: &Thresholds,
) -> Result<ConditionManifest> {
    let e = conds.first().map_or(0, MultimodalCondition::embed_dim);
    let f = conds.first().map_or(0, MultimodalCondition::num_frames);
    if conds.iter().any(|c| c.embed_dim() != e || c.num_frames() != f) {
        return Err(Error::invalid("conditions in one bundle must share shapes"));
    }
    if kinds.is_some_and(|k| k.len() != conds.len()) {
        return Err(Error::shape(conds.len(), kinds.map_or(0, <[_]>::len)));
    }
    fs::create_dir_all(dir)?;
    let n = conds.len();
    let flat = |get: fn(&MultimodalCondition) -> &Vec<f64>| -> Vec<f64> {
        conds.iter().flat_map(|c| get(c).iter().copied()).collect()
    };
    Tensor::from_f64(vec![n, e], &flat(|c| &c.text_emb))?.save(part(dir, name, "text.ltv1"))?;
    Tensor::from_f64(vec![n, e], &flat(|c| &c.img_emb))?.save(part(dir, name, "img.ltv1"))?;
    Tensor::from_f64(vec![n, f], &flat(|c| &c.audio))?.save(part(dir, name, "audio.ltv1"))?;
    let entries = conds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let q = score_condition(c);
            ConditionEntry {
                index: i,
                kind: kinds.map(|k| k[i]),
                null_text: c.null_text,
                null_img: c.null_img,
                null_audio: c.null_audio,
                audio_noise_var: c.audio_noise_var,
                brightness: q.brightness,
                sharpness: q.sharpness,
                audio_snr_db: q.audio_snr,
                failed: failed_metrics(&q, thresholds),
            }
        })
        .collect();
    let manifest = ConditionManifest {
        count: n,
        embed_dim: e,
        frames: f,
        entries,
    };
    fs::write(part(dir, name, "toml"), to_toml(&manifest)?)?;
    Ok(manifest)
}

fn load_matrix(path: &Path, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let t = Tensor::load(path)?;
    if t.dims != [rows, cols] {
        return Err(Error::shape(format!("[{rows}, {cols}]"), format!("{:?}", t.dims)));
    }
    Ok(t.to_f64())
}

pub fn load_conditions(dir: &Path, name: &str) -> Result<(Vec<MultimodalCondition>, ConditionManifest)> {
    let m: ConditionManifest = from_toml(&fs::read_to_string(part(dir, name, "toml"))?)?;
    if m.entries.len() != m.count {
        return Err(Error::Format(format!(
            "manifest lists {} entries for {} conditions",
            m.entries.len(),
            m.count
        )));
    }
    let (n, e, f) = (m.count, m.embed_dim, m.frames);
    let text = load_matrix(&part(dir, name, "text.ltv1"), n, e)?;
    let img = load_matrix(&part(dir, name, "img.ltv1"), n, e)?;
    let audio = load_matrix(&part(dir, name, "audio.ltv1"), n, f)?;
    let conds = m
        .entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let mut c = MultimodalCondition::new(
                text[i * e..(i + 1) * e].to_vec(),
                img[i * e..(i + 1) * e].to_vec(),
                audio[i * f..(i + 1) * f].to_vec(),
            )?;
            c.null_text = entry.null_text;
            c.null_img = entry.null_img;
            c.null_audio = entry.null_audio;
            c.audio_noise_var = entry.audio_noise_var;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((conds, m))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub trajectories: usize,
    pub n_steps: usize,
    pub frames: usize,
    pub dim: usize,
    /// Bundle holding the condition of each trajectory, in order.
    pub conditions: String,
}

/// States as one `[n, N+1, F, d]` tensor, plus the per-trajectory conditions.
pub fn save_dataset(dir: &Path, name: &str, ds: &ODEDataset, thresholds: &Thresholds) -> Result<()> {
    let first = ds
        .trajectories
        .first()
        .ok_or_else(|| Error::invalid("empty dataset"))?;
    let (f, d) = first.states[0].shape();
    let mut data = Vec::with_capacity(ds.len() * (ds.n_steps + 1) * f * d);
    for t in &ds.trajectories {
        if t.states.len() != ds.n_steps + 1 {
            return Err(Error::shape(ds.n_steps + 1, t.states.len()));
        }
        for s in &t.states {
            data.extend_from_slice(s.as_slice());
        }
    }
    Tensor::from_f64(vec![ds.len(), ds.n_steps + 1, f, d], &data)?.save(part(dir, name, "ltv1"))?;
    let cond_name = format!("{name}.conditions");
    let conds: Vec<_> = ds.trajectories.iter().map(|t| t.condition.clone()).collect();
    save_conditions(dir, &cond_name, &conds, None, thresholds)?;
    let m = DatasetManifest {
        trajectories: ds.len(),
        n_steps: ds.n_steps,
        frames: f,
        dim: d,
        conditions: cond_name,
    };
    fs::write(part(dir, name, "toml"), to_toml(&m)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path, name: &str) -> Result<ODEDataset> {
    let m: DatasetManifest = from_toml(&fs::read_to_string(part(dir, name, "toml"))?)?;
    let t = Tensor::load(part(dir, name, "ltv1"))?;
    let dims = [m.trajectories, m.n_steps + 1, m.frames, m.dim];
    if t.dims != dims {
        return Err(Error::shape(format!("{dims:?}"), format!("{:?}", t.dims)));
    }
    let (conds, _) = load_conditions(dir, &m.conditions)?;
    if conds.len() != m.trajectories {
        return Err(Error::shape(m.trajectories, conds.len()));
    }
    let data = t.to_f64();
    let per_state = m.frames * m.dim;
    let trajectories = conds
        .into_iter()
        .enumerate()
        .map(|(i, condition)| {
            let states = (0..=m.n_steps)
                .map(|s| {
                    let at = (i * (m.n_steps + 1) + s) * per_state;
                    Frames::from_vec(m.frames, m.dim, data[at..at + per_state].to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Trajectory { states, condition })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ODEDataset {
        trajectories,
        n_steps: m.n_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{generate_conditions_with_kinds, ConditionSpec, Degradation};

    #[test]
    fn condition_bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let deg = Degradation {
            clean_fraction: 0.5,
            dim_fraction: 0.25,
            noisy_fraction: 0.25,
        };
        let (conds, kinds): (Vec<_>, Vec<_>) = generate_conditions_with_kinds(3, 8, &ConditionSpec::default(), deg)
            .unwrap()
            .into_iter()
            .unzip();
        let m = save_conditions(dir.path(), "train", &conds, Some(&kinds), &Thresholds::default()).unwrap();
        assert_eq!(m.entries.len(), 8);
        let (back, m2) = load_conditions(dir.path(), "train").unwrap();
        assert_eq!(m, m2);
        for (a, b) in conds.iter().zip(&back) {
            assert_eq!(a.audio_noise_var, b.audio_noise_var);
            for (x, y) in a.audio.iter().zip(&b.audio) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
