use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Audio];
}

/// Text and image embeddings plus one scalar audio drive per latent frame.
///
/// A null modality is stored as zeros with its flag set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalCondition {
    pub text_emb: Vec<f64>,
    pub img_emb: Vec<f64>,
    pub audio: Vec<f64>,
    pub null_text: bool,
    pub null_img: bool,
    pub null_audio: bool,
    /// Variance of noise deliberately injected into `audio`, zero for clean tracks.
    #[serde(default)]
    pub audio_noise_var: f64,
}

impl MultimodalCondition {
    pub fn new(text_emb: Vec<f64>, img_emb: Vec<f64>, audio: Vec<f64>) -> Result<Self> {
        if text_emb.len() != img_emb.len() {
            return Err(Error::shape(
                format!("img_emb of length {}", text_emb.len()),
                img_emb.len(),
            ));
        }
        Ok(Self {
            text_emb,
            img_emb,
            audio,
            null_text: false,
            null_img: false,
            null_audio: false,
            audio_noise_var: 0.0,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.text_emb.len()
    }

    pub fn num_frames(&self) -> usize {
        self.audio.len()
    }

    /// Width of the per-frame condition feature `[text; img; audio[f]]`.
    pub fn feature_dim(&self) -> usize {
        2 * self.embed_dim() + 1
    }

    pub fn feature(&self, frame: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.feature_dim());
        self.write_feature(frame, &mut f);
        f
    }

    pub fn write_feature(&self, frame: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.text_emb);
        out.extend_from_slice(&self.img_emb);
        out.push(self.audio.get(frame).copied().unwrap_or(0.0));
    }

    pub fn is_null(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.null_text,
            Modality::Image => self.null_img,
            Modality::Audio => self.null_audio,
        }
    }

    /// Copy with modality `m` replaced by its null.
    pub fn without(&self, m: Modality) -> Self {
        let mut c = self.clone();
        match m {
            Modality::Text => {
                c.text_emb.iter_mut().for_each(|x| *x = 0.0);
                c.null_text = true;
            }
            Modality::Image => {
                c.img_emb.iter_mut().for_each(|x| *x = 0.0);
                c.null_img = true;
            }
            Modality::Audio => {
                c.audio.iter_mut().for_each(|x| *x = 0.0);
                c.null_audio = true;
                c.audio_noise_var = 0.0;
            }
        }
        c
    }

    /// Copy keeping only modality `m`.
    pub fn only(&self, m: Modality) -> Self {
        Modality::ALL
            .iter()
            .filter(|&&o| o != m)
            .fold(self.clone(), |c, &o| c.without(o))
    }

    pub fn null_all(&self) -> Self {
        Modality::ALL.iter().fold(self.clone(), |c, &m| c.without(m))
    }

    /// Same embeddings, audio track replaced.
    pub fn with_audio(&self, audio: Vec<f64>) -> Self {
        let mut c = self.clone();
        c.audio = audio;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond() -> MultimodalCondition {
        MultimodalCondition::new(vec![1.0, 2.0], vec![3.0, 4.0], vec![0.5, -0.5, 0.25]).unwrap()
    }

    #[test]
    fn feature_layout() {
        assert_eq!(cond().feature(1), vec![1.0, 2.0, 3.0, 4.0, -0.5]);
        assert_eq!(cond().feature_dim(), 5);
    }

    #[test]
    fn null_is_zero_with_flag() {
        let c = cond().without(Modality::Image);
        assert!(c.null_img && !c.null_text);
        assert_eq!(c.img_emb, vec![0.0, 0.0]);
        let a = cond().only(Modality::Audio);
        assert!(a.null_text && a.null_img && !a.null_audio);
        assert_eq!(a.audio, cond().audio);
        let n = cond().null_all();
        assert!(n.feature(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_embeddings_rejected() {
        assert!(MultimodalCondition::new(vec![1.0], vec![1.0, 2.0], vec![]).is_err());
    }
}
