//! Fixed linear latent-to-pixel decoder.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Frames;

/// `pixel[f] = M latent[f]` with `M` of shape `p x d`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    latent_dim: usize,
    pixel_dim: usize,
    map: Vec<f64>,
}

impl Decoder {
    pub fn new(latent_dim: usize, pixel_dim: usize, map: Vec<f64>) -> Result<Self> {
        if map.len() != latent_dim * pixel_dim {
            return Err(Error::shape(latent_dim * pixel_dim, map.len()));
        }
        if map.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder map".into()));
        }
        Ok(Self {
            latent_dim,
            pixel_dim,
            map,
        })
    }

    pub fn identity(d: usize) -> Self {
        let mut map = vec![0.0; d * d];
        for i in 0..d {
            map[i * d + i] = 1.0;
        }
        Self {
            latent_dim: d,
            pixel_dim: d,
            map,
        }
    }

    /// Gaussian map scaled by `1/sqrt(d)`.
    pub fn random(latent_dim: usize, pixel_dim: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (latent_dim as f64).sqrt();
        let map = (0..latent_dim * pixel_dim)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            latent_dim,
            pixel_dim,
            map,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn pixel_dim(&self) -> usize {
        self.pixel_dim
    }

    pub fn map(&self) -> &[f64] {
        &self.map
    }

    pub fn decode(&self, latent: &Frames) -> Result<Frames> {
        if latent.dim() != self.latent_dim {
            return Err(Error::shape(self.latent_dim, latent.dim()));
        }
        let (d, p) = (self.latent_dim, self.pixel_dim);
        let mut out = Frames::zeros(latent.rows(), p);
        for r in 0..latent.rows() {
            let x = latent.row(r);
            for (o, m) in out.row_mut(r).iter_mut().zip(self.map.chunks_exact(d)) {
                *o = m.iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }
}

pub fn decode_block(latent: &Frames, decoder: &Decoder) -> Result<Frames> {
    decoder.decode(latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identity_and_zero() {
        let x = Frames::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.0);
        assert_eq!(decode_block(&x, &Decoder::identity(4)).unwrap(), x);
        let dec = Decoder::random(4, 7, &mut seeded(1));
        let z = decode_block(&Frames::zeros(3, 4), &dec).unwrap();
        assert_eq!(z, Frames::zeros(3, 7));
    }

    #[test]
    fn matches_explicit_product() {
        let dec = Decoder::random(3, 5, &mut seeded(2));
        let x = Frames::from_fn(2, 3, |r, c| 0.5 * r as f64 - c as f64 + 0.25);
        let y = dec.decode(&x).unwrap();
        for r in 0..2 {
            for i in 0..5 {
                let mut s = 0.0;
                for j in 0..3 {
                    s += dec.map()[i * 3 + j] * x.get(r, j);
                }
                assert!((y.get(r, i) - s).abs() < 1e-14);
            }
        }
        assert!(dec.decode(&Frames::zeros(1, 4)).is_err());
    }
}
