//! Dense frame-major latent storage.
//!
//! A [`Frames`] value is a `rows × dim` row-major matrix where each row is one
//! latent frame. Blocks and whole videos share the representation;
//! [`LatentVideo`] adds the block partition on top.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frames {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Frames {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(
                format!("{rows}x{dim} = {} values", rows * dim),
                data.len(),
            ));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_fn(rows: usize, dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            for c in 0..dim {
                data.push(f(r, c));
            }
        }
        Self { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.dim + c] = v;
    }

    /// Copy of rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Frames {
        Frames {
            rows: len,
            dim: self.dim,
            data: self.data[start * self.dim..(start + len) * self.dim].to_vec(),
        }
    }

    pub fn write_rows(&mut self, start: usize, src: &Frames) {
        debug_assert_eq!(src.dim, self.dim);
        let off = start * self.dim;
        self.data[off..off + src.data.len()].copy_from_slice(&src.data);
    }

    pub fn check_same_shape(&self, other: &Frames) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.rows, self.dim),
                format!("{}x{}", other.rows, other.dim),
            ));
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Frames, b: f64) -> Frames {
        debug_assert_eq!(self.shape(), other.shape());
        Frames {
            rows: self.rows,
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Frames {
        Frames {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn sub(&self, other: &Frames) -> Frames {
        self.lincomb(1.0, other, -1.0)
    }

    pub fn add(&self, other: &Frames) -> Frames {
        self.lincomb(1.0, other, 1.0)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mean over rows, a `dim`-vector.
    pub fn row_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if self.rows == 0 {
            return out;
        }
        for r in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    pub fn max_abs_diff(&self, other: &Frames) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A latent video of `F` frames partitioned into blocks of `block_size` frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVideo {
    frames: Frames,
    block_size: usize,
}

impl LatentVideo {
    pub fn new(frames: Frames, block_size: usize) -> Result<Self> {
        if block_size == 0 || frames.rows() % block_size != 0 {
            return Err(Error::invalid(format!(
                "frame count {} is not a multiple of block size {block_size}",
                frames.rows()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("latent video".into()));
        }
        Ok(Self { frames, block_size })
    }

    pub fn frames(&self) -> &Frames {
        &self.frames
    }

    pub fn into_frames(self) -> Frames {
        self.frames
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.dim()
    }

    pub fn num_blocks(&self) -> usize {
        self.frames.rows() / self.block_size
    }

    pub fn block(&self, j: usize) -> Frames {
        self.frames.slice_rows(j * self.block_size, self.block_size)
    }
}
