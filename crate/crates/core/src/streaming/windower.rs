//! Overlapped audio windows over a push-based frame stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub frames_per_block: usize,
    pub pre_context: usize,
    pub look_ahead: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            frames_per_block: 3,
            pre_context: 3,
            look_ahead: 3,
        }
    }
}

/// Audio visible to one block.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    pub block_index: usize,
    /// Stream position of `frames[0]`; negative at the left edge.
    pub start: isize,
    pub frames: Vec<f64>,
    /// How many leading zeros stand in for frames before the stream start.
    pub left_pad: usize,
}

impl AudioWindow {
    pub fn end(&self) -> isize {
        self.start + self.frames.len() as isize
    }

    /// Value at stream frame `f`, if the window covers it.
    pub fn at(&self, f: usize) -> Option<f64> {
        let off = f as isize - self.start;
        if off < 0 {
            return None;
        }
        self.frames.get(off as usize).copied()
    }
}

#[derive(Debug, Clone)]
pub struct AudioWindower {
    spec: WindowSpec,
    buffer: Vec<f64>,
    ended: bool,
}

impl AudioWindower {
    pub fn new(spec: WindowSpec) -> Result<Self> {
        if spec.frames_per_block == 0 {
            return Err(Error::invalid("frames_per_block must be positive"));
        }
        Ok(Self {
            spec,
            buffer: Vec::new(),
            ended: false,
        })
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    pub fn push(&mut self, frame: f64) -> Result<()> {
        if self.ended {
            return Err(Error::invalid("audio frame pushed after end of stream"));
        }
        self.buffer.push(frame);
        Ok(())
    }

    pub fn push_slice(&mut self, frames: &[f64]) -> Result<()> {
        frames.iter().try_for_each(|&f| self.push(f))
    }

    pub fn end_stream(&mut self) {
        self.ended = true;
    }

    pub fn arrived(&self) -> usize {
        self.buffer.len()
    }

    pub fn ended(&self) -> bool {
        self.ended
    }

    /// Frames that must have arrived before block `j` is ready.
    pub fn required_frames(&self, j: usize) -> usize {
        (j + 1) * self.spec.frames_per_block + self.spec.look_ahead
    }

    pub fn is_ready(&self, j: usize) -> bool {
        self.ended || self.buffer.len() >= self.required_frames(j)
    }

    /// Blocks the stream can produce; only final once the stream ended.
    pub fn complete_blocks(&self) -> usize {
        self.buffer.len() / self.spec.frames_per_block
    }

    pub fn window(&self, j: usize) -> Option<AudioWindow> {
        if !self.is_ready(j) {
            return None;
        }
        let b = self.spec.frames_per_block;
        let start = (j * b) as isize - self.spec.pre_context as isize;
        let end = self.required_frames(j).min(self.buffer.len());
        let left_pad = (-start).max(0) as usize;
        let mut frames = vec![0.0; left_pad];
        let from = start.max(0) as usize;
        if from < end {
            frames.extend_from_slice(&self.buffer[from..end]);
        }
        Some(AudioWindow {
            block_index: j,
            start,
            frames,
            left_pad,
        })
    }
}

pub fn window_audio(w: &AudioWindower, block_index: usize) -> Option<AudioWindow> {
    w.window(block_index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn windower(n: usize) -> AudioWindower {
        let mut w = AudioWindower::new(WindowSpec::default()).unwrap();
        w.push_slice(&(0..n).map(|i| i as f64 + 1.0).collect::<Vec<_>>())
            .unwrap();
        w
    }

    #[test]
    fn first_block_is_left_padded() {
        let w = windower(6);
        let win = window_audio(&w, 0).unwrap();
        assert_eq!(win.start, -3);
        assert_eq!(win.end(), 6);
        assert_eq!(win.left_pad, 3);
        assert_eq!(win.frames, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn waits_for_look_ahead() {
        let w = windower(7);
        assert!(window_audio(&w, 1).is_none());
        let w = windower(9);
        let win = window_audio(&w, 1).unwrap();
        assert_eq!((win.start, win.end()), (0, 9));
    }

    #[test]
    fn end_of_stream_truncates() {
        let mut w = windower(12);
        assert!(!w.is_ready(3));
        w.end_stream();
        let win = window_audio(&w, 3).unwrap();
        assert_eq!((win.start, win.end()), (6, 12));
        assert_eq!(win.at(11), Some(12.0));
        assert_eq!(win.at(12), None);
        assert!(w.push(0.0).is_err());
    }
}
