//! Dense per-level feature maps.
//!
//! A level map is an `H x W x C` row-major block; a pyramid tensor holds one
//! block per pyramid level, aligned with the level order of a `PyramidSpec`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LevelTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, c: usize) -> usize {
        debug_assert!(i < self.height && j < self.width && c < self.channels);
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.idx(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let k = self.idx(i, j, c);
        self.data[k] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let k = self.idx(i, j, c);
        self.data[k] += v;
    }

    /// Channel slice at one spatial location.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.width + j) * self.channels;
        &self.data[k..k + self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidTensor {
    pub levels: Vec<LevelTensor>,
}

impl PyramidTensor {
    pub fn zeros_like(shapes: &[(usize, usize)], channels: usize) -> Self {
        Self {
            levels: shapes
                .iter()
                .map(|&(h, w)| LevelTensor::zeros(h, w, channels))
                .collect(),
        }
    }

    pub fn check_shape(&self, shapes: &[(usize, usize)], channels: usize, what: &str) -> Result<()> {
        if self.levels.len() != shapes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {} levels, got {}",
                shapes.len(),
                self.levels.len()
            )));
        }
        for (idx, (lvl, &(h, w))) in self.levels.iter().zip(shapes).enumerate() {
            if lvl.height != h || lvl.width != w || lvl.channels != channels {
                return Err(Error::ShapeMismatch(format!(
                    "{what}: level {idx} is {}x{}x{}, expected {h}x{w}x{channels}",
                    lvl.height, lvl.width, lvl.channels
                )));
            }
            if lvl.data.len() != h * w * channels {
                return Err(Error::ShapeMismatch(format!(
                    "{what}: level {idx} buffer length {} does not match {h}x{w}x{channels}",
                    lvl.data.len()
                )));
            }
        }
        Ok(())
    }
}
