//! Row-major grid indexing helpers.

use crate::error::{Error, Result};

/// Row-major flat <-> multi-index conversion for a fixed shape.
#[derive(Debug, Clone)]
pub struct GridIndexer {
    shape: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl GridIndexer {
    pub fn new(shape: &[usize]) -> Self {
        let mut strides = vec![1usize; shape.len()];
        for k in (0..shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        Self {
            shape: shape.to_vec(),
            strides,
            len: shape.iter().product(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ravel(&self, coord: &[usize]) -> usize {
        coord.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    pub fn unravel_into(&self, mut flat: usize, coord: &mut [usize]) {
        for (c, s) in coord.iter_mut().zip(&self.strides) {
            *c = flat / s;
            flat %= s;
        }
    }
}

/// Parses `32x32` or `16x16x16`.
pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let dims: std::result::Result<Vec<usize>, _> = s.split('x').map(|p| p.trim().parse::<usize>()).collect();
    match dims {
        Ok(d) if !d.is_empty() && !d.contains(&0) => Ok(d),
        _ => Err(Error::Config(format!("invalid grid shape '{s}' (expected e.g. 32x32)"))),
    }
}

pub fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}
