//! 2-D image and label-mask containers.

use crate::error::{Error, Result};
use crate::manifest::Domain;

pub const BG: u8 = 0;
pub const LV: u8 = 1;
pub const MYO: u8 = 2;
pub const RV: u8 = 3;
pub const NUM_LABELS: u8 = 4;

/// Single-channel image with intensities in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub domain: Domain,
}

impl ImageSlice {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, domain: Domain) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!("{} pixels for a {height}x{width} image", pixels.len())));
        }
        Ok(Self { height, width, pixels, domain })
    }
}

/// Per-pixel class map over `{BG, LV, MYO, RV}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} mask", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_LABELS) {
            return Err(Error::validation("mask", format!("label {bad} outside {{0,1,2,3}}")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Binary region of pixels whose label is in `set`.
    pub fn region(&self, set: &[u8]) -> Vec<bool> {
        self.labels.iter().map(|l| set.contains(l)).collect()
    }
}
