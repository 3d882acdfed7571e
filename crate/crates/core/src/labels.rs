//! Per-pixel label encoding shared by the data, loss and metric code.
//!
//! Inlier classes occupy `0..K`, the outlier label is `K`, and `255` marks
//! pixels that take part in no loss and no metric.

use crate::error::{Error, Result};

pub const IGNORE_LABEL: u8 = 255;

/// Largest supported number of inlier classes (the outlier label `K` must stay below 255).
pub const MAX_CLASSES: usize = 254;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    values: Vec<u8>,
}

/// Open-set recognition maps use the same encoding as ground-truth labels.
pub type OpenLabelMap = LabelMap;

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<u8>) -> Result<Self> {
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(Error::contract(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        if let Some(bad) = values.iter().find(|&&v| v != IGNORE_LABEL && v as usize > num_classes) {
            return Err(Error::contract(format!("label {bad} out of range for K={num_classes}")));
        }
        Ok(LabelMap {
            height,
            width,
            num_classes,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, label: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn outlier_label(&self) -> u8 {
        self.num_classes as u8
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        debug_assert!(label == IGNORE_LABEL || label as usize <= self.num_classes);
        self.values[y * self.width + x] = label;
    }

    pub fn is_outlier(&self, idx: usize) -> bool {
        self.values[idx] as usize == self.num_classes
    }

    pub fn count(&self, label: u8) -> usize {
        self.values.iter().filter(|&&v| v == label).count()
    }

    pub fn into_values(self) -> Vec<u8> {
        self.values
    }
}
