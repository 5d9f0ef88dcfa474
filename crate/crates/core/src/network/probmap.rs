use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// H x W map of foreground probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height * width != values.len() || values.is_empty() {
            return Err(Error::Shape(format!(
                "prob map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn uniform(height: usize, width: usize, p: f32) -> Result<Self> {
        Self::new(height, width, vec![p; height * width])
    }

    /// Extracts sample `index` from a `[N, 1, H, W]` probability tensor.
    pub fn from_batch(t: &Tensor, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if c != 1 || index >= n {
            return Err(Error::Shape(format!(
                "cannot take map {index} from tensor {:?}",
                t.shape()
            )));
        }
        Self::new(h, w, t.data()[index * h * w..(index + 1) * h * w].to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Foreground where `p >= cutoff`.
    pub fn threshold(&self, cutoff: f32) -> Vec<bool> {
        self.values.iter().map(|&p| p >= cutoff).collect()
    }

    pub fn same_shape(&self, other: &ProbMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}
