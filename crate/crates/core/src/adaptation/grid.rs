use crate::error::{Error, Result};

/// Ascending batch-norm mixing coefficients, one ensemble member each.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaGrid {
    step: Option<f64>,
    values: Vec<f64>,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self::new(0.2).expect("0.2 is a valid step")
    }
}

impl LambdaGrid {
    /// `{0, C, 2C, ..., 1}`. When `1/C` is an integer `n` the members are
    /// `k/n` exactly; otherwise the multiples of `C` below 1 followed by 1.
    pub fn new(step: f64) -> Result<Self> {
        if !(step > 0.0 && step <= 1.0) {
            return Err(Error::Config(format!("grid step must lie in (0, 1], got {step}")));
        }
        let inv = 1.0 / step;
        let n = inv.round();
        let values = if (inv - n).abs() < 1e-9 {
            let n = n as usize;
            (0..=n).map(|k| k as f64 / n as f64).collect()
        } else {
            let mut v: Vec<f64> = (0..)
                .map(|k| k as f64 * step)
                .take_while(|&x| x < 1.0 - 1e-9)
                .collect();
            v.push(1.0);
            v
        };
        Ok(Self {
            step: Some(step),
            values,
        })
    }

    /// Arbitrary members, e.g. `{1.0}`; must be strictly ascending in [0, 1].
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("lambda grid is empty".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("lambda values must lie in [0, 1]: {values:?}")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("lambda values must be strictly ascending: {values:?}")));
        }
        Ok(Self { step: None, values })
    }

    pub fn step(&self) -> Option<f64> {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
