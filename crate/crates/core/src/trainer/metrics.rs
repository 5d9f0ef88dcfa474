use crate::error::{Error, Result};

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "dice of masks with {} and {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}
