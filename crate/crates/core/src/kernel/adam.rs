use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state: per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            step: 0,
            moments: sizes
                .into_iter()
                .map(|n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter. `grads[i] == None`
/// leaves parameter `i` and its moments untouched.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[Option<&[f32]>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let mo = &state.moments[i];
        if let Some(g) = g {
            if g.len() != p.len() || mo.m.len() != p.len() {
                return Err(Error::Shape(format!(
                    "adam: parameter {i} has {} elements, gradient {}",
                    p.len(),
                    g.len()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for ((p, g), mo) in params.iter_mut().zip(grads).zip(&mut state.moments) {
        let Some(g) = g else { continue };
        for ((w, &gi), (m, v)) in p.iter_mut().zip(g.iter()).zip(mo.m.iter_mut().zip(mo.v.iter_mut())) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *m as f64 / bc1;
            let v_hat = *v as f64 / bc2;
            *w -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![0.5f32, -1.5];
        let before = p.clone();
        let mut st = AdamState::new([2]);
        let zeros = vec![0.0f32; 2];
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Some(&zeros)], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude() {
        let cfg = AdamConfig::default();
        for g in [0.3f32, -2.0, 1e-3] {
            let mut p = vec![1.0f32];
            let mut st = AdamState::new([1]);
            adam_step(&mut [&mut p], &[Some(&[g])], &mut st, &cfg).unwrap();
            // m_hat = g and v_hat = g^2 after bias correction.
            let expect = -(cfg.lr as f64) * g as f64 / (g.abs() as f64 + cfg.eps as f64);
            assert!(((p[0] - 1.0) as f64 - expect).abs() < 1e-7, "g={g}");
        }
    }

    #[test]
    fn identical_inputs_evolve_identically() {
        let mut a = vec![0.2f32];
        let mut b = vec![0.2f32];
        let mut st = AdamState::new([1, 1]);
        for k in 0..5 {
            let g = [0.1 * k as f32 - 0.2];
            adam_step(&mut [&mut a, &mut b], &[Some(&g), Some(&g)], &mut st, &AdamConfig::default())
                .unwrap();
            assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0f32; 2];
        let mut st = AdamState::new([2]);
        let g = [1.0f32];
        assert!(adam_step(&mut [&mut p], &[Some(&g)], &mut st, &AdamConfig::default()).is_err());
        assert_eq!(st.step, 0);
    }
}
