use super::{GradientSet, TrainConfig};
use crate::model::ModelParams;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lengths: &[usize]) -> Self {
        Self {
            step: 0,
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let lengths: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(&lengths)
    }
}

/// One bias-corrected Adam update over a list of tensors.
pub fn adam_update(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    config: &TrainConfig,
) {
    assert_eq!(params.len(), grads.len(), "tensor count mismatch");
    assert_eq!(params.len(), state.first.len(), "optimizer state mismatch");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.len(), g.len(), "tensor {i} length mismatch");
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            p[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut AdamState,
    config: &TrainConfig,
) {
    let grad_tensors = grads.0.tensors();
    let mut tensors = params.tensors_mut();
    adam_update(&mut tensors, &grad_tensors, state, config);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.5, -2.0, 0.25];
        let before = p.clone();
        let mut state = AdamState::new(&[3]);
        adam_update(&mut [&mut p], &[&[0.0; 3]], &mut state, &config(1e-3));
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.7, -0.02, 1e-3] {
            let mut p = vec![0.0];
            let mut state = AdamState::new(&[1]);
            let cfg = config(1e-4);
            adam_update(&mut [&mut p], &[&[g]], &mut state, &cfg);
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((p[0] - expected).abs() < 1e-18);
            assert!((p[0] + 1e-4 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn convex_quadratic_descends() {
        // f(x) = Σ w_i (x_i − c_i)²
        let target = [3.0, -4.0, 6.0, -1.0];
        let weight = [1.0, 2.0, 0.5, 4.0];
        let f = |x: &[f64]| -> f64 {
            x.iter()
                .zip(&target)
                .zip(&weight)
                .map(|((xi, ci), wi)| wi * (xi - ci).powi(2))
                .sum()
        };
        let mut x = vec![-5.0, 5.0, -5.0, 5.0];
        let mut state = AdamState::new(&[4]);
        let cfg = config(0.05);
        let mut losses = vec![f(&x)];
        for _ in 0..100 {
            let g: Vec<f64> = x
                .iter()
                .zip(&target)
                .zip(&weight)
                .map(|((xi, ci), wi)| 2.0 * wi * (xi - ci))
                .collect();
            adam_update(&mut [&mut x], &[&g], &mut state, &cfg);
            losses.push(f(&x));
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "{} !< {}", w[1], w[0]);
        }
    }
}
