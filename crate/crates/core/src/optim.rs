//! Adam with coupled weight decay and the warmup learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning-rate warmup: the multiplier ramps linearly from `gamma` at
/// iteration 0 to 1 at `warmup_iters` and stays there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub base_lr: f32,
    pub gamma: f32,
    pub warmup_iters: usize,
}

impl WarmupSchedule {
    /// Standard schedule for a dataset of `dataset_len` samples:
    /// `warmup_iters = min(1000, dataset_len - 1)`, floored at 1.
    pub fn for_dataset(base_lr: f32, dataset_len: usize) -> Self {
        WarmupSchedule {
            base_lr,
            gamma: 0.001,
            warmup_iters: dataset_len.saturating_sub(1).clamp(1, 1000),
        }
    }

    /// `gamma * (1 - alpha) + alpha` with `alpha = x / warmup_iters` during
    /// warmup; exactly 1 from `warmup_iters` on.
    pub fn multiplier(&self, x: usize) -> f32 {
        if x >= self.warmup_iters {
            return 1.0;
        }
        let alpha = x as f32 / self.warmup_iters as f32;
        self.gamma * (1.0 - alpha) + alpha
    }

    pub fn lr(&self, x: usize) -> f32 {
        self.base_lr * self.multiplier(x)
    }
}

/// Adam hyperparameters; weight decay is coupled (added to the gradient
/// before the moment updates, equivalent to an L2 penalty of
/// `wd/2 * ||theta||^2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

/// First/second moment estimates per parameter plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor<f32>)]) -> Self {
        AdamState {
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update over all parameters. Each parameter's gradient must have
/// been stored on the tensor (`set_grad`); non-finite gradients abort the
/// step naming the offending parameter.
pub fn adam_step(
    params: &mut [(String, Tensor<f32>)],
    state: &mut AdamState,
    lr_t: f32,
    cfg: &AdamConfig,
) -> Result<()> {
    if lr_t <= 0.0 || !lr_t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive and finite, got {lr_t}"
        )));
    }
    if state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    // Validate every gradient before mutating anything.
    for (name, p) in params.iter() {
        let grad = p.grad().ok_or_else(|| {
            Error::InvalidArgument(format!("parameter {name} has no gradient"))
        })?;
        if grad.len() != p.numel() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: format!("{} elements for {name}", p.numel()),
                actual: format!("{}", grad.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
    let inv_bc1 = (1.0 / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;

    for (i, (_, p)) in params.iter_mut().enumerate() {
        let grad = p.grad().expect("validated above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad[j] + cfg.weight_decay * data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] * inv_bc1;
            let v_hat = v[j] * inv_bc2;
            data[j] -= lr_t * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.clear_grad();
    }
    Ok(())
}

/// The explicit L2 penalty value the coupled decay corresponds to,
/// `wd/2 * sum ||theta||^2`; logged per epoch for visibility.
pub fn l2_penalty(params: &[(String, Tensor<f32>)], weight_decay: f32) -> f64 {
    let sq: f64 = params
        .iter()
        .flat_map(|(_, p)| p.data().iter())
        .map(|&w| (w as f64) * (w as f64))
        .sum();
    0.5 * weight_decay as f64 * sq
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, data: Vec<f32>) -> (String, Tensor<f32>) {
        let n = data.len();
        (name.to_string(), Tensor::new(vec![n], data).unwrap())
    }

    #[test]
    fn warmup_boundary_values() {
        let s = WarmupSchedule::for_dataset(1e-3, 5000);
        assert_eq!(s.warmup_iters, 1000);
        assert_eq!(s.multiplier(0), 0.001);
        assert_eq!(s.multiplier(1000), 1.0);
        assert_eq!(s.multiplier(5000), 1.0);
        let mid = s.multiplier(500);
        assert!((mid - 0.5005).abs() < 1e-6, "multiplier(500) = {mid}");
    }

    #[test]
    fn warmup_uses_dataset_length() {
        assert_eq!(WarmupSchedule::for_dataset(1e-3, 500).warmup_iters, 499);
        assert_eq!(WarmupSchedule::for_dataset(1e-3, 2).warmup_iters, 1);
        assert_eq!(WarmupSchedule::for_dataset(1e-3, 1).warmup_iters, 1);
        assert_eq!(WarmupSchedule::for_dataset(1e-3, 0).warmup_iters, 1);
    }

    #[test]
    fn warmup_is_monotone_and_continuous() {
        let s = WarmupSchedule::for_dataset(1e-3, 5000);
        let mut prev = 0.0f32;
        for x in 0..=1100 {
            let m = s.multiplier(x);
            assert!(m >= prev, "multiplier decreased at {x}");
            prev = m;
        }
        assert_eq!(s.multiplier(999) <= 1.0, true);
        assert_eq!(s.multiplier(1000), 1.0);
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut params = vec![param("p", vec![1.5, -0.5])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            params[0].1.set_grad(vec![0.0, 0.0]);
            adam_step(&mut params, &mut state, 0.1, &cfg).unwrap();
        }
        assert_eq!(params[0].1.data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes the first update lr * g / (|g| + eps).
        let mut params = vec![param("p", vec![1.0])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        params[0].1.set_grad(vec![1.0]);
        adam_step(&mut params, &mut state, 0.1, &cfg).unwrap();
        let p = params[0].1.data()[0];
        assert!((p - 0.9).abs() < 1e-6, "param after one step: {p}");
        assert_eq!(state.t, 1);
    }

    #[test]
    fn decay_only_dynamics_shrink_parameters() {
        let mut params = vec![param("p", vec![2.0, -2.0])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        let mut prev = [2.0f32, -2.0];
        for _ in 0..20 {
            params[0].1.set_grad(vec![0.0, 0.0]);
            adam_step(&mut params, &mut state, 0.01, &cfg).unwrap();
            let d = params[0].1.data();
            assert!(d[0].abs() < prev[0].abs());
            assert!(d[1].abs() < prev[1].abs());
            assert!(d[0] > 0.0 && d[1] < 0.0, "no overshoot at this lr");
            prev = [d[0], d[1]];
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = vec![param("enc0.conv1.w", vec![1.0])];
        let mut state = AdamState::new(&params);
        params[0].1.set_grad(vec![f32::NAN]);
        let err = adam_step(&mut params, &mut state, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("enc0.conv1.w"), "{err}");
        // Step aborted: parameter untouched, step counter unchanged.
        assert_eq!(params[0].1.data(), &[1.0]);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn update_is_independent_of_parameter_order() {
        let cfg = AdamConfig::default();
        let run = |order: [usize; 2]| {
            let mut params = vec![param("a", vec![1.0]), param("b", vec![-2.0])];
            let mut state = AdamState::new(&params);
            params[order[0]].1.set_grad(vec![if order[0] == 0 { 0.3 } else { -0.7 }]);
            params[order[1]].1.set_grad(vec![if order[1] == 0 { 0.3 } else { -0.7 }]);
            adam_step(&mut params, &mut state, 0.05, &cfg).unwrap();
            (params[0].1.data().to_vec(), params[1].1.data().to_vec())
        };
        assert_eq!(run([0, 1]), run([1, 0]));
    }

    #[test]
    fn l2_penalty_matches_coupled_decay() {
        let params = vec![param("a", vec![3.0]), param("b", vec![4.0])];
        let pen = l2_penalty(&params, 0.0005);
        assert!((pen - 0.5 * (0.0005f32 as f64) * 25.0).abs() < 1e-12);
    }
}
