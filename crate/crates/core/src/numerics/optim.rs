//! Trainable parameters and the Adam optimizer.

use super::Tensor;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.9999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` from its current gradient.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState) {
    debug_assert_eq!(param.value.shape(), state.m.shape());
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let g = param.grad.data();
    let m = state.m.data_mut();
    for (mi, gi) in m.iter_mut().zip(g) {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
    }
    let v = state.v.data_mut();
    for (vi, gi) in v.iter_mut().zip(g) {
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
    }
    for ((p, mi), vi) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(state.m.data())
        .zip(state.v.data())
    {
        *p -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
    }
}

/// Adam over a whole parameter list.
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &[Parameter], config: AdamConfig) -> Self {
        Self {
            states: params
                .iter()
                .map(|p| AdamState::new(p.value.shape(), config))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Parameter]) {
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            adam_step(p, s);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("w", Tensor::new(vec![1], vec![v]).unwrap());
        p.grad = Tensor::new(vec![1], vec![g]).unwrap();
        p
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar_param(0.0, 1.0);
        let mut s = AdamState::new(&[1], AdamConfig::default());
        adam_step(&mut p, &mut s);
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p.value.item() - expect).abs() < 1e-18);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = scalar_param(0.75, 0.0);
        let mut s = AdamState::new(&[1], AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &mut s);
        }
        assert_eq!(p.value.item(), 0.75);
        assert_eq!(s.v.item(), 0.0);
    }

    #[test]
    fn two_steps_match_recurrence() {
        let g = 0.3;
        let mut p = scalar_param(1.0, g);
        let mut s = AdamState::new(&[1], AdamConfig::default());
        adam_step(&mut p, &mut s);
        adam_step(&mut p, &mut s);

        let (b1, b2, lr, eps) = (0.9f64, 0.9999f64, 1e-3, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.value.item() - x).abs() < 1e-12);
        assert!(s.v.data().iter().all(|&v| v >= 0.0));
    }
}
