use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet, Tensor, TensorError};

/// Step decay: the rate is multiplied by `decay` at `start_epoch` and again
/// every `interval` epochs after that. Epochs are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub interval: usize,
    pub start_epoch: usize,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            decay: 1.0,
            interval: 1,
            start_epoch: usize::MAX,
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        if epoch < self.start_epoch {
            return self.base;
        }
        let k = (epoch - self.start_epoch) / self.interval.max(1) + 1;
        self.base * self.decay.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    epoch: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, schedule: LrSchedule, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            schedule,
            first: zeros.clone(),
            second: zeros,
            step: 0,
            epoch: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn current_rate(&self) -> f64 {
        self.schedule.rate(self.epoch)
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient. Non-finite gradients reject the step
/// before anything is modified.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut OptimizerState,
    batch: usize,
) -> Result<(), TensorError> {
    for (id, g) in grads.iter() {
        if id.0 >= params.len() || g.shape() != params.get(id).shape() {
            return Err(TensorError::ShapeMismatch {
                primitive: "adam_step",
                lhs: params
                    .iter()
                    .nth(id.0)
                    .map(|(_, _, t)| t.shape().to_vec())
                    .unwrap_or_default(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient { param: id.0, batch });
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let lr = state.current_rate();
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.get(id);
        let m = state.first[id.0].data_mut();
        let v = state.second[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g.data()[j]);
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Tape};

    fn scalar_set(v: f64) -> (ParamSet, crate::tensor::ParamId) {
        let mut p = ParamSet::new();
        let id = p.push("p", Tensor::scalar(v));
        (p, id)
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = ParamSet::new();
        let id = params.push("w", Tensor::row(vec![0.3, -1.2, 4.0]));
        let before = params.clone();
        let mut state = OptimizerState::new(&params, LrSchedule::constant(0.1), AdamConfig::default());
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let z = tape.scale(vars[0], 0.0).unwrap();
        let s = tape.sum(z).unwrap();
        let g = backward(&tape, s).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[0.0, 0.0, 0.0]);
        for b in 0..50 {
            adam_step(&mut params, &g, &mut state, b).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_base_rate() {
        let (mut params, id) = scalar_set(1.0);
        let mut state = OptimizerState::new(&params, LrSchedule::constant(0.01), AdamConfig::default());
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let g = backward(&tape, vars[0]).unwrap();
        adam_step(&mut params, &g, &mut state, 0).unwrap();
        let delta = 1.0 - params.get(id).item();
        assert!((delta - 0.01).abs() < 1e-8, "{delta}");
    }

    /// Reference Adam written out longhand, independent of `adam_step`.
    fn reference_quadratic(steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * (p - 2.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn quadratic_converges_like_reference() {
        let (mut params, id) = scalar_set(0.0);
        let mut state = OptimizerState::new(&params, LrSchedule::constant(0.1), AdamConfig::default());
        for b in 0..200 {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let d = tape.offset(vars[0], -2.0).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let g = backward(&tape, sq).unwrap();
            adam_step(&mut params, &g, &mut state, b).unwrap();
        }
        let p = params.get(id).item();
        let reference = reference_quadratic(200, 0.1);
        assert!((p - 2.0).abs() < 0.05, "p = {p}");
        assert!((p - reference).abs() < 1e-12, "{p} vs {reference}");
    }

    #[test]
    fn non_finite_gradient_rejected_with_batch_id() {
        let (mut params, _) = scalar_set(1.0);
        let before = params.clone();
        let mut state = OptimizerState::new(&params, LrSchedule::constant(0.1), AdamConfig::default());
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let y = tape.scale(vars[0], 1.0).unwrap();
        let mut g = backward(&tape, y).unwrap();
        g.scale(f64::NAN);
        let err = adam_step(&mut params, &g, &mut state, 17).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { param: 0, batch: 17 });
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule {
            base: 2e-5,
            decay: 0.25,
            interval: 2,
            start_epoch: 15,
        };
        assert_eq!(s.rate(0), 2e-5);
        assert_eq!(s.rate(14), 2e-5);
        assert_eq!(s.rate(15), 2e-5 * 0.25);
        assert_eq!(s.rate(16), 2e-5 * 0.25);
        assert_eq!(s.rate(17), 2e-5 * 0.0625);
    }
}
