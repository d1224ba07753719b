//! Gradient-descent optimizers: Adam (the default), Adagrad and RMSProp,
//! with the usual published update rules and default hyperparameters.
//!
//! Optimizers never touch gradients; zeroing them between steps is the
//! trainer's job, which keeps accumulation semantics explicit.

use thiserror::Error;

use crate::nd::{Parameter, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-8;
pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("unknown optimizer kind `{0}`")]
    UnknownKind(String),
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("non-finite gradient would poison the update of parameter `{0}`")]
    PoisonedGradient(String),
    #[error("optimizer was created for {expected} parameters, got {got}")]
    ParameterCountChanged { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adagrad,
    RmsProp,
}

impl std::str::FromStr for OptimizerKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, OptimError> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(OptimError::UnknownKind(other.to_string())),
        }
    }
}

/// Bias-corrected Adam state over one parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone)]
enum State {
    Uninit,
    Adam(AdamState),
    Adagrad { acc: Vec<Tensor> },
    RmsProp { acc: Vec<Tensor> },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    state: State,
}

/// Build an optimizer of the requested kind with default hyperparameters.
pub fn make_optimizer(kind: OptimizerKind, lr: f64) -> Result<Optimizer, OptimError> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(OptimError::BadLearningRate(lr));
    }
    Ok(Optimizer {
        kind,
        lr,
        state: State::Uninit,
    })
}

impl Optimizer {
    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    fn init_state(&mut self, params: &[&mut Parameter]) {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        self.state = match self.kind {
            OptimizerKind::Adam => State::Adam(AdamState {
                t: 0,
                m: zeros.clone(),
                v: zeros,
            }),
            OptimizerKind::Adagrad => State::Adagrad { acc: zeros },
            OptimizerKind::RmsProp => State::RmsProp { acc: zeros },
        };
    }

    /// Apply one update from the gradients currently held by `params`.
    /// Gradients are left untouched.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<(), OptimError> {
        if matches!(self.state, State::Uninit) {
            self.init_state(params);
        }
        let expected = match &self.state {
            State::Adam(s) => s.m.len(),
            State::Adagrad { acc } | State::RmsProp { acc } => acc.len(),
            State::Uninit => unreachable!(),
        };
        if params.len() != expected {
            return Err(OptimError::ParameterCountChanged {
                expected,
                got: params.len(),
            });
        }
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(OptimError::PoisonedGradient(p.name.clone()));
            }
        }
        let lr = self.lr;
        match &mut self.state {
            State::Adam(state) => {
                state.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
                for (idx, p) in params.iter_mut().enumerate() {
                    let m = &mut state.m[idx];
                    let v = &mut state.v[idx];
                    for ((mv, vv), (&g, th)) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut())
                        .zip(p.grad.data().iter().zip(p.value.data_mut()))
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * g;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *th -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
            State::Adagrad { acc } => {
                for (idx, p) in params.iter_mut().enumerate() {
                    for (av, (&g, th)) in acc[idx]
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data().iter().zip(p.value.data_mut()))
                    {
                        *av += g * g;
                        *th -= lr * g / (av.sqrt() + ADAGRAD_EPS);
                    }
                }
            }
            State::RmsProp { acc } => {
                for (idx, p) in params.iter_mut().enumerate() {
                    for (av, (&g, th)) in acc[idx]
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data().iter().zip(p.value.data_mut()))
                    {
                        *av = RMSPROP_RHO * *av + (1.0 - RMSPROP_RHO) * g * g;
                        *th -= lr * g / (av.sqrt() + RMSPROP_EPS);
                    }
                }
            }
            State::Uninit => unreachable!(),
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
/// BPTT on adversarial synthetic chains can explode; this is opt-in and off
/// by default.
pub fn clip_global_norm(params: &mut [&mut Parameter], max_norm: f64) {
    let mut total = 0.0;
    for p in params.iter() {
        total += p.grad.data().iter().map(|g| g * g).sum::<f64>();
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, values: &[f64]) -> Parameter {
        Parameter::new(name, Tensor::from_vec(values.to_vec()).unwrap())
    }

    fn set_grad(p: &mut Parameter, g: &[f64]) {
        p.grad = Tensor::from_vec(g.to_vec()).unwrap();
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Adagrad, OptimizerKind::RmsProp] {
            let mut opt = make_optimizer(kind, 0.1).unwrap();
            let mut p = param("p", &[1.0, -2.0, 3.0]);
            let before = p.value.clone();
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.value, before, "{kind:?}");
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut opt = make_optimizer(OptimizerKind::Adam, 0.0).unwrap();
        let mut p = param("p", &[1.0, -2.0]);
        set_grad(&mut p, &[5.0, -3.0]);
        let before = p.value.clone();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_adam_step_has_magnitude_close_to_lr() {
        // At t = 1 bias correction gives m_hat = g and v_hat = g^2, so the
        // update is lr * g / (|g| + eps) which is lr * sign(g) up to eps.
        let lr = 0.001;
        let mut opt = make_optimizer(OptimizerKind::Adam, lr).unwrap();
        let mut p = param("p", &[1.0, 1.0, 1.0]);
        set_grad(&mut p, &[0.5, -2.0, 10.0]);
        opt.step(&mut [&mut p]).unwrap();
        for (i, sign) in [1.0, -1.0, 1.0].iter().enumerate() {
            let delta = p.value.data()[i] - 1.0;
            assert!((delta + sign * lr).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn rmsprop_step_opposes_gradient_sign() {
        let mut opt = make_optimizer(OptimizerKind::RmsProp, 0.01).unwrap();
        let mut p = param("p", &[0.0, 0.0]);
        set_grad(&mut p, &[3.0, -0.25]);
        opt.step(&mut [&mut p]).unwrap();
        assert!(p.value.data()[0] < 0.0);
        assert!(p.value.data()[1] > 0.0);
    }

    #[test]
    fn all_three_descend_the_quadratic_monotonically() {
        // f(theta) = 0.5 * |theta|^2 from (1, 1), lr = 0.01, 100 steps.
        for kind in [OptimizerKind::Adam, OptimizerKind::Adagrad, OptimizerKind::RmsProp] {
            let mut opt = make_optimizer(kind, 0.01).unwrap();
            let mut p = param("theta", &[1.0, 1.0]);
            let mut prev = 1.0;
            for step in 0..100 {
                let g: Vec<f64> = p.value.data().to_vec();
                set_grad(&mut p, &g);
                opt.step(&mut [&mut p]).unwrap();
                let f = 0.5 * p.value.data().iter().map(|v| v * v).sum::<f64>();
                assert!(f < prev, "{kind:?} rose to {f} from {prev} at step {step}");
                prev = f;
            }
        }
    }

    #[test]
    fn adam_long_run_loss_strictly_below_initial() {
        let mut opt = make_optimizer(OptimizerKind::Adam, 1e-3).unwrap();
        let mut p = param("theta", &[1.0, -0.5, 2.0]);
        let f0 = 0.5 * p.value.data().iter().map(|v| v * v).sum::<f64>();
        for _ in 0..200 {
            let g: Vec<f64> = p.value.data().to_vec();
            set_grad(&mut p, &g);
            opt.step(&mut [&mut p]).unwrap();
        }
        let f = 0.5 * p.value.data().iter().map(|v| v * v).sum::<f64>();
        assert!(f < f0);
    }

    #[test]
    fn adam_update_magnitude_bounded_after_warmup() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let lr = 0.01;
        let mut opt = make_optimizer(OptimizerKind::Adam, lr).unwrap();
        let mut p = param("p", &vec![0.0; 8]);
        for t in 0..200 {
            let g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let before = p.value.clone();
            set_grad(&mut p, &g);
            opt.step(&mut [&mut p]).unwrap();
            if t > 10 {
                for (a, b) in p.value.data().iter().zip(before.data()) {
                    assert!((a - b).abs() <= lr * 1.1, "step {} moved {}", t, (a - b).abs());
                }
            }
        }
    }

    #[test]
    fn nan_gradient_is_reported_with_parameter_name() {
        let mut opt = make_optimizer(OptimizerKind::Adam, 0.01).unwrap();
        let mut p = param("encoder.w_i", &[1.0]);
        set_grad(&mut p, &[f64::NAN]);
        let err = opt.step(&mut [&mut p]).unwrap_err();
        assert_eq!(
            err,
            OptimError::PoisonedGradient("encoder.w_i".to_string())
        );
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let err = "nadam".parse::<OptimizerKind>().unwrap_err();
        assert!(matches!(err, OptimError::UnknownKind(_)));
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut opt = make_optimizer(OptimizerKind::Adam, 0.005).unwrap();
            let mut p = param("p", &[0.3, -0.7]);
            for step in 0..50 {
                let g: Vec<f64> = p
                    .value
                    .data()
                    .iter()
                    .map(|v| v.sin() + step as f64 * 0.01)
                    .collect();
                set_grad(&mut p, &g);
                opt.step(&mut [&mut p]).unwrap();
            }
            p.value
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut p = param("p", &[0.0, 0.0]);
        set_grad(&mut p, &[3.0, 4.0]);
        clip_global_norm(&mut [&mut p], 1.0);
        let norm: f64 = p.grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
