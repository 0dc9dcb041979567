//! Gradient baselines trained on the same trainable vector as the Kalman
//! optimizer: AdamW with decoupled weight decay and linear learning-rate decay,
//! and AdaGrad.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    SquaredError,
}

/// Loss gradient with respect to `θ̃` assembled from the output Jacobian `H`.
///
/// Cross-entropy: `−Σⱼ (yⱼ/ŷⱼ)·H[j,:]`. Squared error `Σ(ŷ−y)²`: `2Σⱼ(ŷⱼ−yⱼ)·H[j,:]`.
pub fn grad_from_jacobian(h: &Matrix, target: &[f64], pred: &[f64], loss: Loss) -> Result<Vec<f64>> {
    let (m, n) = h.shape();
    if target.len() != m || pred.len() != m {
        return Err(Error::dims(
            "grad_from_jacobian",
            format!("H {:?}, target[{}], pred[{}]", h.shape(), target.len(), pred.len()),
        ));
    }
    let mut g = vec![0.0; n];
    for j in 0..m {
        let w = match loss {
            Loss::CrossEntropy if target[j] == 0.0 => continue,
            Loss::CrossEntropy => -target[j] / pred[j],
            Loss::SquaredError => 2.0 * (pred[j] - target[j]),
        };
        crate::linalg::axpy(w, h.row(j), &mut g);
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m1: Vec<f64>,
    m2: Vec<f64>,
    t: u64,
    total_steps: u64,
}

impl AdamW {
    pub fn new(n: usize, config: AdamWConfig, total_steps: u64) -> Result<Self> {
        let c = &config;
        if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) || total_steps == 0 || c.lr < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "AdamW {config:?} over {total_steps} steps"
            )));
        }
        Ok(AdamW {
            config,
            m1: vec![0.0; n],
            m2: vec![0.0; n],
            t: 0,
            total_steps,
        })
    }

    /// Learning rate for the step about to run: `lr₀·(1 − t/total)`, never negative.
    pub fn current_lr(&self) -> f64 {
        let frac = self.t as f64 / self.total_steps as f64;
        self.config.lr * (1.0 - frac).max(0.0)
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m1.len() || grad.len() != theta.len() {
            return Err(Error::dims(
                "adamw_step",
                format!("theta[{}] grad[{}]", theta.len(), grad.len()),
            ));
        }
        let c = self.config;
        let lr = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m1[i] = c.beta1 * self.m1[i] + (1.0 - c.beta1) * g;
            self.m2[i] = c.beta2 * self.m2[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m1[i] / bc1;
            let v_hat = self.m2[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[i]);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaGradConfig {
    pub lr: f64,
    pub eps: f64,
}

impl Default for AdaGradConfig {
    fn default() -> Self {
        AdaGradConfig { lr: 1e-3, eps: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaGrad {
    pub config: AdaGradConfig,
    accum: Vec<f64>,
}

impl AdaGrad {
    pub fn new(n: usize, config: AdaGradConfig) -> Self {
        AdaGrad {
            config,
            accum: vec![0.0; n],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.accum.len() || grad.len() != theta.len() {
            return Err(Error::dims(
                "adagrad_step",
                format!("theta[{}] grad[{}]", theta.len(), grad.len()),
            ));
        }
        for i in 0..theta.len() {
            self.accum[i] += grad[i] * grad[i];
            theta[i] -= self.config.lr * grad[i] / (self.accum[i].sqrt() + self.config.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitScheme, ModelBuilder, ParamMode, Shape};

    #[test]
    fn perfect_prediction_zero_gradient_for_squared_error() {
        let h = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let g = grad_from_jacobian(&h, &[0.0, 1.0], &[0.0, 1.0], Loss::SquaredError).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn perfect_softmax_prediction_zero_gradient() {
        // at ŷ = y one-hot, every softmax Jacobian row is zero
        let model = ModelBuilder::new(Shape::flat(2))
            .dense(2, ParamMode::Full)
            .softmax()
            .build(InitScheme::XavierUniform, 0)
            .unwrap();
        let theta = vec![100.0, 0.0, -100.0, 0.0, 0.0, 0.0];
        let x = [1.0, 0.0];
        let tape = model.forward_tape(&x, &theta).unwrap();
        let pred = tape.output().to_vec();
        let h = model.jacobian_from_tape(&tape, &theta).unwrap();
        let g = grad_from_jacobian(&h, &[1.0, 0.0], &pred, Loss::CrossEntropy).unwrap();
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-8);
    }

    #[test]
    fn linear_squared_loss_gradient() {
        let h = Matrix::from_rows(&[&[3.0]]);
        let g = grad_from_jacobian(&h, &[1.0], &[2.5], Loss::SquaredError).unwrap();
        assert_eq!(g, vec![2.0 * 1.5 * 3.0]);
    }

    #[test]
    fn mlp_cross_entropy_gradient_matches_finite_differences() {
        let model = ModelBuilder::new(Shape::flat(4))
            .dense(5, ParamMode::Full)
            .tanh()
            .dense(3, ParamMode::Lora { rank: 2, sigma: 0.5 })
            .softmax()
            .build(InitScheme::XavierNormal, 4)
            .unwrap();
        let mut theta = model.initial_params();
        theta
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.05 * (i as f64).cos());
        let x = [0.3, -0.2, 0.9, 0.5];
        let y = [0.0, 0.0, 1.0];
        let tape = model.forward_tape(&x, &theta).unwrap();
        let h = model.jacobian_from_tape(&tape, &theta).unwrap();
        let g = grad_from_jacobian(&h, &y, tape.output(), Loss::CrossEntropy).unwrap();
        let mut g_sweep = vec![0.0; theta.len()];
        model.cross_entropy_gradient(&tape, &theta, &y, &mut g_sweep).unwrap();
        let loss = |t: &[f64]| -model.forward(&x, t).unwrap()[2].ln();
        let mut probe = theta.clone();
        for i in 0..theta.len() {
            let d = 1e-5;
            probe[i] = theta[i] + d;
            let up = loss(&probe);
            probe[i] = theta[i] - d;
            let down = loss(&probe);
            probe[i] = theta[i];
            let fd = (up - down) / (2.0 * d);
            assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{i}: {} vs {fd}", g[i]);
            assert!((g_sweep[i] - g[i]).abs() <= 1e-12 * g[i].abs().max(1.0));
        }
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let mut opt = AdamW::new(
            2,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            10,
        )
        .unwrap();
        let mut theta = vec![1.0, -2.0];
        opt.step(&mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, vec![1.0, -2.0]);
    }

    #[test]
    fn adamw_schedule_endpoint() {
        let mut opt = AdamW::new(1, AdamWConfig::default(), 4).unwrap();
        let mut theta = vec![0.0];
        for _ in 0..3 {
            opt.step(&mut theta, &[0.1]).unwrap();
        }
        assert!((opt.current_lr() - 1e-4 / 4.0).abs() < 1e-20);
    }

    #[test]
    fn adamw_three_step_hand_trace() {
        // lr₀=0.1, total=10, wd=0.01, grads 1, -2, 0.5 starting from θ=1
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut opt = AdamW::new(1, cfg, 10).unwrap();
        let mut theta = vec![1.0];
        // step 1: m=0.1, v=0.001, m̂=1, v̂=1, lr=0.1 → θ = 1 − 0.1(1/(1+1e-8) + 0.01)
        opt.step(&mut theta, &[1.0]).unwrap();
        let t1 = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((theta[0] - t1).abs() < 1e-15);
        // step 2: m=0.09−0.2=−0.11, v=0.000999+0.004=0.004999, lr=0.09
        opt.step(&mut theta, &[-2.0]).unwrap();
        let m_hat = -0.11 / (1.0 - 0.81);
        let v_hat = 0.004999 / (1.0 - 0.999f64.powi(2));
        let t2 = t1 - 0.09 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * t1);
        assert!((theta[0] - t2).abs() < 1e-14);
        // step 3: m=−0.099+0.05=−0.049, v=0.004994001+0.00025, lr=0.08
        opt.step(&mut theta, &[0.5]).unwrap();
        let m_hat = -0.049 / (1.0 - 0.729);
        let v_hat = (0.004999 * 0.999 + 0.001 * 0.25) / (1.0 - 0.999f64.powi(3));
        let t3 = t2 - 0.08 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * t2);
        assert!((theta[0] - t3).abs() < 1e-14);
    }

    #[test]
    fn adamw_without_decay_equals_plain_adam() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let grads = [[0.3, -1.0], [0.1, 0.2], [-0.5, 0.4], [0.0, 0.9]];
        let mut opt = AdamW::new(2, cfg, 4).unwrap();
        let mut theta = vec![0.5, -0.5];
        // plain Adam with the same schedule, written with the unfolded step size
        let mut reference = theta.clone();
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for (t, g) in grads.iter().enumerate() {
            opt.step(&mut theta, g).unwrap();
            let lr = 0.01 * (1.0 - t as f64 / 4.0);
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let step = (t + 1) as i32;
                reference[i] -=
                    lr * (m[i] / (1.0 - 0.9f64.powi(step))) / ((v[i] / (1.0 - 0.999f64.powi(step))).sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert!((theta[i] - reference[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn adagrad_cases() {
        let mut opt = AdaGrad::new(1, AdaGradConfig::default());
        let mut theta = vec![1.0];
        opt.step(&mut theta, &[0.0]).unwrap();
        assert_eq!(theta, vec![1.0]);
        opt.step(&mut theta, &[-3.0]).unwrap();
        assert!((theta[0] - (1.0 + 1e-3 * 3.0 / (3.0 + 1e-10))).abs() < 1e-15);

        // grads 2, 1, -2 from θ=0 with lr=0.5: accum 4, 5, 9
        let mut opt = AdaGrad::new(1, AdaGradConfig { lr: 0.5, eps: 0.0 });
        let mut theta = vec![0.0];
        for g in [2.0, 1.0, -2.0] {
            opt.step(&mut theta, &[g]).unwrap();
        }
        let want = -0.5 * 2.0 / 2.0 - 0.5 * 1.0 / 5f64.sqrt() + 0.5 * 2.0 / 3.0;
        assert!((theta[0] - want).abs() < 1e-15);
    }
}
