//! Full-covariance extended Kalman filter, kept deliberately separate from the
//! diagonal optimizer (it uses `nalgebra` throughout) so it can serve as a
//! reference implementation. Only suitable for small parameter counts.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, JITTER_ESCALATIONS, JITTER_FLOOR, JITTER_SCALE, PIVOT_RTOL};
use crate::model::Model;
use crate::optimizer::RMethod;

pub const DEFAULT_CAP: usize = 2000;

#[derive(Clone, Debug)]
pub struct DenseState {
    pub theta: DVector<f64>,
    pub p: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub step: u64,
}

impl DenseState {
    pub fn new(theta: Vec<f64>, p: DMatrix<f64>, m: usize, cap: usize) -> Result<Self> {
        let n = theta.len();
        if n > cap {
            return Err(Error::DenseCapExceeded { cap, requested: n });
        }
        if p.shape() != (n, n) {
            return Err(Error::dims("DenseState", format!("P {:?} for ñ = {n}", p.shape())));
        }
        Ok(DenseState {
            theta: DVector::from_vec(theta),
            p,
            r: DMatrix::zeros(m, m),
            step: 0,
        })
    }

    pub fn from_diagonal(theta: Vec<f64>, p_hat: &[f64], m: usize) -> Result<Self> {
        let p = DMatrix::from_diagonal(&DVector::from_column_slice(p_hat));
        DenseState::new(theta, p, m, DEFAULT_CAP)
    }

    pub fn theta(&self) -> Vec<f64> {
        self.theta.iter().copied().collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        self.p.diagonal().iter().copied().collect()
    }

    /// One EKF step from the prediction and Jacobian at the prior parameters.
    ///
    /// `K = PHᵀ(HPHᵀ + R)⁻¹`, `θ += K·r`, `P ← P − KHP`, then `P ← (P + Pᵀ)/2`.
    pub fn step_with(
        &mut self,
        prediction: &[f64],
        h: &Matrix,
        target: &[f64],
        r_method: RMethod,
        beta: f64,
    ) -> Result<()> {
        let (m, n) = h.shape();
        if n != self.theta.len() || prediction.len() != m || target.len() != m || self.r.nrows() != m {
            return Err(Error::dims(
                "dense_step",
                format!("H {:?} for ñ = {}", h.shape(), self.theta.len()),
            ));
        }
        let h = DMatrix::from_row_slice(m, n, h.as_slice());
        let y = DVector::from_column_slice(target);
        let yhat = DVector::from_column_slice(prediction);
        let residual = &y - &yhat;
        let pht = &self.p * h.transpose();
        let hpht = &h * &pht;
        self.r = match r_method {
            RMethod::EmaResidual => &self.r * beta + (&residual * residual.transpose()) * (1.0 - beta),
            RMethod::EmaResidualPlusHph => &self.r * beta + (&residual * residual.transpose() + &hpht) * (1.0 - beta),
            RMethod::Identity => DMatrix::identity(m, m),
            RMethod::ExpDecay50 => DMatrix::identity(m, m) * (-(self.step as f64) / 50.0).exp(),
            RMethod::CategoricalDiag => DMatrix::from_diagonal(&yhat) - &yhat * yhat.transpose(),
        };
        self.r = (&self.r + self.r.transpose()) * 0.5;
        let s = &hpht + &self.r;
        let s = (&s + s.transpose()) * 0.5;
        let inv = jittered_inverse(s)?;
        let gain = &pht * inv;
        self.theta += &gain * &residual;
        self.p -= &gain * (&h * &self.p);
        self.p = (&self.p + self.p.transpose()) * 0.5;
        self.step += 1;
        if !(self.theta.iter().all(|v| v.is_finite()) && self.p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                what: "dense state",
                step: self.step,
            });
        }
        Ok(())
    }

    pub fn step(&mut self, model: &Model, x: &[f64], target: &[f64], r_method: RMethod, beta: f64) -> Result<Vec<f64>> {
        let theta = self.theta();
        let tape = model.forward_tape(x, &theta)?;
        let pred = tape.output().to_vec();
        let h = model.jacobian_from_tape(&tape, &theta)?;
        self.step_with(&pred, &h, target, r_method, beta)?;
        Ok(pred)
    }
}

/// Inverse of an SPD matrix, adding `εI` (ε, 10ε, 100ε, 1000ε) when the plain
/// factorization fails, with the diagonal filter's pivot rule and jitter schedule.
fn jittered_inverse(s: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = s.nrows();
    let max_diag = s.diagonal().max();
    // a pivot is L_ii², rejected like the diagonal filter's factorization does
    let accept = |a: DMatrix<f64>| {
        a.cholesky().filter(|c| {
            c.l_dirty()
                .diagonal()
                .iter()
                .all(|l| (l * l).is_finite() && l * l > PIVOT_RTOL * max_diag)
        })
    };
    if let Some(c) = accept(s.clone()) {
        return Ok(c.inverse());
    }
    let eps = (JITTER_SCALE * s.trace() / m as f64).max(JITTER_FLOOR);
    for k in 0..=JITTER_ESCALATIONS {
        if let Some(c) = accept(&s + DMatrix::identity(m, m) * (eps * 10f64.powi(k as i32))) {
            return Ok(c.inverse());
        }
    }
    Err(Error::NotPositiveDefinite {
        attempts: JITTER_ESCALATIONS + 1,
    })
}

/// `‖P − diag(P)‖_F / ‖P‖_F`; zero for the zero matrix.
pub fn off_diagonal_mass(p: &DMatrix<f64>) -> f64 {
    let total = p.norm();
    if total == 0.0 {
        return 0.0;
    }
    let mut off = 0.0;
    for ((i, j), v) in p.iter().enumerate().map(|(k, v)| ((k % p.nrows(), k / p.nrows()), v)) {
        if i != j {
            off += v * v;
        }
    }
    off.sqrt() / total
}

/// Random dense SPD matrix `A·Aᵀ/ñ` with entries of `A` from `U(−1,1)`, scaled to the given trace.
pub fn random_spd(n: usize, trace: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = &a * a.transpose() / n as f64;
    let t = p.trace();
    p * (trace / t)
}

/// Writes `step,off_diagonal_mass` rows.
pub fn write_snapshots<W: Write>(out: &mut W, rows: &[(u64, f64)]) -> std::io::Result<()> {
    writeln!(out, "step,off_diagonal_mass")?;
    for (step, mass) in rows {
        writeln!(out, "{step},{mass:e}")?;
    }
    Ok(())
}
