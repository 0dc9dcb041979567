//! Low-rank Kalman optimizer: an extended Kalman filter over the flat trainable
//! vector with a diagonal covariance, identity transition and no process noise.
//!
//! One step runs predict → forward → Jacobian → noise estimate → gain → update.
//! The only matrix ever factored is the `m×m` innovation covariance.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{diag_of_triple, is_all_finite, Cholesky, Matrix};
use crate::metrics::{cross_entropy, l1_loss};
use crate::model::Model;

/// Floor applied to posterior variances.
pub const P_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RMethod {
    /// EMA of `r·rᵀ`.
    EmaResidual,
    /// EMA of `r·rᵀ + H·diag(p)·Hᵀ`.
    EmaResidualPlusHph,
    Identity,
    /// `I·exp(−k/50)`.
    #[serde(rename = "exp_decay_50")]
    ExpDecay50,
    /// `diag(ŷ) − ŷŷᵀ`.
    CategoricalDiag,
}

impl RMethod {
    pub const ALL: [RMethod; 5] = [
        RMethod::Identity,
        RMethod::ExpDecay50,
        RMethod::CategoricalDiag,
        RMethod::EmaResidual,
        RMethod::EmaResidualPlusHph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RMethod::EmaResidual => "ema_residual",
            RMethod::EmaResidualPlusHph => "ema_residual_plus_hph",
            RMethod::Identity => "identity",
            RMethod::ExpDecay50 => "exp_decay_50",
            RMethod::CategoricalDiag => "categorical_diag",
        }
    }

    fn code(self) -> u8 {
        match self {
            RMethod::EmaResidual => 1,
            RMethod::EmaResidualPlusHph => 2,
            RMethod::Identity => 3,
            RMethod::ExpDecay50 => 4,
            RMethod::CategoricalDiag => 5,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        RMethod::ALL.into_iter().find(|m| m.code() == code)
    }
}

/// Initial variance vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum P0Init {
    Constant {
        value: f64,
    },
    /// i.i.d. `U(0, upper_bound)`, zeros resampled.
    Uniform {
        upper_bound: f64,
    },
}

impl P0Init {
    fn code(self) -> (u8, f64) {
        match self {
            P0Init::Constant { value } => (1, value),
            P0Init::Uniform { upper_bound } => (2, upper_bound),
        }
    }

    fn from_code(code: u8, value: f64) -> Option<Self> {
        match code {
            1 => Some(P0Init::Constant { value }),
            2 => Some(P0Init::Uniform { upper_bound: value }),
            _ => None,
        }
    }

    pub fn scale(self) -> f64 {
        self.code().1
    }

    pub fn with_scale(self, v: f64) -> Self {
        match self {
            P0Init::Constant { .. } => P0Init::Constant { value: v },
            P0Init::Uniform { .. } => P0Init::Uniform { upper_bound: v },
        }
    }

    pub fn sample(self, n: usize, seed: u64) -> Vec<f64> {
        match self {
            P0Init::Constant { value } => vec![value; n],
            P0Init::Uniform { upper_bound } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| loop {
                        let v = rng.random_range(0.0..upper_bound);
                        if v > 0.0 {
                            break v;
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LokoConfig {
    pub beta: f64,
    pub r_method: RMethod,
    pub p0: P0Init,
}

impl Default for LokoConfig {
    fn default() -> Self {
        LokoConfig {
            beta: 0.95,
            r_method: RMethod::EmaResidualPlusHph,
            p0: P0Init::Uniform { upper_bound: 0.2 },
        }
    }
}

impl LokoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        let s = self.p0.scale();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidConfig(format!("p0 scale must be positive, got {s}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    pub theta: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub r: Matrix,
    pub step: u64,
    pub config: LokoConfig,
}

/// Everything a step reports besides the new state.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub loss_l1: f64,
    pub loss_ce: f64,
    pub residual_norm: f64,
    pub trace_r: f64,
    pub min_p: f64,
    pub max_p: f64,
    /// Diagonal jitter the innovation-covariance factorization needed.
    pub jitter: f64,
    /// How many times `H·diag(p)·Hᵀ` was formed during the step.
    pub hph_products: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub prediction: Vec<f64>,
    pub diagnostics: StepDiagnostics,
}

/// Fresh state: `θ̃` from the model's initial parameters, `p̂` per the config, `R = 0`.
pub fn init_state(theta0: Vec<f64>, m: usize, config: LokoConfig, seed: u64) -> Result<KalmanState> {
    config.validate()?;
    if m == 0 {
        return Err(Error::InvalidConfig("output dimension must be at least 1".into()));
    }
    let p_hat = config.p0.sample(theta0.len(), seed);
    Ok(KalmanState {
        theta: theta0,
        p_hat,
        r: Matrix::zeros(m, m),
        step: 0,
        config,
    })
}

/// `H·diag(p)·Hᵀ` together with `G = H·diag(p)` (the transpose of `p • Hᵀ`).
fn weighted_gram(h: &Matrix, p: &[f64]) -> (Matrix, Matrix) {
    let (m, n) = h.shape();
    let mut g = h.clone();
    for j in 0..m {
        for (v, &pi) in g.row_mut(j).iter_mut().zip(p) {
            *v *= pi;
        }
    }
    let mut hph = Matrix::zeros(m, m);
    for a in 0..m {
        for b in 0..=a {
            let v = crate::linalg::dot(g.row(a), h.row(b));
            hph[(a, b)] = v;
            hph[(b, a)] = v;
        }
    }
    debug_assert_eq!(g.shape(), (m, n));
    (hph, g)
}

/// Column block width for the fused step; keeps an `m×BLOCK` slab in cache.
const BLOCK: usize = 512;

/// `H·diag(p)·Hᵀ` accumulated over column blocks of `H`.
fn blocked_gram(h: &Matrix, p: &[f64]) -> Matrix {
    let (m, n) = h.shape();
    let hd = h.as_slice();
    let mut out = Matrix::zeros(m, m);
    let mut scaled = vec![0.0; BLOCK];
    let mut start = 0;
    while start < n {
        let w = BLOCK.min(n - start);
        let pb = &p[start..start + w];
        for a in 0..m {
            let ha = &hd[a * n + start..a * n + start + w];
            for ((s, x), pi) in scaled.iter_mut().zip(ha).zip(pb) {
                *s = x * pi;
            }
            for b in 0..=a {
                let hb = &hd[b * n + start..b * n + start + w];
                out[(a, b)] += crate::linalg::dot(&scaled[..w], hb);
            }
        }
        start += w;
    }
    for a in 0..m {
        for b in 0..a {
            out[(b, a)] = out[(a, b)];
        }
    }
    out
}

impl KalmanState {
    pub fn n_trainable(&self) -> usize {
        self.theta.len()
    }

    pub fn output_dim(&self) -> usize {
        self.r.rows()
    }

    /// Identity transition with zero process noise: the prior is the previous posterior.
    pub fn predict(&self) -> (&[f64], &[f64]) {
        (&self.theta, &self.p_hat)
    }

    /// Updates `R` in place for the current step and returns it.
    ///
    /// `hph` must be `H·diag(p_prior)·Hᵀ` when the method needs it; passing it in
    /// lets the gain computation reuse the same product.
    pub fn estimate_r(&mut self, residual: &[f64], prediction: &[f64], hph: Option<&Matrix>) -> Result<&Matrix> {
        let m = self.output_dim();
        if residual.len() != m || prediction.len() != m {
            return Err(Error::dims(
                "estimate_r",
                format!(
                    "residual[{}] prediction[{}] for m = {m}",
                    residual.len(),
                    prediction.len()
                ),
            ));
        }
        let beta = self.config.beta;
        match self.config.r_method {
            RMethod::EmaResidual | RMethod::EmaResidualPlusHph => {
                let with_hph = self.config.r_method == RMethod::EmaResidualPlusHph;
                let hph = match (with_hph, hph) {
                    (true, Some(h)) if h.shape() == (m, m) => Some(h),
                    (true, _) => return Err(Error::dims("estimate_r", "missing H·diag(p)·Hᵀ")),
                    (false, _) => None,
                };
                for i in 0..m {
                    for j in 0..m {
                        let mut fresh = residual[i] * residual[j];
                        if let Some(h) = hph {
                            fresh += h[(i, j)];
                        }
                        self.r[(i, j)] = beta * self.r[(i, j)] + (1.0 - beta) * fresh;
                    }
                }
            }
            RMethod::Identity => self.r = Matrix::identity(m),
            RMethod::ExpDecay50 => self.r = Matrix::identity(m).scale((-(self.step as f64) / 50.0).exp()),
            RMethod::CategoricalDiag => {
                for i in 0..m {
                    for j in 0..m {
                        let d = if i == j { prediction[i] } else { 0.0 };
                        self.r[(i, j)] = d - prediction[i] * prediction[j];
                    }
                }
            }
        }
        self.r.symmetrize();
        Ok(&self.r)
    }

    /// Applies `θ̃ += K·residual` and `p̂ᵢ ← p̂ᵢ(1 − (KH)ᵢᵢ)`, floored at [`P_MIN`].
    pub fn update(&mut self, gain: &Matrix, residual: &[f64], h: &Matrix) -> Result<()> {
        let n = self.n_trainable();
        let m = self.output_dim();
        if gain.shape() != (n, m) || h.shape() != (m, n) || residual.len() != m {
            return Err(Error::dims(
                "update",
                format!("K {:?}, H {:?}, residual[{}]", gain.shape(), h.shape(), residual.len()),
            ));
        }
        let delta = gain.matvec(residual)?;
        let shrink = diag_of_triple(gain, h, &self.p_hat)?;
        for ((t, d), (p, s)) in self
            .theta
            .iter_mut()
            .zip(&delta)
            .zip(self.p_hat.iter_mut().zip(&shrink))
        {
            *t += d;
            *p = (*p - s).max(P_MIN);
        }
        self.step += 1;
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        let step = self.step;
        if !is_all_finite(&self.theta) {
            return Err(Error::NonFinite {
                what: "parameters",
                step,
            });
        }
        if !is_all_finite(&self.p_hat) {
            return Err(Error::NonFinite {
                what: "variances",
                step,
            });
        }
        if !self.r.is_finite() {
            return Err(Error::NonFinite {
                what: "noise estimate",
                step,
            });
        }
        Ok(())
    }

    /// One filter step given the prediction and Jacobian at the prior parameters.
    ///
    /// Mathematically identical to [`kalman_gain`] followed by
    /// [`KalmanState::update`], but never materializes the `ñ×m` gain: with
    /// `M = S⁻¹` (from the Cholesky factor of the `m×m` innovation covariance),
    /// `K·r = p ⊙ Hᵀ(M·r)` and `(KH)ᵢᵢ = pᵢ·hᵢᵀ M hᵢ`, evaluated in column blocks of `H`.
    pub fn step_with(&mut self, prediction: &[f64], h: &Matrix, target: &[f64]) -> Result<StepDiagnostics> {
        let m = self.output_dim();
        let n = self.n_trainable();
        if prediction.len() != m || target.len() != m || h.shape() != (m, n) {
            return Err(Error::dims(
                "step",
                format!(
                    "prediction[{}] target[{}] H {:?}",
                    prediction.len(),
                    target.len(),
                    h.shape()
                ),
            ));
        }
        let residual: Vec<f64> = target.iter().zip(prediction).map(|(y, p)| y - p).collect();
        let hph = blocked_gram(h, &self.p_hat);
        self.estimate_r(&residual, prediction, Some(&hph))?;
        let s = hph.add(&self.r)?;
        let chol = Cholesky::factor(&s)?;
        let mut inv = Matrix::identity(m);
        chol.solve_in_place(&mut inv)?;
        inv.symmetrize();
        let v = inv.matvec(&residual)?;
        self.blocked_update(h, &inv, &v);
        self.check_finite()?;
        Ok(self.diagnostics(prediction, target, &residual, chol.jitter(), 1))
    }

    fn blocked_update(&mut self, h: &Matrix, inv: &Matrix, v: &[f64]) {
        let (m, n) = h.shape();
        let hd = h.as_slice();
        let md = inv.as_slice();
        let mut mh = vec![0.0; m * BLOCK];
        let mut start = 0;
        while start < n {
            let w = BLOCK.min(n - start);
            // mh = M · H[:, block]
            mh[..m * w].iter_mut().for_each(|x| *x = 0.0);
            for a in 0..m {
                let out = &mut mh[a * w..(a + 1) * w];
                for b in 0..m {
                    let coef = md[a * m + b];
                    let hb = &hd[b * n + start..b * n + start + w];
                    for (o, x) in out.iter_mut().zip(hb) {
                        *o += coef * x;
                    }
                }
            }
            let theta = &mut self.theta[start..start + w];
            let p = &mut self.p_hat[start..start + w];
            let mut step_dir = [0.0; BLOCK];
            let mut quad = [0.0; BLOCK];
            for j in 0..m {
                let hj = &hd[j * n + start..j * n + start + w];
                let mhj = &mh[j * w..(j + 1) * w];
                let vj = v[j];
                for i in 0..w {
                    step_dir[i] += hj[i] * vj;
                    quad[i] += hj[i] * mhj[i];
                }
            }
            for i in 0..w {
                theta[i] += p[i] * step_dir[i];
                p[i] = (p[i] * (1.0 - p[i] * quad[i])).max(P_MIN);
            }
            start += w;
        }
        self.step += 1;
    }

    /// Full step: forward and Jacobian at the prior, then the filter update.
    pub fn step(&mut self, model: &Model, x: &[f64], target: &[f64]) -> Result<StepOutcome> {
        let tape = model.forward_tape(x, &self.theta)?;
        let prediction = tape.output().to_vec();
        if self.theta.is_empty() {
            let residual: Vec<f64> = target.iter().zip(&prediction).map(|(y, p)| y - p).collect();
            return Ok(StepOutcome {
                diagnostics: self.diagnostics(&prediction, target, &residual, 0.0, 0),
                prediction,
            });
        }
        let h = model.jacobian_from_tape(&tape, &self.theta)?;
        let diagnostics = self.step_with(&prediction, &h, target)?;
        Ok(StepOutcome {
            prediction,
            diagnostics,
        })
    }

    fn diagnostics(
        &self,
        pred: &[f64],
        target: &[f64],
        residual: &[f64],
        jitter: f64,
        hph_products: u32,
    ) -> StepDiagnostics {
        let (min_p, max_p) = self
            .p_hat
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            });
        StepDiagnostics {
            loss_l1: l1_loss(pred, target),
            loss_ce: cross_entropy(pred, target),
            residual_norm: residual.iter().map(|r| r * r).sum::<f64>().sqrt(),
            trace_r: self.r.trace(),
            min_p,
            max_p,
            jitter,
            hph_products,
        }
    }
}

/// `Kᵀ = S⁻¹·G` for `G = H·diag(p)`; returns the transposed gain and the jitter used.
fn gain_from_parts(s: &Matrix, mut g: Matrix) -> Result<(Matrix, f64)> {
    let chol = Cholesky::factor(s)?;
    chol.solve_in_place(&mut g)?;
    Ok((g, chol.jitter()))
}

/// `K = (p • Hᵀ)·(H(p • Hᵀ) + R)⁻¹`, shape `ñ×m`.
pub fn kalman_gain(p_prior: &[f64], h: &Matrix, r: &Matrix) -> Result<Matrix> {
    let (m, n) = h.shape();
    if p_prior.len() != n || r.shape() != (m, m) {
        return Err(Error::dims(
            "kalman_gain",
            format!("p[{}], H {:?}, R {:?}", p_prior.len(), h.shape(), r.shape()),
        ));
    }
    let (hph, g) = weighted_gram(h, p_prior);
    let s = hph.add(r)?;
    // the factored matrix is m×m whatever the parameter count
    debug_assert_eq!(s.shape(), (m, m));
    let (gain_t, _) = gain_from_parts(&s, g)?;
    Ok(gain_t.transpose())
}

/// Size of the matrix factored by [`kalman_gain`] for `m` outputs.
pub fn innovation_dim(h: &Matrix) -> usize {
    h.rows()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LOKOCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint, all integers and reals little-endian:
///
/// ```text
/// magic "LOKOCKPT" | u32 version | u64 ñ | u64 m | u64 k | f64 β
/// | u8 r_method | u8 p0 kind | f64 p0 scale | ñ f64 θ | ñ f64 p | m·m f64 R
/// ```
pub fn write_checkpoint(path: &Path, state: &KalmanState) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint(state: &KalmanState) -> Vec<u8> {
    let n = state.n_trainable();
    let m = state.output_dim();
    let mut buf = Vec::with_capacity(64 + 8 * (2 * n + m * m));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [n as u64, m as u64, state.step] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&state.config.beta.to_le_bytes());
    let (p0_code, p0_scale) = state.config.p0.code();
    buf.push(state.config.r_method.code());
    buf.push(p0_code);
    buf.extend_from_slice(&p0_scale.to_le_bytes());
    for v in state.theta.iter().chain(&state.p_hat).chain(state.r.as_slice()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn read_checkpoint(path: &Path) -> Result<KalmanState> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<KalmanState> {
    let bad = |detail: String| Error::Format {
        what: "checkpoint",
        detail,
    };
    const HEADER: usize = 8 + 4 + 24 + 8 + 2 + 8;
    if buf.len() < HEADER || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic or short header".into()));
    }
    let u64_at = |at: usize| u64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes"));
    let f64_at = |at: usize| f64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes"));
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u64_at(12) as usize;
    let m = u64_at(20) as usize;
    let step = u64_at(28);
    let beta = f64_at(36);
    let r_method = RMethod::from_code(buf[44]).ok_or_else(|| bad(format!("R method code {}", buf[44])))?;
    let p0 = P0Init::from_code(buf[45], f64_at(46)).ok_or_else(|| bad(format!("p0 code {}", buf[45])))?;
    let expected = HEADER + 8 * (2 * n + m * m);
    if buf.len() != expected {
        return Err(bad(format!("length {} but header implies {expected}", buf.len())));
    }
    let reals: Vec<f64> = buf[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let theta = reals[..n].to_vec();
    let p_hat = reals[n..2 * n].to_vec();
    let r = Matrix::from_vec(m, m, reals[2 * n..].to_vec())?;
    Ok(KalmanState {
        theta,
        p_hat,
        r,
        step,
        config: LokoConfig { beta, r_method, p0 },
    })
}
