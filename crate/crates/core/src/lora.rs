//! Low-rank adapters around frozen weight matrices.
//!
//! An adapter holds `W₀ ∈ R^{d×q}` fixed and trains `A ∈ R^{r×q}`, `B ∈ R^{d×r}`,
//! so the layer computes `z = W₀x + B(Ax)`. `A` starts Gaussian and `B` starts at
//! zero, so a freshly wrapped layer reproduces the frozen one exactly.
//!
//! Flat layout inside the trainable vector: `A` row-major, then `B` row-major.
//! This ordering is part of the checkpoint format and must not change.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_SIGMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub w0: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
    pub sigma: f64,
}

/// A 4-axis convolution kernel `[out_ch, in_ch, kh, kw]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(out_ch: usize, in_ch: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != out_ch * in_ch * kh * kw {
            return Err(Error::dims(
                "ConvKernel::new",
                format!("{} entries for [{out_ch},{in_ch},{kh},{kw}]", data.len()),
            ));
        }
        Ok(ConvKernel {
            out_ch,
            in_ch,
            kh,
            kw,
            data,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// The `out_ch × (in_ch·kh·kw)` matrix view used by im2col convolution.
    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_vec(self.out_ch, self.patch_len(), self.data.clone())
            .expect("kernel length checked at construction")
    }
}

/// Draws `count` i.i.d. `N(0, σ²)` values from a seeded stream.
pub fn gaussian_vec(count: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated by caller");
    (0..count).map(|_| normal.sample(&mut rng)).collect()
}

impl LoraAdapter {
    pub fn wrap(w0: Matrix, rank: usize, sigma: f64, seed: u64) -> Result<Self> {
        let (d, q) = w0.shape();
        let max = d.min(q);
        if rank == 0 || rank > max {
            return Err(Error::RankOutOfRange { rank, max });
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "LoRA sigma must be positive, got {sigma}"
            )));
        }
        let a = Matrix::from_vec(rank, q, gaussian_vec(rank * q, sigma, seed))?;
        let b = Matrix::zeros(d, rank);
        Ok(LoraAdapter { w0, a, b, rank, sigma })
    }

    /// Wraps a convolution kernel through its `out_ch × (in_ch·kh·kw)` flattening.
    pub fn conv_wrap(kernel: &ConvKernel, rank: usize, sigma: f64, seed: u64) -> Result<Self> {
        LoraAdapter::wrap(kernel.as_matrix(), rank, sigma, seed)
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn trainable_count(&self) -> usize {
        self.rank * (self.out_dim() + self.in_dim())
    }

    /// `W₀x + B(Ax)` via two small products; `B·A` is never formed.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::dims(
                "LoraAdapter::apply",
                format!("input length {} for q = {}", x.len(), self.in_dim()),
            ));
        }
        let mut z = self.w0.matvec(x)?;
        let ax = self.a.matvec(x)?;
        let bax = self.b.matvec(&ax)?;
        for (zi, v) in z.iter_mut().zip(bax) {
            *zi += v;
        }
        Ok(z)
    }

    /// Appends `A` then `B` (both row-major) to `out`.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.b.as_slice());
    }

    /// Replaces `A` and `B` from a flat slice in the [`write_flat`](Self::write_flat) layout.
    pub fn read_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::dims(
                "LoraAdapter::read_flat",
                format!("{} values for {} trainable", flat.len(), self.trainable_count()),
            ));
        }
        let na = self.a.as_slice().len();
        self.a.as_mut_slice().copy_from_slice(&flat[..na]);
        self.b.as_mut_slice().copy_from_slice(&flat[na..]);
        Ok(())
    }

    /// Dense `W₀ + B·A`. Only used for merging into exported weights and by tests.
    pub fn merged(&self) -> Matrix {
        self.w0
            .add(&self.b.matmul(&self.a).expect("factor shapes fixed at wrap"))
            .expect("merged shape fixed at wrap")
    }

    /// Convolution of a `[in_ch, h, w]` input through the adapter in im2col form,
    /// with stride 1 and symmetric zero `padding`. Output is `[out_ch, oh, ow]`.
    pub fn conv_apply(
        &self,
        input: &[f64],
        in_ch: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        padding: usize,
    ) -> Result<Vec<f64>> {
        if in_ch * kh * kw != self.in_dim() || input.len() != in_ch * h * w {
            return Err(Error::dims(
                "LoraAdapter::conv_apply",
                format!("input [{in_ch},{h},{w}] kernel {kh}x{kw} for q = {}", self.in_dim()),
            ));
        }
        let oh = h + 2 * padding + 1 - kh;
        let ow = w + 2 * padding + 1 - kw;
        let d = self.out_dim();
        let mut out = vec![0.0; d * oh * ow];
        let mut patch = vec![0.0; self.in_dim()];
        for oy in 0..oh {
            for ox in 0..ow {
                im2col_patch(input, in_ch, h, w, kh, kw, padding, oy, ox, &mut patch);
                let z = self.apply(&patch)?;
                for (o, v) in z.into_iter().enumerate() {
                    out[(o * oh + oy) * ow + ox] = v;
                }
            }
        }
        Ok(out)
    }
}

/// Gathers the receptive field at output `(oy, ox)` in `[c][ky][kx]` order.
#[allow(clippy::too_many_arguments)]
pub fn im2col_patch(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    oy: usize,
    ox: usize,
    patch: &mut [f64],
) {
    let mut idx = 0;
    for c in 0..in_ch {
        for ky in 0..kh {
            let iy = (oy + ky) as isize - padding as isize;
            for kx in 0..kw {
                let ix = (ox + kx) as isize - padding as isize;
                patch[idx] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    input[(c * h + iy as usize) * w + ix as usize]
                } else {
                    0.0
                };
                idx += 1;
            }
        }
    }
}
