//! Dense 64-bit tensors and the reverse-mode tape they run on.
//!
//! Storage is always a flat row-major `Vec<f64>`; reshape and transpose
//! copy. There are no strided views and no mixed precision here — the
//! large-shape latency benchmark has its own 32-bit kernels in
//! [`crate::latency`].

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::finite_diff_grad;
pub use optim::{adamw_step, lr_at_step, AdamState, AdamwConfig, LrSchedule};
pub use tape::{Diagnostics, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Dense n-dimensional array of 64-bit reals.
///
/// `grad` is populated by [`Tape::backward`] write-back for tensors
/// created with `requires_grad = true`; repeated backward passes without
/// [`Tensor::zero_grad`] accumulate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape.to_vec(), data)
    }

    /// i.i.d. normal entries with the given std, drawn from a SplitMix64
    /// stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Element access by multi-index (tests and small-scale plumbing).
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&d, &e)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(d < e, "index {d} out of range for dim {i} (extent {e})");
            flat = flat * e + d;
        }
        flat
    }

    /// Copy into a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({n})",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// 2-D transpose copy.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose expects a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serialize in the flat text dump format: a `shape:` line followed by
    /// one row-major value per line at 17 significant digits.
    pub fn dump(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 26 + 32);
        s.push_str("shape:");
        for d in &self.shape {
            s.push(' ');
            s.push_str(&d.to_string());
        }
        s.push('\n');
        for v in &self.data {
            s.push_str(&format!("{:.16e}\n", v));
        }
        s
    }

    /// Parse the [`Tensor::dump`] format.
    pub fn parse_dump(text: &str) -> Result<Tensor> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty tensor dump".into()))?;
        let rest = header
            .strip_prefix("shape:")
            .ok_or_else(|| Error::Parse(format!("expected 'shape:' header, got '{header}'")))?;
        let shape: Vec<usize> = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad extent '{t}': {e}")))
            })
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            data.push(
                line.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad value '{line}': {e}")))?,
            );
        }
        if data.len() != n {
            return Err(Error::Parse(format!(
                "dump with shape {:?} expects {} values, found {}",
                shape,
                n,
                data.len()
            )));
        }
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn indexing_round_trip() {
        let mut t = Tensor::zeros(&[2, 3]);
        t.set(&[1, 2], 7.0);
        assert_eq!(t.at(&[1, 2]), 7.0);
        assert_eq!(t.data()[5], 7.0);
    }

    #[test]
    fn transpose_copies() {
        let t = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let tt = t.transposed().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn dump_round_trip_exact() {
        let t = Tensor::from_vec(
            &[2, 2],
            vec![1.0 / 3.0, -2.5e-17, std::f64::consts::PI, 0.0],
        )
        .unwrap();
        let back = Tensor::parse_dump(&t.dump()).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "17 sig digits must round-trip f64");
        }
    }
}
