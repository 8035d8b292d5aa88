//! Dense f64 tensors and a reverse-mode tape.

mod kernels;
mod tape;

pub mod gradcheck;

pub use tape::{BatchNormOut, Nonlinearity, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// Row-major dense array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err("tensor", &shape, &[data.len()]);
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor whose shape is already known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Rows `[start, start + len)` along the first axis.
    pub fn narrow_first(&self, start: usize, len: usize) -> Result<Self> {
        let rows = self.shape[0];
        if start + len > rows || len == 0 {
            return Err(Error::Contract(format!(
                "rows {start}..{} out of range for extent {rows}",
                start + len
            )));
        }
        let inner = self.numel() / rows;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self::from_parts(
            shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        ))
    }

    /// Gathers the given first-axis rows in order.
    pub fn select_first(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("empty row selection".into()));
        }
        let inner = self.numel() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Contract(format!(
                    "row {r} out of range for extent {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenates along the first axis.
    pub fn stack_first(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err("stack", &first.shape, &p.shape);
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
