//! Dense rank-4 tensors and a reverse-mode tape over them.
//!
//! Values are `f64` in row-major `(N, C, H, W)` order. Gradients are not
//! stored on the tensors themselves: a [`Tape`] records the forward ops and
//! [`Tape::backward`] returns a [`Gradients`] table keyed by [`Var`].

mod gradcheck;
mod ops;
mod tape;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_scaled, relative_error, GradCheckReport};
pub use ops::{batch_hard_selection, TripletSelection};
pub use tape::{Gradients, OpKind, PoolMode, Tape, Var};

/// `(N, C, H, W)` extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c() * self.h() * self.w()
    }

    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    pub fn flat(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Tensor { shape, data }
    }

    /// A `(N, D, 1, 1)` tensor from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows of unequal length"));
        }
        Self::from_vec(
            Shape::new(rows.len(), d, 1, 1),
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.flat(n, c, h, w)]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.shape.is_scalar() {
            return Err(Error::NonScalarLoss(self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Rows of a `(N, D, 1, 1)` tensor, or of any tensor flattened per item.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.shape.item_len().max(1))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Fixture text: one `N C H W` line, then row-major values.
    pub fn to_fixture(&self) -> String {
        let [n, c, h, w] = self.shape.0;
        let mut out = format!("{n} {c} {h} {w}\n");
        let row = w.max(1);
        for chunk in self.data.chunks(row) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

impl Tensor {
    /// Reads one fixture tensor from a whitespace token stream.
    pub fn parse_tokens<'a>(tokens: &mut impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = tokens
                .next()
                .ok_or_else(|| Error::invalid("tensor fixture: missing shape"))?
                .parse()
                .map_err(|e| Error::invalid(format!("tensor fixture shape: {e}")))?;
        }
        let shape = Shape(dims);
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            let t = tokens
                .next()
                .ok_or_else(|| Error::invalid(format!("tensor fixture {shape}: too few values")))?;
            data.push(
                t.parse::<f64>()
                    .map_err(|e| Error::invalid(format!("tensor fixture value {t:?}: {e}")))?,
            );
        }
        Tensor::from_vec(shape, data)
    }
}

impl FromStr for Tensor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = s.split_whitespace();
        let t = Tensor::parse_tokens(&mut tokens)?;
        if tokens.next().is_some() {
            return Err(Error::invalid("tensor fixture: trailing values"));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_round_trip() {
        let t = Tensor::from_vec(Shape::new(1, 2, 1, 3), vec![0.1, -2.5, 3e-9, 4.0, 5.0, 1e300])
            .unwrap();
        let text = t.to_fixture();
        assert!(text.starts_with("1 2 1 3\n"));
        assert_eq!(text.parse::<Tensor>().unwrap(), t);
    }

    #[test]
    fn fixture_rejects_wrong_length() {
        assert!("1 1 2 2\n1 2 3".parse::<Tensor>().is_err());
        assert!("1 1".parse::<Tensor>().is_err());
    }

    #[test]
    fn flat_index_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.flat(1, 2, 3, 4), s.numel() - 1);
        assert_eq!(s.flat(0, 1, 0, 0), 20);
    }
}
