use std::fmt;

use crate::error::{Error, Result};

/// Dimensions of a dense row-major array. Rank-4 activations are always
/// laid out as (batch, channels, frames, joints).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Input("shape must have at least one dimension".into()));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Input(format!("dimension {axis} of {dims:?} is zero")));
        }
        Ok(Shape(dims))
    }

    /// Shape built from dimensions known to be valid.
    pub(crate) fn from_dims(dims: &[usize]) -> Self {
        debug_assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "{dims:?}");
        Shape(dims.to_vec())
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    /// Unpacks a rank-4 activation shape.
    pub fn bctn(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.0.as_slice() {
            &[b, c, t, n] => Ok([b, c, t, n]),
            _ => Err(Error::dim(op, "rank", 4, self.rank())),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Output length of a sliding window along one axis, or `None` when the
/// dilated kernel does not fit in the padded input.
pub fn window_out_len(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Range `[lo, hi)` of output positions `o` for which the input index
/// `o * stride + offset - pad` lies inside `[0, input)`.
#[inline]
pub(crate) fn valid_range(out_len: usize, input: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let top = input - 1 + pad;
    if top < offset {
        return (0, 0);
    }
    let hi = ((top - offset) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}
