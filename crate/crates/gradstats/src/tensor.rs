//! Dense row-major `f64` tensors and the kernels every other module consumes.
//!
//! Tensors are immutable after construction and all kernels are pure
//! functions, so values can be shared freely across threads. There are no
//! strided views: `transpose` and friends copy. Everything is 64-bit so that
//! desk-scale verification against brute-force oracles is not confounded by
//! precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by tensor constructors and kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("duplicate axis {axis} in {context}")]
    DuplicateAxis { axis: usize, context: &'static str },
    #[error(
        "contracted extents differ: lhs axis {lhs_axis} has extent {lhs_extent}, \
         rhs axis {rhs_axis} has extent {rhs_extent}"
    )]
    ContractExtentMismatch {
        lhs_axis: usize,
        lhs_extent: usize,
        rhs_axis: usize,
        rhs_extent: usize,
    },
    #[error("shapes {lhs:?} and {rhs:?} need to be equal or one operand scalar")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} applied to out-of-domain entry {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("broadcast mapping {mapping:?} does not embed {from:?} into {to:?}")]
    BroadcastMismatch {
        from: Vec<usize>,
        to: Vec<usize>,
        mapping: Vec<usize>,
    },
    #[error("invalid permutation {perm:?} for rank {rank}")]
    InvalidPermutation { perm: Vec<usize>, rank: usize },
    #[error("index {index} out of range for axis {axis} with extent {extent}")]
    IndexOutOfRange {
        index: usize,
        axis: usize,
        extent: usize,
    },
}

/// Elementwise primitive operations.
///
/// Binary ops require identical shapes or a rank-0 (scalar) operand on one
/// side. `Sign` maps 0 to 0. `AbsPow` is the magnitude power `|x|^alpha`;
/// the exponents 2, 1, 0.5 are special-cased to `x*x`, `|x|` and
/// `sqrt(|x|)` so that `square(x) == abs_pow(2)(x)` holds bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Neg,
    Square,
    Sqrt,
    Sign,
    Relu,
    Tanh,
    Gelu,
    Exp,
    Log,
    AbsPow(f64),
    MaxWith(f64),
}

impl ElemOp {
    pub fn arity(&self) -> usize {
        match self {
            ElemOp::Add | ElemOp::Sub | ElemOp::Mul => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ElemOp::Add => "add",
            ElemOp::Sub => "sub",
            ElemOp::Mul => "mul",
            ElemOp::Neg => "neg",
            ElemOp::Square => "square",
            ElemOp::Sqrt => "sqrt",
            ElemOp::Sign => "sign",
            ElemOp::Relu => "relu",
            ElemOp::Tanh => "tanh",
            ElemOp::Gelu => "gelu",
            ElemOp::Exp => "exp",
            ElemOp::Log => "log",
            ElemOp::AbsPow(_) => "abs_pow",
            ElemOp::MaxWith(_) => "max_with",
        }
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub(crate) fn sign_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn abs_pow_scalar(x: f64, alpha: f64) -> f64 {
    if alpha == 2.0 {
        x * x
    } else if alpha == 1.0 {
        x.abs()
    } else if alpha == 0.5 {
        x.abs().sqrt()
    } else {
        x.abs().powf(alpha)
    }
}

/// Dense numeric array with row-major layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &e) in shape.iter().enumerate().rev() {
        s[i] = acc;
        acc *= e;
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; element_count(shape)],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; element_count(shape)],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = element_count(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a rank-0 (or one-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter()
    }

    fn check_axes(&self, axes: &[usize], context: &'static str) -> Result<(), TensorError> {
        let mut seen = vec![false; self.rank()];
        for &axis in axes {
            if axis >= self.rank() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: self.rank(),
                });
            }
            if seen[axis] {
                return Err(TensorError::DuplicateAxis { axis, context });
            }
            seen[axis] = true;
        }
        Ok(())
    }

    /// Tensor contraction over paired axes.
    ///
    /// Output carries `self`'s free axes (ascending) followed by `other`'s
    /// free axes (ascending). For rank-2 operands with one pair this is a
    /// matrix product. Per output entry, contracted indices are accumulated
    /// in row-major order of the pair list, which keeps results bit-stable.
    pub fn contract(
        &self,
        other: &Tensor,
        pairs: &[(usize, usize)],
    ) -> Result<Tensor, TensorError> {
        let lhs_axes: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let rhs_axes: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        self.check_axes(&lhs_axes, "contract lhs pairs")?;
        other.check_axes(&rhs_axes, "contract rhs pairs")?;
        for &(la, ra) in pairs {
            if self.shape[la] != other.shape[ra] {
                return Err(TensorError::ContractExtentMismatch {
                    lhs_axis: la,
                    lhs_extent: self.shape[la],
                    rhs_axis: ra,
                    rhs_extent: other.shape[ra],
                });
            }
        }

        let lhs_free: Vec<usize> = (0..self.rank()).filter(|a| !lhs_axes.contains(a)).collect();
        let rhs_free: Vec<usize> = (0..other.rank()).filter(|a| !rhs_axes.contains(a)).collect();

        let mut out_shape: Vec<usize> = lhs_free.iter().map(|&a| self.shape[a]).collect();
        out_shape.extend(rhs_free.iter().map(|&a| other.shape[a]));

        let lhs_strides = strides(&self.shape);
        let rhs_strides = strides(&other.shape);
        let contracted: Vec<usize> = lhs_axes.iter().map(|&a| self.shape[a]).collect();
        let inner_len = element_count(&contracted);

        let out_len = element_count(&out_shape);
        let mut out = vec![0.0; out_len];

        // Precompute lhs/rhs offsets for every contracted multi-index once.
        let mut inner_offsets = Vec::with_capacity(inner_len);
        let mut counter = vec![0usize; pairs.len()];
        for _ in 0..inner_len {
            let mut lo = 0;
            let mut ro = 0;
            for (k, &c) in counter.iter().enumerate() {
                lo += c * lhs_strides[lhs_axes[k]];
                ro += c * rhs_strides[rhs_axes[k]];
            }
            inner_offsets.push((lo, ro));
            for k in (0..counter.len()).rev() {
                counter[k] += 1;
                if counter[k] < contracted[k] {
                    break;
                }
                counter[k] = 0;
            }
        }

        let mut free_counter = vec![0usize; lhs_free.len() + rhs_free.len()];
        for slot in out.iter_mut() {
            let mut lbase = 0;
            let mut rbase = 0;
            for (k, &c) in free_counter.iter().enumerate() {
                if k < lhs_free.len() {
                    lbase += c * lhs_strides[lhs_free[k]];
                } else {
                    rbase += c * rhs_strides[rhs_free[k - lhs_free.len()]];
                }
            }
            let mut acc = 0.0;
            for &(lo, ro) in &inner_offsets {
                acc += self.data[lbase + lo] * other.data[rbase + ro];
            }
            *slot = acc;
            for k in (0..free_counter.len()).rev() {
                free_counter[k] += 1;
                if free_counter[k] < out_shape[k] {
                    break;
                }
                free_counter[k] = 0;
            }
        }

        Tensor::new(out_shape, out)
    }

    fn unary(&self, op: &ElemOp) -> Result<Tensor, TensorError> {
        let mut data = Vec::with_capacity(self.data.len());
        for &x in &self.data {
            let y = match op {
                ElemOp::Neg => -x,
                ElemOp::Square => x * x,
                ElemOp::Sqrt => {
                    if x < 0.0 {
                        return Err(TensorError::Domain {
                            op: "sqrt",
                            value: x,
                        });
                    }
                    x.sqrt()
                }
                ElemOp::Sign => sign_scalar(x),
                ElemOp::Relu => {
                    if x > 0.0 {
                        x
                    } else {
                        0.0
                    }
                }
                ElemOp::Tanh => x.tanh(),
                ElemOp::Gelu => gelu_scalar(x),
                ElemOp::Exp => x.exp(),
                ElemOp::Log => {
                    if x <= 0.0 {
                        return Err(TensorError::Domain { op: "log", value: x });
                    }
                    x.ln()
                }
                ElemOp::AbsPow(alpha) => abs_pow_scalar(x, *alpha),
                ElemOp::MaxWith(c) => x.max(*c),
                ElemOp::Add | ElemOp::Sub | ElemOp::Mul => unreachable!("binary op"),
            };
            data.push(y);
        }
        Tensor::new(self.shape.clone(), data)
    }

    fn binary(&self, other: &Tensor, op: &ElemOp) -> Result<Tensor, TensorError> {
        let f = |a: f64, b: f64| match op {
            ElemOp::Add => a + b,
            ElemOp::Sub => a - b,
            ElemOp::Mul => a * b,
            _ => unreachable!("unary op"),
        };
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            Tensor::new(self.shape.clone(), data)
        } else if self.is_scalar() {
            let a = self.data[0];
            let data = other.data.iter().map(|&b| f(a, b)).collect();
            Tensor::new(other.shape.clone(), data)
        } else if other.is_scalar() {
            let b = other.data[0];
            let data = self.data.iter().map(|&a| f(a, b)).collect();
            Tensor::new(self.shape.clone(), data)
        } else {
            Err(TensorError::ShapeMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    /// Apply an elementwise primitive. Binary ops take two operands with
    /// identical shapes, or one rank-0 operand broadcast against the other.
    pub fn elementwise(op: &ElemOp, operands: &[&Tensor]) -> Result<Tensor, TensorError> {
        match op.arity() {
            1 => {
                assert_eq!(operands.len(), 1, "unary op takes one operand");
                operands[0].unary(op)
            }
            2 => {
                assert_eq!(operands.len(), 2, "binary op takes two operands");
                operands[0].binary(operands[1], op)
            }
            _ => unreachable!(),
        }
    }

    /// Sum over the listed axes. Contributions to each output entry arrive
    /// in row-major input order, keeping the reduction bit-stable.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        self.check_axes(axes, "reduce_sum axes")?;
        let kept: Vec<usize> = (0..self.rank()).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&a| self.shape[a]).collect();
        let out_strides = strides(&out_shape);
        let mut out = vec![0.0; element_count(&out_shape)];

        let mut coords = vec![0usize; self.rank()];
        for &x in &self.data {
            let mut off = 0;
            for (k, &axis) in kept.iter().enumerate() {
                off += coords[axis] * out_strides[k];
            }
            out[off] += x;
            for a in (0..coords.len()).rev() {
                coords[a] += 1;
                if coords[a] < self.shape[a] {
                    break;
                }
                coords[a] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Replicate into `to_shape`. `mapping[i]` is the target axis carrying
    /// source axis `i`; it must be injective and extent-preserving. Target
    /// axes outside the mapping image are the replicated ones.
    pub fn broadcast(&self, to_shape: &[usize], mapping: &[usize]) -> Result<Tensor, TensorError> {
        let bad = || TensorError::BroadcastMismatch {
            from: self.shape.clone(),
            to: to_shape.to_vec(),
            mapping: mapping.to_vec(),
        };
        if mapping.len() != self.rank() {
            return Err(bad());
        }
        let mut seen = vec![false; to_shape.len()];
        for (i, &t) in mapping.iter().enumerate() {
            if t >= to_shape.len() || seen[t] || to_shape[t] != self.shape[i] {
                return Err(bad());
            }
            seen[t] = true;
        }

        let src_strides = strides(&self.shape);
        let mut src_stride_of_target = vec![0usize; to_shape.len()];
        for (i, &t) in mapping.iter().enumerate() {
            src_stride_of_target[t] = src_strides[i];
        }

        let out_len = element_count(to_shape);
        let mut out = vec![0.0; out_len];
        let mut coords = vec![0usize; to_shape.len()];
        for slot in out.iter_mut() {
            let mut off = 0;
            for (a, &c) in coords.iter().enumerate() {
                off += c * src_stride_of_target[a];
            }
            *slot = self.data[off];
            for a in (0..coords.len()).rev() {
                coords[a] += 1;
                if coords[a] < to_shape[a] {
                    break;
                }
                coords[a] = 0;
            }
        }
        Tensor::new(to_shape.to_vec(), out)
    }

    /// Permute axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Tensor, TensorError> {
        if perm.len() != self.rank() {
            return Err(TensorError::InvalidPermutation {
                perm: perm.to_vec(),
                rank: self.rank(),
            });
        }
        let mut seen = vec![false; self.rank()];
        for &p in perm {
            if p >= self.rank() || seen[p] {
                return Err(TensorError::InvalidPermutation {
                    perm: perm.to_vec(),
                    rank: self.rank(),
                });
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides = strides(&self.shape);
        let mut out = vec![0.0; self.data.len()];
        let mut coords = vec![0usize; out_shape.len()];
        for slot in out.iter_mut() {
            let mut off = 0;
            for (i, &c) in coords.iter().enumerate() {
                off += c * src_strides[perm[i]];
            }
            *slot = self.data[off];
            for a in (0..coords.len()).rev() {
                coords[a] += 1;
                if coords[a] < out_shape[a] {
                    break;
                }
                coords[a] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Slice out `index` along `axis`, keeping an extent-1 axis in place.
    pub fn slice_axis(&self, axis: usize, index: usize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        if index >= self.shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                index,
                axis,
                extent: self.shape[axis],
            });
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let src_strides = strides(&self.shape);
        let mut out = vec![0.0; element_count(&out_shape)];
        let mut coords = vec![0usize; out_shape.len()];
        for slot in out.iter_mut() {
            let mut off = index * src_strides[axis];
            for (a, &c) in coords.iter().enumerate() {
                if a != axis {
                    off += c * src_strides[a];
                }
            }
            *slot = self.data[off];
            for a in (0..coords.len()).rev() {
                coords[a] += 1;
                if coords[a] < out_shape[a] {
                    break;
                }
                coords[a] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Stack tensors of identical shape along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let inner = parts[0].shape.clone();
        for p in parts {
            if p.shape != inner {
                return Err(TensorError::ShapeMismatch {
                    lhs: inner,
                    rhs: p.shape.clone(),
                });
            }
        }
        let mut shape = Vec::with_capacity(inner.len() + 1);
        shape.push(parts.len());
        shape.extend_from_slice(&inner);
        let mut data = Vec::with_capacity(element_count(&shape));
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::new(shape, data)
    }

    /// Full inner product, accumulated in row-major order.
    pub fn inner(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a * b))
    }

    /// Map every entry through `f`, producing a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Zip two same-shaped tensors through `f`.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }
}

/// Largest entrywise relative difference between two same-shaped tensors.
/// The denominator is floored so that zero-against-zero compares equal.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel err of mismatched shapes");
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let denom = x.abs().max(y.abs()).max(1e-12);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

/// Global L2 norm over a list of tensors.
pub fn global_norm(parts: &[Tensor]) -> f64 {
    parts
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0, |acc, &x| acc + x * x)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn contract_matrix_vector_of_ones_sums_rows() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let c = a.contract(&b, &[(1, 0)]).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn contract_over_batch_axis_sums_outer_products() {
        // S (B x D) against R (B x D'), contracting the batch axes:
        // sum_i s_i r_i^T expanded by hand.
        let s = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let g = s.contract(&r, &[(0, 0)]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn contract_zero_extent_axis_gives_zeros() {
        let a = t(&[0, 3], &[]);
        let b = t(&[0, 2], &[]);
        let c = a.contract(&b, &[(0, 0)]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn contract_rejects_extent_mismatch_and_duplicates() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            a.contract(&b, &[(1, 0)]),
            Err(TensorError::ContractExtentMismatch { .. })
        ));
        assert!(matches!(
            a.contract(&b, &[(0, 0), (0, 1)]),
            Err(TensorError::DuplicateAxis { .. })
        ));
    }

    #[test]
    fn sign_maps_zero_to_zero() {
        let x = t(&[3], &[-2.0, 0.0, 5.0]);
        let y = Tensor::elementwise(&ElemOp::Sign, &[&x]).unwrap();
        assert_eq!(y.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn square_matches_hand_values() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = Tensor::elementwise(&ElemOp::Square, &[&x]).unwrap();
        assert_eq!(y.data(), &[1.0, 4.0, 9.0, 16.0]);
    }

    #[test]
    fn abs_pow_half_is_sqrt_of_magnitude() {
        let x = t(&[2], &[4.0, 9.0]);
        let y = Tensor::elementwise(&ElemOp::AbsPow(0.5), &[&x]).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn sqrt_rejects_negative_entries() {
        let x = t(&[1], &[-1.0]);
        assert!(matches!(
            Tensor::elementwise(&ElemOp::Sqrt, &[&x]),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn binary_scalar_broadcast_and_mismatch() {
        let x = t(&[2], &[1.0, 2.0]);
        let c = Tensor::scalar(10.0);
        let y = Tensor::elementwise(&ElemOp::Mul, &[&x, &c]).unwrap();
        assert_eq!(y.data(), &[10.0, 20.0]);
        let z = Tensor::elementwise(&ElemOp::Sub, &[&c, &x]).unwrap();
        assert_eq!(z.data(), &[9.0, 8.0]);
        let bad = t(&[3], &[0.0; 3]);
        assert!(matches!(
            Tensor::elementwise(&ElemOp::Add, &[&x, &bad]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn reduce_sum_and_broadcast_examples() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = x.reduce_sum(&[0]).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[4.0, 6.0]);
        let b = r.broadcast(&[2, 2], &[1]).unwrap();
        assert_eq!(b.data(), &[4.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_reduce_adjoint_hand_example() {
        let x = t(&[2], &[1.0, 2.0]);
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let lhs = x.broadcast(&[2, 2], &[1]).unwrap().inner(&y).unwrap();
        let rhs = x.inner(&y.reduce_sum(&[0]).unwrap()).unwrap();
        assert_eq!(lhs, 3.0);
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn transpose_roundtrip_and_validation() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.transpose(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(y.transpose(&[1, 0]).unwrap(), x);
        assert!(x.transpose(&[0, 0]).is_err());
    }

    #[test]
    fn slice_and_stack_roundtrip() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s0 = x.slice_axis(0, 0).unwrap();
        let s1 = x.slice_axis(0, 1).unwrap();
        assert_eq!(s0.shape(), &[1, 3]);
        assert_eq!(s1.data(), &[4.0, 5.0, 6.0]);
        assert!(x.slice_axis(0, 2).is_err());
    }

    fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..4, 0..3)
    }

    proptest! {
        #[test]
        fn broadcast_reduce_adjointness(
            shape in arb_shape(),
            extra in 1usize..4,
            seedv in prop::collection::vec(-10.0f64..10.0, 64),
        ) {
            // <broadcast(x), y> == <x, reduce_sum(y)> over the broadcast axis.
            let n = element_count(&shape);
            let x = Tensor::new(shape.clone(), seedv[..n].to_vec()).unwrap();
            let mut to_shape = vec![extra];
            to_shape.extend_from_slice(&shape);
            let mapping: Vec<usize> = (1..=shape.len()).collect();
            let m = element_count(&to_shape);
            let y = Tensor::new(to_shape.clone(), seedv.iter().cycle().take(m).cloned().collect()).unwrap();
            let lhs = x.broadcast(&to_shape, &mapping).unwrap().inner(&y).unwrap();
            let rhs = x.inner(&y.reduce_sum(&[0]).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12_f64.max(1e-12 * lhs.abs()));
        }

        #[test]
        fn contract_is_bilinear(
            av in prop::collection::vec(-5.0f64..5.0, 6),
            bv in prop::collection::vec(-5.0f64..5.0, 6),
            cv in prop::collection::vec(-5.0f64..5.0, 6),
            alpha in -3.0f64..3.0,
        ) {
            let a = Tensor::new(vec![2, 3], av).unwrap();
            let a2 = Tensor::new(vec![2, 3], cv).unwrap();
            let b = Tensor::new(vec![3, 2], bv).unwrap();
            let lin = a.map(|x| x * alpha)
                .zip_with(&a2, |x, y| x + y).unwrap()
                .contract(&b, &[(1, 0)]).unwrap();
            let parts = a.contract(&b, &[(1, 0)]).unwrap().map(|x| x * alpha)
                .zip_with(&a2.contract(&b, &[(1, 0)]).unwrap(), |x, y| x + y).unwrap();
            for (l, r) in lin.data().iter().zip(parts.data()) {
                prop_assert!((l - r).abs() <= 1e-9 * (1.0 + l.abs().max(r.abs())));
            }
        }

        #[test]
        fn sign_is_idempotent_and_square_is_abs_pow_two(
            v in prop::collection::vec(-10.0f64..10.0, 1..32),
        ) {
            let x = Tensor::new(vec![v.len()], v).unwrap();
            let s = Tensor::elementwise(&ElemOp::Sign, &[&x]).unwrap();
            let ss = Tensor::elementwise(&ElemOp::Sign, &[&s]).unwrap();
            prop_assert_eq!(s.data(), ss.data());
            let sq = Tensor::elementwise(&ElemOp::Square, &[&x]).unwrap();
            let ap = Tensor::elementwise(&ElemOp::AbsPow(2.0), &[&x]).unwrap();
            prop_assert_eq!(sq.data(), ap.data());
        }
    }
}
