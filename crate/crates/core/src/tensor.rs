//! Dense row-major `f64` tensors.
//!
//! Broadcasting aligns trailing dimensions: shapes are right-aligned, missing
//! leading dimensions count as extent 1, and an extent-1 dimension stretches
//! to match the other operand. Anything else is a shape mismatch.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{config_err, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `shape` when viewed as broadcast to `out` (zero on stretched axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out` in row-major order.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel_of(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..n {
        f(lin, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Result shape of broadcasting `a` against `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(config_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(config_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(&shape),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor owning `values`.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values; the shape is fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(config_err!("item() on tensor of shape {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op with trailing-dimension broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let out = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = vec![0.0; numel_of(&out)];
        walk2(&out, &sa, &sb, |i, oa, ob| {
            data[i] = f(self.data[oa], other.data[ob]);
        });
        Ok(Tensor { shape: out, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a / b)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out = broadcast_shape(&self.shape, shape)?;
        if out.as_slice() != shape {
            return Err(config_err!("cannot broadcast {:?} to {:?}", self.shape, shape));
        }
        let sa = broadcast_strides(&self.shape, &out);
        let zero = vec![0; out.len()];
        let mut data = vec![0.0; numel_of(&out)];
        walk2(&out, &sa, &zero, |i, oa, _| data[i] = self.data[oa]);
        Ok(Tensor { shape: out, data })
    }

    /// Sums away broadcast dimensions so the result has shape `target`.
    /// Inverse of [`Tensor::broadcast_to`] for gradients.
    pub fn sum_to_shape(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let out = broadcast_shape(target, &self.shape)?;
        if out != self.shape {
            return Err(config_err!("cannot reduce {:?} to {:?}", self.shape, target));
        }
        let st = broadcast_strides(target, &out);
        let zero = vec![0; out.len()];
        let mut data = vec![0.0; numel_of(target)];
        walk2(&out, &st, &zero, |i, ot, _| data[ot] += self.data[i]);
        Ok(Tensor {
            shape: target.to_vec(),
            data,
        })
    }

    fn reduced_shape(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let mut shape = self.shape.clone();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(config_err!("axis {} out of range for {:?}", ax, self.shape));
            }
            shape[ax] = 1;
        }
        Ok(shape)
    }

    fn drop_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect()
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let kept = self.reduced_shape(axes)?;
        let t = self.sum_to_shape(&kept)?;
        if keepdim {
            Ok(t)
        } else {
            t.reshape(&Self::drop_axes(&self.shape, axes))
        }
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes.iter().map(|&a| self.shape.get(a).copied().unwrap_or(1)).product();
        if count == 0 {
            return Err(crate::Error::EmptyBatch);
        }
        let inv = count as f64;
        Ok(self.sum_axes(axes, keepdim)?.map(|v| v / inv))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape.as_slice(), other.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(config_err!(
                    "matmul shape mismatch {:?} x {:?}",
                    self.shape,
                    other.shape
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(brow) {
                    *d += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = match self.shape.as_slice() {
            &[r, c] => (r, c),
            _ => return Err(config_err!("transpose of non-matrix {:?}", self.shape)),
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() || start > end || end > self.shape[axis] {
            return Err(config_err!(
                "slice {}..{} on axis {} of {:?}",
                start,
                end,
                axis,
                self.shape
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Tensor::new(shape, data)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| config_err!("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(config_err!("concat axis {} for {:?}", axis, first.shape));
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(config_err!("concat mismatch {:?} vs {:?}", p.shape, first.shape));
            }
            shape[axis] += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, data)
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `self: [N, Cin, H, W]`, `kernel: [Cout, Cin, 3, 3]` -> `[N, Cout, H, W]`.
    pub fn conv2d_3x3(&self, kernel: &Tensor) -> Result<Tensor> {
        let (n, cin, h, w, cout) = conv_dims(&self.shape, &kernel.shape)?;
        let mut out = vec![0.0; n * cout * h * w];
        for b in 0..n {
            for co in 0..cout {
                let dst = &mut out[(b * cout + co) * h * w..(b * cout + co + 1) * h * w];
                for ci in 0..cin {
                    let src = &self.data[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                    let k = &kernel.data[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = x as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += k[ky * 3 + kx] * src[sy as usize * w + sx as usize];
                                }
                            }
                            dst[y * w + x] += acc;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, h, w], out)
    }
}

pub(crate) fn conv_dims(input: &[usize], kernel: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    match (input, kernel) {
        (&[n, cin, h, w], &[cout, kc, 3, 3]) if kc == cin => Ok((n, cin, h, w, cout)),
        _ => Err(config_err!("conv2d shape mismatch {:?} * {:?}", input, kernel)),
    }
}

/// Gradients of a 3x3/stride-1/pad-1 convolution with respect to input and kernel.
pub(crate) fn conv2d_3x3_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, cin, h, w, cout) = conv_dims(input.shape(), kernel.shape())?;
    let mut gin = vec![0.0; input.numel()];
    let mut gk = vec![0.0; kernel.numel()];
    let g = grad_out.data();
    for b in 0..n {
        for co in 0..cout {
            let go = &g[(b * cout + co) * h * w..(b * cout + co + 1) * h * w];
            for ci in 0..cin {
                let ioff = (b * cin + ci) * h * w;
                let koff = (co * cin + ci) * 9;
                for y in 0..h {
                    for x in 0..w {
                        let gv = go[y * w + x];
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let src = ioff + sy as usize * w + sx as usize;
                                gk[koff + ky * 3 + kx] += gv * input.data[src];
                                gin[src] += gv * kernel.data[koff + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape.clone(), gin)?,
        Tensor::new(kernel.shape.clone(), gk)?,
    ))
}
