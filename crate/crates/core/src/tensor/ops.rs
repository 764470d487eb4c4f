//! Forward operations. Each op validates shapes, computes the output buffer,
//! and records itself for the backward pass when an input requires gradients.

use super::autograd::Op;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

// ── raw kernels shared with the backward pass ─────────────────────────────

/// C[m×n] = A[m×k] · B[k×n], row-major.
pub(crate) fn matmul_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
    c
}

/// C[m×k] = G[m×n] · Bᵀ where B is [k×n].
pub(crate) fn matmul_a_bt<E: Scalar>(g: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for j in 0..n {
                acc += g_row[j] * b_row[j];
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// C[k×n] = Aᵀ · G where A is [m×k], G is [m×n].
pub(crate) fn matmul_at_b<E: Scalar>(a: &[E], g: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == E::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * g_row[j];
            }
        }
    }
    c
}

pub(crate) fn transpose_raw<E: Scalar>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Iterate the slices a reduction axis induces on a 1-D or 2-D tensor:
/// returns (slice_count, slice_len, index_fn) where index_fn(slice, pos)
/// maps to the flat buffer.
pub(crate) fn axis_slices(shape: &[usize], axis: usize) -> Result<(usize, usize, Box<dyn Fn(usize, usize) -> usize>)> {
    match (shape.len(), axis) {
        (1, 0) => {
            let n = shape[0];
            Ok((1, n, Box::new(|_, p| p)))
        }
        (2, 0) => {
            let (r, c) = (shape[0], shape[1]);
            Ok((c, r, Box::new(move |s, p| p * c + s)))
        }
        (2, 1) => {
            let (_r, c) = (shape[0], shape[1]);
            Ok((shape[0], c, Box::new(move |s, p| s * c + p)))
        }
        _ => Err(Error::Contract(format!(
            "axis {} invalid for shape {:?}",
            axis, shape
        ))),
    }
}


/// Elementwise binary with the one broadcast the model needs: a 1-element
/// operand combines against every element of the other.
fn binary_shapes<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, what: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::Shape(format!(
            "{}: shapes {:?} and {:?} differ (only 1-element broadcast is supported)",
            what,
            a.shape(),
            b.shape()
        )))
    }
}

fn binary_apply<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Vec<E> {
    let av = a.data();
    let bv = b.data();
    let n = av.len().max(bv.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = av[if av.len() == 1 { 0 } else { i }];
        let y = bv[if bv.len() == 1 { 0 } else { i }];
        out.push(f(x, y));
    }
    out
}

impl<E: Scalar> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = binary_shapes(self, other, "add")?;
        let data = binary_apply(self, other, |x, y| x + y);
        Ok(Tensor::make(shape, data, Op::Add(self.clone(), other.clone()), false))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = binary_shapes(self, other, "sub")?;
        let data = binary_apply(self, other, |x, y| x - y);
        Ok(Tensor::make(shape, data, Op::Sub(self.clone(), other.clone()), false))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = binary_shapes(self, other, "mul")?;
        let data = binary_apply(self, other, |x, y| x * y);
        Ok(Tensor::make(shape, data, Op::Mul(self.clone(), other.clone()), false))
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = binary_shapes(self, other, "div")?;
        let data = binary_apply(self, other, |x, y| x / y);
        Ok(Tensor::make(shape, data, Op::Div(self.clone(), other.clone()), false))
    }

    pub fn neg(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| -x).collect();
        Tensor::make(self.shape().to_vec(), data, Op::Neg(self.clone()), false)
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::make(self.shape().to_vec(), data, Op::Scale(self.clone(), c), false)
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::make(self.shape().to_vec(), data, Op::AddScalar(self.clone(), c), false)
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect();
        Tensor::make(self.shape().to_vec(), data, Op::Relu(self.clone()), false)
    }

    pub fn exp(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::make(self.shape().to_vec(), data, Op::Exp(self.clone()), false)
    }

    pub fn ln(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.ln()).collect();
        Tensor::make(self.shape().to_vec(), data, Op::Ln(self.clone()), false)
    }

    pub fn sqrt(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.sqrt()).collect();
        Tensor::make(self.shape().to_vec(), data, Op::Sqrt(self.clone()), false)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let one = E::one();
        let data = self
            .data()
            .iter()
            .map(|&x| {
                if x >= E::zero() {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                }
            })
            .collect();
        Tensor::make(self.shape().to_vec(), data, Op::Sigmoid(self.clone()), false)
    }

    /// Standard matrix product; both operands must be rank 2.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = matmul_raw(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::make(vec![m, n], data, Op::Matmul(self.clone(), other.clone()), false))
    }

    pub fn transpose(&self) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a rank-2 tensor, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let data = transpose_raw(&self.data(), r, c);
        Ok(Tensor::make(vec![c, r], data, Op::Transpose(self.clone()), false))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<E> {
        let s = self.data().iter().copied().sum();
        Tensor::make(vec![1], vec![s], Op::Sum(self.clone()), false)
    }

    /// Sum along one axis of a 2-D tensor, producing a 1-D tensor.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "sum_axis needs a rank-2 tensor, got {:?}",
                self.shape()
            )));
        }
        let (slices, len, at) = axis_slices(self.shape(), axis)?;
        let data = self.data();
        let mut out = vec![E::zero(); slices];
        for (s, o) in out.iter_mut().enumerate() {
            for p in 0..len {
                *o += data[at(s, p)];
            }
        }
        Ok(Tensor::make(vec![slices], out, Op::SumAxis { x: self.clone(), axis }, false))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Tensor<E> {
        let n = E::from_f64(self.numel() as f64);
        self.sum().scale(E::one() / n)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        let (_, len, _) = axis_slices(self.shape(), axis)?;
        Ok(self.sum_axis(axis)?.scale(E::one() / E::from_f64(len as f64)))
    }

    /// Numerically stable softmax along `axis`; every slice sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let (slices, len, at) = axis_slices(self.shape(), axis)?;
        let data = self.data();
        let mut out = vec![E::zero(); data.len()];
        for s in 0..slices {
            let mut mx = data[at(s, 0)];
            for p in 1..len {
                mx = mx.max(data[at(s, p)]);
            }
            let mut z = E::zero();
            for p in 0..len {
                let e = (data[at(s, p)] - mx).exp();
                out[at(s, p)] = e;
                z += e;
            }
            for p in 0..len {
                out[at(s, p)] = out[at(s, p)] / z;
            }
        }
        drop(data);
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            Op::Softmax { x: self.clone(), axis },
            false,
        ))
    }

    /// Row softmax of a square score matrix where row `i` is normalized over
    /// columns `0..=i` only; later columns get exactly zero weight.
    pub fn causal_softmax(&self) -> Result<Tensor<E>> {
        if self.rank() != 2 || self.shape()[0] != self.shape()[1] {
            return Err(Error::Shape(format!(
                "causal_softmax needs a square matrix, got {:?}",
                self.shape()
            )));
        }
        let n = self.shape()[0];
        let data = self.data();
        let mut out = vec![E::zero(); n * n];
        for i in 0..n {
            let row = &data[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in &row[1..=i] {
                mx = mx.max(v);
            }
            let mut z = E::zero();
            for j in 0..=i {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * n + j] = out[i * n + j] / z;
            }
        }
        drop(data);
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            Op::CausalSoftmax { x: self.clone() },
            false,
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let (slices, len, at) = axis_slices(self.shape(), axis)?;
        let data = self.data();
        let mut out = vec![E::zero(); data.len()];
        for s in 0..slices {
            let mut mx = data[at(s, 0)];
            for p in 1..len {
                mx = mx.max(data[at(s, p)]);
            }
            let mut z = E::zero();
            for p in 0..len {
                z += (data[at(s, p)] - mx).exp();
            }
            let log_z = z.ln() + mx;
            for p in 0..len {
                out[at(s, p)] = data[at(s, p)] - log_z;
            }
        }
        drop(data);
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            Op::LogSoftmax { x: self.clone(), axis },
            false,
        ))
    }

    /// Layer normalization over the last dimension, then affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let width = *self.shape().last().ok_or_else(|| {
            Error::Shape("layer_norm on a rank-0 tensor".to_string())
        })?;
        if gain.shape() != [width] || bias.shape() != [width] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{}], got {:?} and {:?}",
                width,
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = self.numel() / width;
        let data = self.data();
        let gv = gain.data();
        let bv = bias.data();
        let inv_w = E::one() / E::from_f64(width as f64);
        let mut out = vec![E::zero(); data.len()];
        let mut means = vec![E::zero(); rows];
        let mut rstds = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &data[r * width..(r + 1) * width];
            let mut mu = E::zero();
            for &v in row {
                mu += v;
            }
            mu *= inv_w;
            let mut var = E::zero();
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_w;
            let rstd = E::one() / (var + eps).sqrt();
            means[r] = mu;
            rstds[r] = rstd;
            for j in 0..width {
                out[r * width + j] = (row[j] - mu) * rstd * gv[j] + bv[j];
            }
        }
        drop((data, gv, bv));
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                mean: means,
                rstd: rstds,
            },
            false,
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".to_string()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::Contract(format!(
                "concat axis {} out of range for rank {}",
                axis, rank
            )));
        }
        for p in parts {
            if p.rank() != rank {
                return Err(Error::Shape(format!(
                    "concat: ranks differ ({:?} vs {:?})",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(Error::Shape(format!(
                        "concat: non-axis dimensions differ ({:?} vs {:?})",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

        let data = match (rank, axis) {
            (1, 0) => {
                let mut out = Vec::with_capacity(shape[0]);
                for p in parts {
                    out.extend_from_slice(&p.data());
                }
                out
            }
            (2, 0) => {
                let mut out = Vec::with_capacity(shape[0] * shape[1]);
                for p in parts {
                    out.extend_from_slice(&p.data());
                }
                out
            }
            (2, 1) => {
                let rows = shape[0];
                let mut out = Vec::with_capacity(rows * shape[1]);
                for r in 0..rows {
                    for p in parts {
                        let w = p.shape()[1];
                        out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
                    }
                }
                out
            }
            _ => {
                return Err(Error::Contract(format!(
                    "concat supports rank 1-2 tensors, got rank {}",
                    rank
                )))
            }
        };
        Ok(Tensor::make(shape, data, Op::Concat { parts: parts.to_vec(), axis }, false))
    }

    /// Contiguous sub-range along `axis` (copying; no views in this crate).
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::Contract(format!(
                "narrow axis {} out of range for shape {:?}",
                axis,
                self.shape()
            )));
        }
        if start + len > self.shape()[axis] {
            return Err(Error::Contract(format!(
                "narrow {}..{} exceeds axis {} of shape {:?}",
                start,
                start + len,
                axis,
                self.shape()
            )));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let data = self.data();
        let out = match (self.rank(), axis) {
            (1, 0) => data[start..start + len].to_vec(),
            (2, 0) => {
                let c = self.shape()[1];
                data[start * c..(start + len) * c].to_vec()
            }
            (2, 1) => {
                let (r, c) = (self.shape()[0], self.shape()[1]);
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&data[i * c + start..i * c + start + len]);
                }
                out
            }
            _ => {
                return Err(Error::Contract(format!(
                    "narrow supports rank 1-2 tensors, got rank {}",
                    self.rank()
                )))
            }
        };
        drop(data);
        Ok(Tensor::make(
            shape,
            out,
            Op::Narrow { x: self.clone(), axis, start, len },
            false,
        ))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::make(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
            false,
        ))
    }

    /// Row lookup: `self` is a `[rows×dim]` table, output is `[indices.len()×dim]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows needs a rank-2 table, got {:?}",
                self.shape()
            )));
        }
        let (rows, dim) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {} out of range for {} rows",
                bad, rows
            )));
        }
        let data = self.data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        drop(data);
        Ok(Tensor::make(
            vec![indices.len(), dim],
            out,
            Op::GatherRows { table: self.clone(), indices: indices.to_vec() },
            false,
        ))
    }

    /// Per-row element selection: `out[i] = self[i, indices[i]]`.
    pub fn pick_per_row(&self, indices: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "pick_per_row needs a rank-2 tensor, got {:?}",
                self.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if indices.len() != rows {
            return Err(Error::Contract(format!(
                "pick_per_row: {} indices for {} rows",
                indices.len(),
                rows
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::Contract(format!(
                "pick_per_row index {} out of range for {} columns",
                bad, cols
            )));
        }
        let data = self.data();
        let out: Vec<E> = indices.iter().enumerate().map(|(r, &c)| data[r * cols + c]).collect();
        drop(data);
        Ok(Tensor::make(
            vec![rows],
            out,
            Op::PickPerRow { x: self.clone(), indices: indices.to_vec() },
            false,
        ))
    }

    /// `[n×d]` matrix plus a `[d]` row vector added to every row.
    pub fn add_row_broadcast(&self, row: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || row.rank() != 1 || self.shape()[1] != row.shape()[0] {
            return Err(Error::Shape(format!(
                "add_row_broadcast: {:?} + {:?}",
                self.shape(),
                row.shape()
            )));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let data = self.data();
        let rv = row.data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(data[i * d + j] + rv[j]);
            }
        }
        drop((data, rv));
        Ok(Tensor::make(
            vec![n, d],
            out,
            Op::AddRowBroadcast { mat: self.clone(), row: row.clone() },
            false,
        ))
    }

    /// Tile a `[d]` vector into an `[n×d]` matrix.
    pub fn repeat_rows(&self, n: usize) -> Result<Tensor<E>> {
        if self.rank() != 1 {
            return Err(Error::Contract(format!(
                "repeat_rows needs a rank-1 tensor, got {:?}",
                self.shape()
            )));
        }
        let d = self.shape()[0];
        let data = self.data();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&data);
        }
        drop(data);
        Ok(Tensor::make(
            vec![n, d],
            out,
            Op::RepeatRows { row: self.clone(), n },
            false,
        ))
    }

    /// Mean binary cross entropy between `sigmoid(self)` and constant targets
    /// in `[0,1]`, computed in the numerically stable logit form. Scalar output.
    pub fn bce_with_logits(&self, targets: &[E]) -> Result<Tensor<E>> {
        if targets.len() != self.numel() {
            return Err(Error::Shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                self.numel(),
                targets.len()
            )));
        }
        let data = self.data();
        let mut acc = E::zero();
        for (&z, &t) in data.iter().zip(targets) {
            // softplus(z) - t*z, with softplus(z) = max(z,0) + ln(1+e^{-|z|})
            let softplus = z.max(E::zero()) + (E::one() + (-z.abs()).exp()).ln();
            acc += softplus - t * z;
        }
        let n = E::from_f64(data.len() as f64);
        drop(data);
        Ok(Tensor::make(
            vec![1],
            vec![acc / n],
            Op::BceWithLogits { logits: self.clone(), targets: targets.to_vec() },
            false,
        ))
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) use axis_slices as axis_slices_for;
