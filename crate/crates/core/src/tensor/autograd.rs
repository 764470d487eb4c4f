//! Operation records and the reverse-mode backward pass.

use std::collections::{HashMap, HashSet};

use super::ops::{axis_slices_for, matmul_a_bt, matmul_at_b, transpose_raw};
use super::{Scalar, Tensor, TensorId};
use crate::error::{Error, Result};

/// The op that produced a tensor, holding references to its inputs and any
/// saved state its backward rule needs.
pub(crate) enum Op<E: Scalar> {
    Leaf,
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Div(Tensor<E>, Tensor<E>),
    Neg(Tensor<E>),
    Scale(Tensor<E>, E),
    AddScalar(Tensor<E>, E),
    Relu(Tensor<E>),
    Exp(Tensor<E>),
    Ln(Tensor<E>),
    Sqrt(Tensor<E>),
    Sigmoid(Tensor<E>),
    Matmul(Tensor<E>, Tensor<E>),
    Transpose(Tensor<E>),
    Sum(Tensor<E>),
    SumAxis { x: Tensor<E>, axis: usize },
    Softmax { x: Tensor<E>, axis: usize },
    CausalSoftmax { x: Tensor<E> },
    LogSoftmax { x: Tensor<E>, axis: usize },
    LayerNorm { x: Tensor<E>, gain: Tensor<E>, bias: Tensor<E>, mean: Vec<E>, rstd: Vec<E> },
    Concat { parts: Vec<Tensor<E>>, axis: usize },
    Narrow { x: Tensor<E>, axis: usize, start: usize, len: usize },
    Reshape(Tensor<E>),
    GatherRows { table: Tensor<E>, indices: Vec<usize> },
    PickPerRow { x: Tensor<E>, indices: Vec<usize> },
    AddRowBroadcast { mat: Tensor<E>, row: Tensor<E> },
    RepeatRows { row: Tensor<E>, n: usize },
    BceWithLogits { logits: Tensor<E>, targets: Vec<E> },
}

impl<E: Scalar> Op<E> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Sigmoid(..) => "sigmoid",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickPerRow { .. } => "pick_per_row",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![a, b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![a],
            Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::CausalSoftmax { x }
            | Op::LogSoftmax { x, .. }
            | Op::Narrow { x, .. }
            | Op::PickPerRow { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::GatherRows { table, .. } => vec![table],
            Op::AddRowBroadcast { mat, row } => vec![mat, row],
            Op::RepeatRows { row, .. } => vec![row],
            Op::BceWithLogits { logits, .. } => vec![logits],
        }
    }

    pub(crate) fn any_input_requires_grad(&self) -> bool {
        self.inputs().iter().any(|t| t.requires_grad())
    }
}

/// Gradients keyed by tensor identity, as produced by [`Tensor::backward`].
pub struct Gradients<E: Scalar> {
    map: HashMap<TensorId, Vec<E>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient buffer for `t`, treating "not reached" as all zeros.
    pub fn get_or_zeros(&self, t: &Tensor<E>) -> Vec<E> {
        self.map
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| vec![E::zero(); t.numel()])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Topologically ordered schedule of recorded operations reachable from one
/// root: every operation appears after all producers of its inputs.
pub struct GradTape<E: Scalar> {
    nodes: Vec<Tensor<E>>,
}

impl<E: Scalar> GradTape<E> {
    /// Linearize the graph under `root` (nodes that require gradients only).
    pub fn trace(root: &Tensor<E>) -> Self {
        let mut nodes = Vec::new();
        if !root.requires_grad() {
            return GradTape { nodes };
        }
        let mut visited: HashSet<TensorId> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                nodes.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for parent in t.op().inputs() {
                if parent.requires_grad() && !visited.contains(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        GradTape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in topological order.
    pub fn nodes(&self) -> &[Tensor<E>] {
        &self.nodes
    }
}

impl<E: Scalar> Tensor<E> {
    /// Reverse-mode differentiation from a scalar loss. Gradients for every
    /// reachable tensor are returned; leaf variables additionally accumulate
    /// into their `grad` slot (summing across repeated calls).
    pub fn backward(&self) -> Result<Gradients<E>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let tape = GradTape::trace(self);
        let mut grads: HashMap<TensorId, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for node in tape.nodes().iter().rev() {
            let gout = match grads.get(&node.id()) {
                Some(g) => g.clone(),
                None => continue,
            };
            if node.is_var() {
                node.accumulate_grad(&gout);
            }
            backprop_one(node, &gout, &mut grads);
        }
        Ok(Gradients { map: grads })
    }
}

fn accumulate<E: Scalar>(grads: &mut HashMap<TensorId, Vec<E>>, t: &Tensor<E>, g: Vec<E>) {
    if !t.requires_grad() {
        return;
    }
    debug_assert_eq!(g.len(), t.numel());
    match grads.get_mut(&t.id()) {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += *v;
            }
        }
        None => {
            grads.insert(t.id(), g);
        }
    }
}

/// Reduce a broadcast gradient back to the operand's element count
/// (only 1-element broadcast exists in this crate).
fn reduce_to<E: Scalar>(g: &[E], target_numel: usize) -> Vec<E> {
    if g.len() == target_numel {
        g.to_vec()
    } else {
        debug_assert_eq!(target_numel, 1);
        vec![g.iter().copied().sum()]
    }
}

#[inline]
fn bc<E: Scalar>(v: &[E], i: usize) -> E {
    v[if v.len() == 1 { 0 } else { i }]
}

fn backprop_one<E: Scalar>(node: &Tensor<E>, gout: &[E], grads: &mut HashMap<TensorId, Vec<E>>) {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, a, reduce_to(gout, a.numel()));
            accumulate(grads, b, reduce_to(gout, b.numel()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, reduce_to(gout, a.numel()));
            let neg: Vec<E> = gout.iter().map(|&g| -g).collect();
            accumulate(grads, b, reduce_to(&neg, b.numel()));
        }
        Op::Mul(a, b) => {
            let av = a.data();
            let bv = b.data();
            let ga: Vec<E> = gout.iter().enumerate().map(|(i, &g)| g * bc(&bv, i)).collect();
            let gb: Vec<E> = gout.iter().enumerate().map(|(i, &g)| g * bc(&av, i)).collect();
            drop((av, bv));
            accumulate(grads, a, reduce_to(&ga, a.numel()));
            accumulate(grads, b, reduce_to(&gb, b.numel()));
        }
        Op::Div(a, b) => {
            let av = a.data();
            let bv = b.data();
            let ga: Vec<E> = gout.iter().enumerate().map(|(i, &g)| g / bc(&bv, i)).collect();
            let gb: Vec<E> = gout
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    let d = bc(&bv, i);
                    -g * bc(&av, i) / (d * d)
                })
                .collect();
            drop((av, bv));
            accumulate(grads, a, reduce_to(&ga, a.numel()));
            accumulate(grads, b, reduce_to(&gb, b.numel()));
        }
        Op::Neg(a) => {
            accumulate(grads, a, gout.iter().map(|&g| -g).collect());
        }
        Op::Scale(a, c) => {
            accumulate(grads, a, gout.iter().map(|&g| g * *c).collect());
        }
        Op::AddScalar(a, _) => {
            accumulate(grads, a, gout.to_vec());
        }
        Op::Relu(a) => {
            let av = a.data();
            let ga = gout
                .iter()
                .zip(av.iter())
                .map(|(&g, &x)| if x > E::zero() { g } else { E::zero() })
                .collect();
            drop(av);
            accumulate(grads, a, ga);
        }
        Op::Exp(a) => {
            let out = node.data();
            let ga = gout.iter().zip(out.iter()).map(|(&g, &y)| g * y).collect();
            drop(out);
            accumulate(grads, a, ga);
        }
        Op::Ln(a) => {
            let av = a.data();
            let ga = gout.iter().zip(av.iter()).map(|(&g, &x)| g / x).collect();
            drop(av);
            accumulate(grads, a, ga);
        }
        Op::Sqrt(a) => {
            let out = node.data();
            let half = E::from_f64(0.5);
            let ga = gout.iter().zip(out.iter()).map(|(&g, &y)| g * half / y).collect();
            drop(out);
            accumulate(grads, a, ga);
        }
        Op::Sigmoid(a) => {
            let out = node.data();
            let ga = gout
                .iter()
                .zip(out.iter())
                .map(|(&g, &y)| g * y * (E::one() - y))
                .collect();
            drop(out);
            accumulate(grads, a, ga);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let av = a.data();
            let bv = b.data();
            let ga = matmul_a_bt(gout, &bv, m, n, k);
            let gb = matmul_at_b(&av, gout, m, k, n);
            drop((av, bv));
            accumulate(grads, a, ga);
            accumulate(grads, b, gb);
        }
        Op::Transpose(a) => {
            let (c, r) = (node.shape()[0], node.shape()[1]);
            accumulate(grads, a, transpose_raw(gout, c, r));
        }
        Op::Sum(a) => {
            accumulate(grads, a, vec![gout[0]; a.numel()]);
        }
        Op::SumAxis { x, axis } => {
            let (slices, len, at) = axis_slices_for(x.shape(), *axis).expect("checked in forward");
            let mut ga = vec![E::zero(); x.numel()];
            for s in 0..slices {
                for p in 0..len {
                    ga[at(s, p)] = gout[s];
                }
            }
            accumulate(grads, x, ga);
        }
        Op::Softmax { x, axis } => {
            let (slices, len, at) = axis_slices_for(x.shape(), *axis).expect("checked in forward");
            let y = node.data();
            let mut ga = vec![E::zero(); x.numel()];
            for s in 0..slices {
                let mut dot = E::zero();
                for p in 0..len {
                    let idx = at(s, p);
                    dot += gout[idx] * y[idx];
                }
                for p in 0..len {
                    let idx = at(s, p);
                    ga[idx] = y[idx] * (gout[idx] - dot);
                }
            }
            drop(y);
            accumulate(grads, x, ga);
        }
        Op::CausalSoftmax { x } => {
            let n = x.shape()[0];
            let y = node.data();
            let mut ga = vec![E::zero(); n * n];
            for i in 0..n {
                let mut dot = E::zero();
                for j in 0..=i {
                    dot += gout[i * n + j] * y[i * n + j];
                }
                for j in 0..=i {
                    ga[i * n + j] = y[i * n + j] * (gout[i * n + j] - dot);
                }
            }
            drop(y);
            accumulate(grads, x, ga);
        }
        Op::LogSoftmax { x, axis } => {
            let (slices, len, at) = axis_slices_for(x.shape(), *axis).expect("checked in forward");
            let out = node.data();
            let mut ga = vec![E::zero(); x.numel()];
            for s in 0..slices {
                let mut gsum = E::zero();
                for p in 0..len {
                    gsum += gout[at(s, p)];
                }
                for p in 0..len {
                    let idx = at(s, p);
                    ga[idx] = gout[idx] - out[idx].exp() * gsum;
                }
            }
            drop(out);
            accumulate(grads, x, ga);
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let width = *x.shape().last().unwrap();
            let rows = x.numel() / width;
            let xv = x.data();
            let gv = gain.data();
            let inv_w = E::one() / E::from_f64(width as f64);
            let mut gx = vec![E::zero(); x.numel()];
            let mut ggain = vec![E::zero(); width];
            let mut gbias = vec![E::zero(); width];
            for r in 0..rows {
                let mu = mean[r];
                let rs = rstd[r];
                let row = &xv[r * width..(r + 1) * width];
                let go = &gout[r * width..(r + 1) * width];
                // dxhat, plus gain/bias gradients
                let mut sum_dxhat = E::zero();
                let mut sum_dxhat_xhat = E::zero();
                let mut dxhat = vec![E::zero(); width];
                for j in 0..width {
                    let xhat = (row[j] - mu) * rs;
                    ggain[j] += go[j] * xhat;
                    gbias[j] += go[j];
                    let d = go[j] * gv[j];
                    dxhat[j] = d;
                    sum_dxhat += d;
                    sum_dxhat_xhat += d * xhat;
                }
                for j in 0..width {
                    let xhat = (row[j] - mu) * rs;
                    gx[r * width + j] =
                        rs * (dxhat[j] - inv_w * sum_dxhat - xhat * inv_w * sum_dxhat_xhat);
                }
            }
            drop((xv, gv));
            accumulate(grads, x, gx);
            accumulate(grads, gain, ggain);
            accumulate(grads, bias, gbias);
        }
        Op::Concat { parts, axis } => match (node.rank(), *axis) {
            (1, 0) | (2, 0) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    accumulate(grads, p, gout[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            (2, 1) => {
                let rows = node.shape()[0];
                let total_w = node.shape()[1];
                let mut col = 0;
                for p in parts {
                    let w = p.shape()[1];
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&gout[r * total_w + col..r * total_w + col + w]);
                    }
                    accumulate(grads, p, gp);
                    col += w;
                }
            }
            _ => unreachable!("concat rank/axis validated in forward"),
        },
        Op::Narrow { x, axis, start, len } => {
            let mut gx = vec![E::zero(); x.numel()];
            match (x.rank(), *axis) {
                (1, 0) => {
                    gx[*start..start + len].copy_from_slice(gout);
                }
                (2, 0) => {
                    let c = x.shape()[1];
                    gx[start * c..(start + len) * c].copy_from_slice(gout);
                }
                (2, 1) => {
                    let (r, c) = (x.shape()[0], x.shape()[1]);
                    for i in 0..r {
                        gx[i * c + start..i * c + start + len]
                            .copy_from_slice(&gout[i * len..(i + 1) * len]);
                    }
                }
                _ => unreachable!("narrow rank/axis validated in forward"),
            }
            accumulate(grads, x, gx);
        }
        Op::Reshape(a) => {
            accumulate(grads, a, gout.to_vec());
        }
        Op::GatherRows { table, indices } => {
            let dim = table.shape()[1];
            let mut gt = vec![E::zero(); table.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..dim {
                    gt[i * dim + j] += gout[r * dim + j];
                }
            }
            accumulate(grads, table, gt);
        }
        Op::PickPerRow { x, indices } => {
            let cols = x.shape()[1];
            let mut gx = vec![E::zero(); x.numel()];
            for (r, &c) in indices.iter().enumerate() {
                gx[r * cols + c] = gout[r];
            }
            accumulate(grads, x, gx);
        }
        Op::AddRowBroadcast { mat, row } => {
            let (n, d) = (mat.shape()[0], mat.shape()[1]);
            accumulate(grads, mat, gout.to_vec());
            let mut gr = vec![E::zero(); d];
            for i in 0..n {
                for j in 0..d {
                    gr[j] += gout[i * d + j];
                }
            }
            accumulate(grads, row, gr);
        }
        Op::RepeatRows { row, n } => {
            let d = row.shape()[0];
            let mut gr = vec![E::zero(); d];
            for i in 0..*n {
                for j in 0..d {
                    gr[j] += gout[i * d + j];
                }
            }
            accumulate(grads, row, gr);
        }
        Op::BceWithLogits { logits, targets } => {
            let zv = logits.data();
            let n = E::from_f64(zv.len() as f64);
            let g0 = gout[0];
            let ga: Vec<E> = zv
                .iter()
                .zip(targets)
                .map(|(&z, &t)| {
                    let sig = if z >= E::zero() {
                        E::one() / (E::one() + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (E::one() + e)
                    };
                    g0 * (sig - t) / n
                })
                .collect();
            drop(zv);
            accumulate(grads, logits, ga);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::var_from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn product_rule() {
        let x = Tensor::scalar(2.0f64);
        let x = Tensor::var_from_vec(&[1], x.to_vec()).unwrap();
        let y = Tensor::var_from_vec(&[1], vec![3.0]).unwrap();
        let f = x.mul(&y).unwrap();
        let grads = f.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[3.0]);
        assert_eq!(grads.get(&y).unwrap(), &[2.0]);
        assert_eq!(x.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn constant_loss_has_no_gradients() {
        let x = t(&[2], &[1.0, 2.0]);
        let c = Tensor::scalar(5.0f64);
        let grads = c.backward().unwrap();
        assert!(grads.get(&x).is_none());
        assert_eq!(grads.get_or_zeros(&x), vec![0.0, 0.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let x = t(&[3], &[0.3, -1.2, 2.0]);
        let f = x.softmax(0).unwrap().sum();
        let grads = f.backward().unwrap();
        for &g in grads.get(&x).unwrap() {
            assert!(g.abs() < 1e-12, "got {}", g);
        }
    }

    #[test]
    fn gradient_accumulation_doubles_for_f_plus_f() {
        let x = t(&[2], &[1.5, -0.5]);
        let f = x.mul(&x).unwrap().sum();
        let g_single = f.backward().unwrap().get(&x).unwrap().to_vec();

        let x2 = t(&[2], &[1.5, -0.5]);
        let f2 = x2.mul(&x2).unwrap().sum();
        let ff = f2.add(&f2).unwrap();
        let g_double = ff.backward().unwrap().get(&x2).unwrap().to_vec();
        for (a, b) in g_single.iter().zip(&g_double) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let x = t(&[2], &[1.0, 2.0]);
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.matmul(&x).unwrap();
        let z = y.add(&x).unwrap().sum();
        let tape = GradTape::trace(&z);
        assert!(!tape.is_empty());
        let mut seen = std::collections::HashSet::new();
        for node in tape.nodes() {
            for input in node.op().inputs() {
                if input.requires_grad() {
                    assert!(seen.contains(&input.id()), "input emitted after consumer");
                }
            }
            seen.insert(node.id());
        }
    }

    #[test]
    fn matmul_gradient_known_case() {
        // f(X) = sum(X·W): dX = 1·Wᵀ
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::from_vec(&[2, 2], vec![0.5, 0.3, 0.7, 0.1]).unwrap();
        let f = x.matmul(&w).unwrap().sum();
        let g = f.backward().unwrap().get(&x).unwrap().to_vec();
        for v in g {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }
}
