//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, so the node list is already topologically sorted. [`Graph::backward`]
//! walks it in reverse once and returns gradients for the leaves that asked
//! for them. A fresh graph is built for every training step.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::{Element, Tensor};

/// Backward rule of a [`Graph::custom`] op: receives the upstream gradient,
/// the parent values and the op output, returns one gradient per parent.
pub type CustomBackward<T> = Rc<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Result<Vec<Tensor<T>>>>;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Affine(usize, T),
    Silu(usize),
    Softmax(usize),
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<T> },
    Transpose(usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, index: Rc<[usize]> },
    RotatePairs { x: usize, cos: Rc<Tensor<T>>, sin: Rc<Tensor<T>> },
    Sum(usize),
    MaskedMse { pred: usize, target: Rc<Tensor<T>>, rows: Rc<[bool]>, count: usize },
    Custom { parents: Vec<usize>, backward: CustomBackward<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.graph.nodes.borrow()[self.id].value.shape())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn unary(&self, x: usize, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>, op: Op<T>) -> Result<Var<'_, T>> {
        let value = f(&self.nodes.borrow()[x].value)?;
        Ok(self.push(value, op, self.needs(&[x])))
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Var<'_, T>> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)?
        };
        Ok(self.push(value, op, self.needs(&[a, b])))
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom<'g>(
        &'g self,
        parents: &[Var<'g, T>],
        forward: impl FnOnce(&[&Tensor<T>]) -> Result<Tensor<T>>,
        backward: CustomBackward<T>,
    ) -> Result<Var<'g, T>> {
        let ids: Vec<usize> = parents.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
            forward(&vals)?
        };
        let needs = self.needs(&ids);
        Ok(self.push(value, Op::Custom { parents: ids, backward }, needs))
    }

    /// Runs the chain rule from `loss` back to every leaf created with
    /// `requires_grad`. The tape is consumed: every `Var` of this graph is
    /// invalid afterwards.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if loss.id >= nodes.len() {
            return Err(TensorError::Contract("loss is not on this tape".into()));
        }
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss.id].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backward_node(&nodes, node, &g, &mut grads)?;
        }
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) -> Result<()> {
    if !nodes[id].needs_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn backward_node<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, g.matmul_nt(val(*b))?)?;
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, val(*a).matmul_tn(g)?)?;
            }
        }
        Op::MatMulNt(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, g.matmul(val(*b))?)?;
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.matmul_tn(val(*a))?)?;
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.scale(-T::one()))?;
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, g.mul(val(*b))?)?;
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.mul(val(*a))?)?;
            }
        }
        Op::AddRow(x, row) => {
            accumulate(nodes, grads, *x, g.clone())?;
            if needs(*row) {
                accumulate(nodes, grads, *row, g.sum_rows())?;
            }
        }
        Op::MulRow(x, row) => {
            if needs(*x) {
                accumulate(nodes, grads, *x, g.mul_row(val(*row))?)?;
            }
            if needs(*row) {
                accumulate(nodes, grads, *row, g.mul(val(*x))?.sum_rows())?;
            }
        }
        Op::Affine(x, alpha) => {
            accumulate(nodes, grads, *x, g.scale(*alpha))?;
        }
        Op::Silu(x) => {
            let d = g.zip_map(val(*x), "silu_backward", |gv, xv| {
                let s = T::one() / (T::one() + (-xv).exp());
                gv * s * (T::one() + xv * (T::one() - s))
            })?;
            accumulate(nodes, grads, *x, d)?;
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let n = y.last_dim();
            let mut d = g.clone();
            for (drow, yrow) in d.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                let dotp = drow.iter().zip(yrow).fold(T::zero(), |s, (a, b)| s + *a * *b);
                for (dv, yv) in drow.iter_mut().zip(yrow) {
                    *dv = *yv * (*dv - dotp);
                }
            }
            accumulate(nodes, grads, *x, d)?;
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xv = val(*x);
            let gv = val(*gain);
            let n = xv.last_dim();
            let nf = T::from_f64(n as f64);
            if needs(*x) {
                let mut dx = Tensor::zeros(xv.shape());
                for (((dxr, xr), gr), &r) in dx
                    .data_mut()
                    .chunks_exact_mut(n)
                    .zip(xv.data().chunks_exact(n))
                    .zip(g.data().chunks_exact(n))
                    .zip(inv_rms)
                {
                    let proj = gr.iter().zip(gv.data()).zip(xr).fold(T::zero(), |s, ((a, b), c)| s + *a * *b * *c);
                    let k = r * r * r * proj / nf;
                    for (((d, gi), wi), xi) in dxr.iter_mut().zip(gr).zip(gv.data()).zip(xr) {
                        *d = *gi * *wi * r - k * *xi;
                    }
                }
                accumulate(nodes, grads, *x, dx)?;
            }
            if needs(*gain) {
                let mut dg = vec![T::zero(); n];
                for ((xr, gr), &r) in xv.data().chunks_exact(n).zip(g.data().chunks_exact(n)).zip(inv_rms) {
                    for ((d, xi), gi) in dg.iter_mut().zip(xr).zip(gr) {
                        *d += *gi * *xi * r;
                    }
                }
                accumulate(nodes, grads, *gain, Tensor::new(val(*gain).shape(), dg)?)?;
            }
        }
        Op::Transpose(x) => {
            accumulate(nodes, grads, *x, g.transpose()?)?;
        }
        Op::SliceRows { x, start } => {
            let (rows, cols) = val(*x).dims2("slice_rows_backward")?;
            let mut d = Tensor::zeros([rows, cols]);
            let len = g.numel();
            d.data_mut()[start * cols..start * cols + len].copy_from_slice(g.data());
            accumulate(nodes, grads, *x, d)?;
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = val(*x).dims2("slice_cols_backward")?;
            let (_, w) = g.dims2("slice_cols_backward")?;
            let mut d = Tensor::zeros([rows, cols]);
            for (drow, grow) in d.data_mut().chunks_exact_mut(cols).zip(g.data().chunks_exact(w)) {
                drow[*start..start + w].copy_from_slice(grow);
            }
            accumulate(nodes, grads, *x, d)?;
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, _) = val(p).dims2("concat_rows_backward")?;
                if needs(p) {
                    accumulate(nodes, grads, p, g.slice_rows(offset, r)?)?;
                }
                offset += r;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (_, c) = val(p).dims2("concat_cols_backward")?;
                if needs(p) {
                    accumulate(nodes, grads, p, g.slice_cols(offset, c)?)?;
                }
                offset += c;
            }
        }
        Op::GatherRows { x, index } => {
            let (rows, _) = val(*x).dims2("gather_rows_backward")?;
            accumulate(nodes, grads, *x, g.scatter_add_rows(index, rows)?)?;
        }
        Op::RotatePairs { x, cos, sin } => {
            accumulate(nodes, grads, *x, g.rotate_pairs(cos, sin, true)?)?;
        }
        Op::Sum(x) => {
            let s = g.item()?;
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), s))?;
        }
        Op::MaskedMse { pred, target, rows, count } => {
            let p = val(*pred);
            let n = p.last_dim();
            let k = T::from_f64(2.0) * g.item()? / T::from_f64(*count as f64);
            let mut d = Tensor::zeros(p.shape());
            for (((drow, prow), trow), &on) in d
                .data_mut()
                .chunks_exact_mut(n)
                .zip(p.data().chunks_exact(n))
                .zip(target.data().chunks_exact(n))
                .zip(rows.iter())
            {
                if on {
                    for ((dv, pv), tv) in drow.iter_mut().zip(prow).zip(trow) {
                        *dv = k * (*pv - *tv);
                    }
                }
            }
            accumulate(nodes, grads, *pred, d)?;
        }
        Op::Custom { parents, backward } => {
            let vals: Vec<&Tensor<T>> = parents.iter().map(|&p| val(p)).collect();
            let pg = backward(g, &vals, &node.value)?;
            if pg.len() != parents.len() {
                return Err(TensorError::Contract(format!(
                    "custom backward returned {} gradients for {} parents",
                    pg.len(),
                    parents.len()
                )));
            }
            for (&p, gp) in parents.iter().zip(pg) {
                if gp.shape() != val(p).shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "custom_backward",
                        lhs: val(p).shape().to_vec(),
                        rhs: gp.shape().to_vec(),
                    });
                }
                accumulate(nodes, grads, p, gp)?;
            }
        }
    }
    Ok(())
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    pub fn matmul(self, rhs: Self) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, |a, b| a.matmul(b), Op::MatMul(self.id, rhs.id))
    }

    /// `self · rhsᵀ`; the linear-layer product for `[out, in]` weights.
    pub fn matmul_nt(self, rhs: Self) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, |a, b| a.matmul_nt(b), Op::MatMulNt(self.id, rhs.id))
    }

    pub fn add(self, rhs: Self) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, |a, b| a.add(b), Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, |a, b| a.sub(b), Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Self) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, |a, b| a.mul(b), Op::Mul(self.id, rhs.id))
    }

    pub fn add_row(self, row: Self) -> Result<Self> {
        self.graph.binary(self.id, row.id, |a, b| a.add_row(b), Op::AddRow(self.id, row.id))
    }

    pub fn mul_row(self, row: Self) -> Result<Self> {
        self.graph.binary(self.id, row.id, |a, b| a.mul_row(b), Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, alpha: f64) -> Result<Self> {
        self.affine(alpha, 0.0)
    }

    /// `alpha * self + beta`
    pub fn affine(self, alpha: f64, beta: f64) -> Result<Self> {
        let (a, b) = (T::from_f64(alpha), T::from_f64(beta));
        self.graph.unary(self.id, |x| Ok(x.affine(a, b)), Op::Affine(self.id, a))
    }

    pub fn silu(self) -> Result<Self> {
        self.graph.unary(self.id, |x| Ok(x.silu()), Op::Silu(self.id))
    }

    pub fn softmax_lastdim(self) -> Result<Self> {
        self.graph.unary(self.id, |x| Ok(x.softmax_lastdim()), Op::Softmax(self.id))
    }

    pub fn rms_norm(self, gain: Self, eps: f64) -> Result<Self> {
        let (value, inv_rms) = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].value.rms_norm(&nodes[gain.id].value, T::from_f64(eps))?
        };
        let needs = self.graph.needs(&[self.id, gain.id]);
        Ok(self.graph.push(value, Op::RmsNorm { x: self.id, gain: gain.id, inv_rms }, needs))
    }

    pub fn transpose(self) -> Result<Self> {
        self.graph.unary(self.id, |x| x.transpose(), Op::Transpose(self.id))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Self> {
        self.graph.unary(self.id, |x| x.slice_rows(start, len), Op::SliceRows { x: self.id, start })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        self.graph.unary(self.id, |x| x.slice_cols(start, len), Op::SliceCols { x: self.id, start })
    }

    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        Self::concat(parts, true)
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        Self::concat(parts, false)
    }

    fn concat(parts: &[Self], rows: bool) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of zero vars".into()))?;
        let graph = first.graph;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = graph.nodes.borrow();
            let vals: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
            if rows {
                Tensor::concat_rows(&vals)?
            } else {
                Tensor::concat_cols(&vals)?
            }
        };
        let needs = graph.needs(&ids);
        let op = if rows { Op::ConcatRows(ids) } else { Op::ConcatCols(ids) };
        Ok(graph.push(value, op, needs))
    }

    pub fn gather_rows(self, index: Rc<[usize]>) -> Result<Self> {
        let ix = index.clone();
        self.graph.unary(self.id, move |x| x.gather_rows(&ix), Op::GatherRows { x: self.id, index })
    }

    pub fn rotate_pairs(self, cos: Rc<Tensor<T>>, sin: Rc<Tensor<T>>) -> Result<Self> {
        let (c, s) = (cos.clone(), sin.clone());
        self.graph.unary(self.id, move |x| x.rotate_pairs(&c, &s, false), Op::RotatePairs { x: self.id, cos, sin })
    }

    pub fn sum(self) -> Result<Self> {
        self.graph.unary(self.id, |x| Ok(Tensor::scalar(x.sum_all())), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean squared error against a constant target over the rows selected
    /// by `rows` (one flag per leading-axis row).
    pub fn masked_mse(self, target: Rc<Tensor<T>>, rows: Rc<[bool]>) -> Result<Self> {
        let (value, count) = {
            let nodes = self.graph.nodes.borrow();
            let p = &nodes[self.id].value;
            if p.shape() != target.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_mse",
                    lhs: p.shape().to_vec(),
                    rhs: target.shape().to_vec(),
                });
            }
            let n = p.last_dim();
            if rows.len() * n != p.numel() {
                return Err(TensorError::Contract(format!(
                    "masked_mse: mask has {} rows, prediction has {}",
                    rows.len(),
                    p.numel() / n.max(1)
                )));
            }
            let selected = rows.iter().filter(|&&r| r).count();
            if selected == 0 {
                return Err(TensorError::Contract("masked_mse: mask selects nothing".into()));
            }
            let mut acc = T::zero();
            for ((prow, trow), &on) in p.data().chunks_exact(n).zip(target.data().chunks_exact(n)).zip(rows.iter()) {
                if on {
                    for (a, b) in prow.iter().zip(trow) {
                        let d = *a - *b;
                        acc += d * d;
                    }
                }
            }
            let count = selected * n;
            (Tensor::scalar(acc / T::from_f64(count as f64)), count)
        };
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(value, Op::MaskedMse { pred: self.id, target, rows, count }, needs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let loss = x.mul(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::from_fn([2, 3], |i| i as f32));
        let loss = x.sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([2]));
        let c = g.constant(Tensor::full([2], 2.0));
        let loss = x.mul(c).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = x.add(x).unwrap().mul(x).unwrap(); // 2x²
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn masked_mse_contract() {
        let g = Graph::<f64>::new();
        let p = g.param(Tensor::ones([2, 2]));
        let t = Rc::new(Tensor::zeros([2, 2]));
        assert!(p.masked_mse(t.clone(), Rc::from(vec![false, false])).is_err());
        let loss = p.masked_mse(t, Rc::from(vec![true, true])).unwrap();
        assert_eq!(loss.value().item().unwrap(), 1.0);
    }
}
