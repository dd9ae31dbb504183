use rand::Rng;

use super::kernels::{self, sigmoid_scalar};
use super::{Scalar, Tensor};
use crate::error::{argument, state, Result};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Reparameterize {
        mu: NodeId,
        logvar: NodeId,
        eps: Tensor<T>,
    },
    KlGaussian {
        mu: NodeId,
        logvar: NodeId,
    },
    BernoulliNll {
        logits: NodeId,
        target: Tensor<T>,
    },
    Sum(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted and `backward` walks it in reverse.
#[derive(Debug)]
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss, indexed by parameter slot.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f64> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, slot: usize) -> Option<&Tensor<T>> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Gradients for slots `0..n`, zero-filled where the loss does not depend
    /// on a parameter.
    pub fn dense(self, params: &[Tensor<T>]) -> Vec<Tensor<T>> {
        let mut slots = self.slots;
        slots.resize_with(params.len(), || None);
        slots
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Trainable leaf; its gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, value: &Tensor<T>) -> NodeId {
        self.push(Op::Param(slot), value.clone())
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            value,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = kernels::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            value,
        ))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let value = kernels::dense_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(Op::Dense { x, w, b }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = kernels::relu(self.value(x));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = kernels::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Flattens every dimension after the first.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let batch = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, &[batch, rest])
    }

    /// Columns `start..start + len` of a rank-2 node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(x);
        let &[rows, cols] = src.shape() else {
            return Err(argument("slice_cols needs a rank-2 tensor"));
        };
        if start + len > cols {
            return Err(argument(format!(
                "columns {start}..{} of {cols}",
                start + len
            )));
        }
        let data: Vec<T> = src
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::from_vec(&[rows, len], data)?;
        Ok(self.push(Op::SliceCols { x, start }, value))
    }

    /// Samples `z = mu + exp(logvar / 2) * eps`; the noise is a constant of
    /// the tape.
    pub fn reparameterize<R: Rng + ?Sized>(
        &mut self,
        mu: NodeId,
        logvar: NodeId,
        rng: &mut R,
    ) -> Result<NodeId> {
        let (z, eps) = kernels::reparameterize(self.value(mu), self.value(logvar), rng)?;
        Ok(self.push(Op::Reparameterize { mu, logvar, eps }, z))
    }

    pub fn kl_gaussian(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        let v = kernels::kl_gaussian(self.value(mu), self.value(logvar))?;
        Ok(self.push(Op::KlGaussian { mu, logvar }, Tensor::scalar(v)))
    }

    pub fn bernoulli_nll(&mut self, logits: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let v = kernels::bernoulli_nll(self.value(logits), &target)?;
        Ok(self.push(Op::BernoulliNll { logits, target }, Tensor::scalar(v)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v: T = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(argument("add needs equal shapes"));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value)
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| state("loss node has not been evaluated on this graph"))?;
        if node.value.len() != 1 {
            return Err(argument(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(node.value.shape(), vec![T::one()])?);
        let mut out = Gradients { slots: Vec::new() };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |id: NodeId, delta: Tensor<T>| match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(slot) => {
                    if out.slots.len() <= *slot {
                        out.slots.resize_with(slot + 1, || None);
                    }
                    match &mut out.slots[*slot] {
                        Some(existing) => existing.add_assign(&g),
                        s @ None => *s = Some(g),
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    // Images enter as constants; their gradient is never used.
                    let want_dx = !matches!(self.nodes[x.0].op, Op::Constant);
                    let (dx, dw, db) = kernels::conv2d_backward_with(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *stride,
                        *pad,
                        want_dx,
                    )?;
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *stride,
                        *pad,
                    )?;
                    acc(*x, dx);
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = kernels::dense_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                    )?;
                    acc(*x, dx);
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    acc(*x, Tensor::from_vec(xv.shape(), data)?);
                }
                Op::Sigmoid(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect();
                    acc(*x, Tensor::from_vec(node.value.shape(), data)?);
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    acc(*x, g.reshape(&shape)?);
                }
                Op::SliceCols { x, start } => {
                    let src = &self.nodes[x.0].value;
                    let cols = src.shape()[1];
                    let len = node.value.shape()[1];
                    let mut d = Tensor::zeros(src.shape());
                    for (drow, grow) in d
                        .data_mut()
                        .chunks_exact_mut(cols)
                        .zip(g.data().chunks_exact(len))
                    {
                        drow[*start..start + len].copy_from_slice(grow);
                    }
                    acc(*x, d);
                }
                Op::Reparameterize { mu, logvar, eps } => {
                    let lv = &self.nodes[logvar.0].value;
                    let half = T::of(0.5);
                    let dlv = g
                        .data()
                        .iter()
                        .zip(eps.data())
                        .zip(lv.data())
                        .map(|((&g, &e), &l)| g * e * half * (half * l).exp())
                        .collect();
                    acc(*logvar, Tensor::from_vec(lv.shape(), dlv)?);
                    acc(*mu, g);
                }
                Op::KlGaussian { mu, logvar } => {
                    let s = g.item();
                    let half = T::of(0.5);
                    let (mv, lv) = (&self.nodes[mu.0].value, &self.nodes[logvar.0].value);
                    acc(*mu, mv.map(|m| s * m));
                    acc(*logvar, lv.map(|l| s * half * (l.exp() - T::one())));
                }
                Op::BernoulliNll { logits, target } => {
                    let s = g.item();
                    let lv = &self.nodes[logits.0].value;
                    let data = lv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&l, &x)| s * (sigmoid_scalar(l) - x))
                        .collect();
                    acc(*logits, Tensor::from_vec(lv.shape(), data)?);
                }
                Op::Sum(x) => {
                    let s = g.item();
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    acc(*x, Tensor::from_fn(&shape, |_| s));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    acc(*x, g.map(|v| v * f));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::Rng as ChaCha;
    use rand::SeedableRng;

    #[test]
    fn sum_gradient_is_ones() {
        let p = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(0, &p);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_sum_of_squares_gradient_is_identity() {
        // sum(p^2)/2 expressed as KL with logvar = 0 gives exactly p.
        let p = Tensor::<f64>::from_vec(&[1, 4], vec![1.5, -2.0, 0.25, 0.0]).unwrap();
        let mut g = Graph::new();
        let mu = g.param(0, &p);
        let lv = g.constant(Tensor::zeros(&[1, 4]));
        let kl = g.kl_gaussian(mu, lv).unwrap();
        assert!((g.value(kl).item() - (1.5f64.powi(2) + 4.0 + 0.0625) / 2.0).abs() < 1e-15);
        let grads = g.backward(kl).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), p.data());
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(crate::Error::Argument(_))));
        let other = {
            let mut h = Graph::<f64>::new();
            for _ in 0..5 {
                h.constant(Tensor::zeros(&[1]));
            }
            h.sum(NodeId(4))
        };
        assert!(matches!(g.backward(other), Err(crate::Error::State(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        let p = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(0, &p);
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn reparameterize_gradient_skips_noise() {
        let mut rng = ChaCha::seed_from_u64(0);
        let mu0 = Tensor::<f64>::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
        let lv0 = Tensor::<f64>::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let mu = g.param(0, &mu0);
        let lv = g.param(1, &lv0);
        let z = g
            .reparameterize(mu, lv, &mut ChaCha::seed_from_u64(9))
            .unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(0).unwrap().data().iter().all(|&v| v == 1.0));
        let (_, eps) = kernels::reparameterize(&mu0, &lv0, &mut ChaCha::seed_from_u64(9)).unwrap();
        for i in 0..6 {
            let expected = eps.data()[i] * 0.5 * (0.5 * lv0.data()[i]).exp();
            assert!((grads.get(1).unwrap().data()[i] - expected).abs() < 1e-15);
        }
    }
}
