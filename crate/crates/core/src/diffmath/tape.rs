use crate::scalar::Scalar;

use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prim<S> {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    Exp,
    Log,
    Tanh,
    Relu,
    SoftmaxRows,
    /// Row-wise log-sum-exp; `[r, c] -> [r, 1]`.
    LogsumexpRows,
    Sum,
    Mean,
    Transpose,
    /// `[r, c] + [c]` (or `[1, c]`) added to every row.
    AddRow,
    Scale(S),
    Square,
    Sqrt,
    ClampMin(S),
}

impl<S> Prim<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::MatMul => "matmul",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::Tanh => "tanh",
            Prim::Relu => "relu",
            Prim::SoftmaxRows => "softmax-rows",
            Prim::LogsumexpRows => "logsumexp-rows",
            Prim::Sum => "sum",
            Prim::Mean => "mean",
            Prim::Transpose => "transpose",
            Prim::AddRow => "broadcast-add-row",
            Prim::Scale(_) => "scale",
            Prim::Square => "square",
            Prim::Sqrt => "sqrt",
            Prim::ClampMin(_) => "clampmin",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Prim::Add | Prim::Sub | Prim::Mul | Prim::MatMul | Prim::AddRow => 2,
            _ => 1,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    /// `None` for leaves.
    op: Option<(Prim<S>, [usize; 2])>,
}

/// Ordered record of primitive ops. Inputs of node `k` always precede `k`.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node { value, op: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant_full(&mut self, shape: &[usize], value: S) -> NodeId {
        self.leaf(Tensor::full(shape, value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, id: NodeId) -> S {
        self.value(id).data()[0]
    }

    /// Evaluates `prim` on `inputs` and records the result.
    pub fn apply(&mut self, prim: Prim<S>, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        if inputs.len() != prim.arity() {
            return Err(DiffError::Arity {
                op: prim.name(),
                expected: prim.arity(),
                got: inputs.len(),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(DiffError::UnknownNode(id.0));
            }
        }
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|id| &self.nodes[id.0].value);
        let value = forward(prim, a, b)?;
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: prim.name() });
        }
        let ids = [inputs[0].0, inputs.get(1).map_or(usize::MAX, |id| id.0)];
        self.nodes.push(Node {
            value,
            op: Some((prim, ids)),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::MatMul, &[a, b])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Log, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Tanh, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Relu, &[a])
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::SoftmaxRows, &[a])
    }
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::LogsumexpRows, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Mean, &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Transpose, &[a])
    }
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::AddRow, &[m, row])
    }
    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId, DiffError> {
        self.apply(Prim::Scale(c), &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Prim::Sqrt, &[a])
    }
    pub fn clamp_min(&mut self, a: NodeId, floor: S) -> Result<NodeId, DiffError> {
        self.apply(Prim::ClampMin(floor), &[a])
    }

    /// `x W + b`, the affine map used by every dense layer.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>, DiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode(loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for k in (0..=loss.0).rev() {
            let node = &self.nodes[k];
            let Some((prim, ids)) = node.op else {
                continue;
            };
            let Some(g) = grads[k].take() else {
                continue;
            };
            let a = &self.nodes[ids[0]].value;
            let b = (ids[1] != usize::MAX).then(|| &self.nodes[ids[1]].value);
            let (ga, gb) = backward_rule(prim, a, b, &node.value, &g)?;
            accumulate(&mut grads, ids[0], ga, prim.name())?;
            if let Some(gb) = gb {
                accumulate(&mut grads, ids[1], gb, prim.name())?;
            }
        }

        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (None, Some(g)) => Some(g),
                _ => None,
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads: leaves,
            shapes,
        })
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    idx: usize,
    g: Tensor<S>,
    op: &'static str,
) -> Result<(), DiffError> {
    if !g.is_finite() {
        return Err(DiffError::NonFiniteGradient { op });
    }
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Gradient of a scalar loss with respect to each leaf of a tape.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `id`; exact zeros when the node does not reach the loss.
    pub fn get(&self, id: NodeId) -> Tensor<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind on later calls.
    pub fn take(&mut self, id: NodeId) -> Tensor<S> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn is_connected(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn shape_err<S: Scalar>(op: &'static str, ts: &[&Tensor<S>]) -> DiffError {
    DiffError::Shape {
        op,
        shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn rows_cols<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize), DiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err(op, &[t])),
    }
}

fn forward<S: Scalar>(
    prim: Prim<S>,
    a: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>, DiffError> {
    let name = prim.name();
    let same_shape = |b: &Tensor<S>| -> Result<(), DiffError> {
        if a.shape() == b.shape() {
            Ok(())
        } else {
            Err(shape_err(name, &[a, b]))
        }
    };
    Ok(match prim {
        Prim::Add => {
            let b = b.expect("arity checked");
            same_shape(b)?;
            a.zip_map(b, |x, y| x + y)
        }
        Prim::Sub => {
            let b = b.expect("arity checked");
            same_shape(b)?;
            a.zip_map(b, |x, y| x - y)
        }
        Prim::Mul => {
            let b = b.expect("arity checked");
            same_shape(b)?;
            a.zip_map(b, |x, y| x * y)
        }
        Prim::MatMul => a.matmul(b.expect("arity checked"))?,
        Prim::Exp => a.map(S::exp),
        Prim::Log => a.map(S::ln),
        Prim::Tanh => a.map(S::tanh),
        Prim::Relu => a.map(|x| if x > S::zero() { x } else { S::zero() }),
        Prim::SoftmaxRows => {
            let (r, c) = rows_cols(name, a)?;
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = a.row(i);
                let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                let exps: Vec<S> = row.iter().map(|&x| (x - max).exp()).collect();
                let total: S = exps.iter().fold(S::zero(), |s, &e| s + e);
                out.extend(exps.into_iter().map(|e| e / total));
            }
            Tensor::new(vec![r, c], out)?
        }
        Prim::LogsumexpRows => {
            let (r, _) = rows_cols(name, a)?;
            let out = (0..r).map(|i| logsumexp(a.row(i))).collect();
            Tensor::new(vec![r, 1], out)?
        }
        Prim::Sum => Tensor::scalar(a.data().iter().fold(S::zero(), |s, &x| s + x)),
        Prim::Mean => {
            let n = S::from_usize(a.len()).expect("length fits scalar");
            Tensor::scalar(a.data().iter().fold(S::zero(), |s, &x| s + x) / n)
        }
        Prim::Transpose => a.transpose()?,
        Prim::AddRow => {
            let b = b.expect("arity checked");
            let (r, c) = rows_cols(name, a)?;
            let row_ok = match b.shape() {
                [n] => *n == c,
                [1, n] => *n == c,
                _ => false,
            };
            if !row_ok {
                return Err(shape_err(name, &[a, b]));
            }
            let bias = b.data();
            let mut data = a.data().to_vec();
            for i in 0..r {
                for (x, &bj) in data[i * c..(i + 1) * c].iter_mut().zip(bias) {
                    *x = *x + bj;
                }
            }
            Tensor::new(vec![r, c], data)?
        }
        Prim::Scale(k) => a.map(|x| x * k),
        Prim::Square => a.map(|x| x * x),
        Prim::Sqrt => a.map(S::sqrt),
        Prim::ClampMin(floor) => a.map(|x| if x > floor { x } else { floor }),
    })
}

pub(crate) fn logsumexp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    if !max.is_finite() {
        return max;
    }
    let total = row.iter().fold(S::zero(), |s, &x| s + (x - max).exp());
    max + total.ln()
}

type GradPair<S> = (Tensor<S>, Option<Tensor<S>>);

fn backward_rule<S: Scalar>(
    prim: Prim<S>,
    a: &Tensor<S>,
    b: Option<&Tensor<S>>,
    y: &Tensor<S>,
    g: &Tensor<S>,
) -> Result<GradPair<S>, DiffError> {
    let two = S::lit(2.0);
    Ok(match prim {
        Prim::Add => (g.clone(), Some(g.clone())),
        Prim::Sub => (g.clone(), Some(g.map(|x| -x))),
        Prim::Mul => {
            let b = b.expect("binary op");
            (g.zip_map(b, |gi, bi| gi * bi), Some(g.zip_map(a, |gi, ai| gi * ai)))
        }
        Prim::MatMul => {
            let b = b.expect("binary op");
            let ga = g.matmul(&b.transpose()?)?;
            let gb = a.transpose()?.matmul(g)?;
            (ga, Some(gb))
        }
        Prim::Exp => (g.zip_map(y, |gi, yi| gi * yi), None),
        Prim::Log => (g.zip_map(a, |gi, ai| gi / ai), None),
        Prim::Tanh => (g.zip_map(y, |gi, yi| gi * (S::one() - yi * yi)), None),
        Prim::Relu => (
            g.zip_map(a, |gi, ai| if ai > S::zero() { gi } else { S::zero() }),
            None,
        ),
        Prim::SoftmaxRows => {
            let (r, c) = rows_cols(prim.name(), y)?;
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot = yr.iter().zip(gr).fold(S::zero(), |s, (&yi, &gi)| s + yi * gi);
                out.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            (Tensor::new(vec![r, c], out)?, None)
        }
        Prim::LogsumexpRows => {
            let (r, c) = rows_cols(prim.name(), a)?;
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let lse = y.data()[i];
                let gi = g.data()[i];
                out.extend(a.row(i).iter().map(|&x| gi * (x - lse).exp()));
            }
            (Tensor::new(vec![r, c], out)?, None)
        }
        Prim::Sum => (Tensor::full(a.shape(), g.data()[0]), None),
        Prim::Mean => {
            let n = S::from_usize(a.len()).expect("length fits scalar");
            (Tensor::full(a.shape(), g.data()[0] / n), None)
        }
        Prim::Transpose => (g.transpose()?, None),
        Prim::AddRow => {
            let b = b.expect("binary op");
            let (r, c) = rows_cols(prim.name(), g)?;
            let mut col_sums = vec![S::zero(); c];
            for i in 0..r {
                for (s, &x) in col_sums.iter_mut().zip(g.row(i)) {
                    *s = *s + x;
                }
            }
            (g.clone(), Some(Tensor::new(b.shape().to_vec(), col_sums)?))
        }
        Prim::Scale(k) => (g.map(|x| x * k), None),
        Prim::Square => (g.zip_map(a, |gi, ai| two * ai * gi), None),
        Prim::Sqrt => (g.zip_map(y, |gi, yi| gi / (two * yi)), None),
        Prim::ClampMin(floor) => (
            g.zip_map(a, |gi, ai| if ai > floor { gi } else { S::zero() }),
            None,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = mat(&[&[1.0, -2.0], &[3.5, 4.0], &[0.0, 7.0]]);
        let i = tape.leaf(Tensor::identity(3));
        let x = tape.leaf(a.clone());
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn logsumexp_of_zeros_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[0.0, 0.0]]));
        let y = tape.logsumexp_rows(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert!((tape.item(y) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[1000.0, 1000.0]]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let l = tape.logsumexp_rows(x).unwrap();
        assert!((tape.item(l) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let _dead = tape.exp(unused).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(!grads.is_connected(unused));
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[3, 2]));
        match tape.add(a, b) {
            Err(DiffError::Shape { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![3, 2]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(tape.matmul(a, a).is_err());
        let row = tape.leaf(Tensor::<f64>::zeros(&[2]));
        assert!(tape.add_row(a, row).is_err());
    }

    #[test]
    fn non_finite_output_names_primitive() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(tape.log(x), Err(DiffError::NonFinite { op: "log" }));
        let big = tape.leaf(Tensor::vector(vec![1e6]));
        assert_eq!(tape.exp(big), Err(DiffError::NonFinite { op: "exp" }));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.exp(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(DiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn clamp_and_relu_pass_gradient_only_above_floor() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.5, 2.0]));
        let c = tape.clamp_min(x, 0.5).unwrap();
        let r = tape.relu(x).unwrap();
        let both = tape.add(c, r).unwrap();
        let s = tape.sum(both).unwrap();
        assert_eq!(tape.item(s), 0.5 + 0.5 + 2.0 + 0.0 + 0.5 + 2.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn wrong_arity_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        assert!(matches!(
            tape.apply(Prim::Add, &[x]),
            Err(DiffError::Arity { .. })
        ));
    }
}
