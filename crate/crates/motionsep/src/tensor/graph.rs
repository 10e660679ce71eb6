//! The recorded computation graph and its backward pass.

use super::conv::{self, ConvDims};
use super::{conv_transpose_extent, Activation, Real, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Activation {
        input: NodeId,
        kind: Activation,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Sub {
        lhs: NodeId,
        rhs: NodeId,
    },
    MulScalar {
        input: NodeId,
        factor: f64,
    },
    SumSquares {
        input: NodeId,
    },
    SumN {
        parts: Vec<NodeId>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Select {
        input: NodeId,
        index: usize,
    },
    Reshape {
        input: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op,
}

/// Operations recorded in execution order; one backward pass fills
/// the gradients of every `requires_grad` leaf reachable from the
/// loss. A graph belongs to a single fit run.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Gradient of the last backward pass w.r.t. node `id`, if the
    /// node participates in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        self.nodes.len() - 1
    }

    fn check_finite(data: &[T], context: &'static str) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { context })
        }
    }

    /// Transposed 2-D convolution of a `[c_in, h, w]` input with a
    /// `[c_in, c_out, k, k]` weight; optional per-channel bias.
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let in_shape = self.nodes[input].value.shape().to_vec();
        let w_shape = self.nodes[weight].value.shape().to_vec();
        if in_shape.len() != 3 || w_shape.len() != 4 || w_shape[2] != w_shape[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: in_shape,
                rhs: w_shape,
            });
        }
        if in_shape[0] != w_shape[0] {
            return Err(TensorError::ChannelMismatch {
                input_channels: in_shape[0],
                weight_channels: w_shape[0],
            });
        }
        let d = ConvDims {
            c_in: in_shape[0],
            c_out: w_shape[1],
            k: w_shape[2],
            h: in_shape[1],
            w: in_shape[2],
            oh: conv_transpose_extent(in_shape[1], stride, padding, w_shape[2])?,
            ow: conv_transpose_extent(in_shape[2], stride, padding, w_shape[2])?,
            stride,
            padding,
        };
        let mut out = conv::forward(self.nodes[input].value.data(), self.nodes[weight].value.data(), &d);
        let mut requires = self.nodes[input].requires_grad || self.nodes[weight].requires_grad;
        if let Some(b) = bias {
            let b_shape = self.nodes[b].value.shape().to_vec();
            if b_shape != [d.c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: b_shape,
                    rhs: vec![d.c_out],
                });
            }
            let plane = d.oh * d.ow;
            let b_data = self.nodes[b].value.data().to_vec();
            for (co, bv) in b_data.iter().enumerate() {
                for v in &mut out[co * plane..(co + 1) * plane] {
                    *v = *v + *bv;
                }
            }
            requires |= self.nodes[b].requires_grad;
        }
        Self::check_finite(&out, "conv_transpose2d")?;
        let value = Tensor::from_parts(vec![d.c_out, d.oh, d.ow], out);
        Ok(self.push(
            value,
            requires,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId> {
        kind.validate()?;
        let x = &self.nodes[input].value;
        let out: Vec<T> = x.data().iter().map(|&v| kind.apply(v)).collect();
        Self::check_finite(&out, "activation")?;
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let requires = self.nodes[input].requires_grad;
        Ok(self.push(value, requires, Op::Activation { input, kind }))
    }

    fn binary(&mut self, lhs: NodeId, rhs: NodeId, op_name: &'static str) -> Result<(Vec<usize>, bool)> {
        let ls = self.nodes[lhs].value.shape();
        let rs = self.nodes[rhs].value.shape();
        if ls != rs {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        Ok((
            ls.to_vec(),
            self.nodes[lhs].requires_grad || self.nodes[rhs].requires_grad,
        ))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (shape, requires) = self.binary(lhs, rhs, "add")?;
        let out: Vec<T> = self.nodes[lhs]
            .value
            .data()
            .iter()
            .zip(self.nodes[rhs].value.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Self::check_finite(&out, "add")?;
        Ok(self.push(Tensor::from_parts(shape, out), requires, Op::Add { lhs, rhs }))
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (shape, requires) = self.binary(lhs, rhs, "sub")?;
        let out: Vec<T> = self.nodes[lhs]
            .value
            .data()
            .iter()
            .zip(self.nodes[rhs].value.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Self::check_finite(&out, "sub")?;
        Ok(self.push(Tensor::from_parts(shape, out), requires, Op::Sub { lhs, rhs }))
    }

    pub fn mul_scalar(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let f = T::from_f64(factor);
        let x = &self.nodes[input].value;
        let out: Vec<T> = x.data().iter().map(|&v| v * f).collect();
        Self::check_finite(&out, "mul_scalar")?;
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let requires = self.nodes[input].requires_grad;
        Ok(self.push(value, requires, Op::MulScalar { input, factor }))
    }

    /// Sum of squares of all elements, reduced in index order.
    pub fn sum_squares(&mut self, input: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.nodes[input].value.data() {
            acc = acc + v * v;
        }
        if !acc.is_finite() {
            return Err(TensorError::NonFinite {
                context: "sum_squares",
            });
        }
        let requires = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::from_parts(vec![], vec![acc]),
            requires,
            Op::SumSquares { input },
        ))
    }

    /// Sum of scalar nodes, in list order.
    pub fn sum_n(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let mut acc = T::zero();
        let mut requires = false;
        for &p in &parts {
            let v = &self.nodes[p].value;
            if !v.is_scalar() {
                return Err(TensorError::BackwardNonScalar {
                    shape: v.shape().to_vec(),
                });
            }
            acc = acc + v.data()[0];
            requires |= self.nodes[p].requires_grad;
        }
        if !acc.is_finite() {
            return Err(TensorError::NonFinite { context: "sum_n" });
        }
        Ok(self.push(
            Tensor::from_parts(vec![], vec![acc]),
            requires,
            Op::SumN { parts },
        ))
    }

    /// Concatenates 1-D (or scalar) nodes into one vector.
    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let mut out = Vec::new();
        let mut requires = false;
        for &p in &parts {
            out.extend_from_slice(self.nodes[p].value.data());
            requires |= self.nodes[p].requires_grad;
        }
        let n = out.len();
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            requires,
            Op::Concat { parts },
        ))
    }

    /// Picks one element of a vector node as a scalar.
    pub fn select(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        if index >= x.len() {
            return Err(TensorError::IndexOutOfRange {
                index,
                extent: x.len(),
            });
        }
        let v = x.data()[index];
        let requires = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::from_parts(vec![], vec![v]),
            requires,
            Op::Select { input, index },
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[input].value.reshaped(shape)?;
        let requires = self.nodes[input].requires_grad;
        Ok(self.push(value, requires, Op::Reshape { input }))
    }

    /// Clears gradients so another backward pass may run.
    pub fn reset(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` for
    /// every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        let loss_value = &self.nodes[loss].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::BackwardNonScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.nodes[loss].grad = Some(vec![T::one()]);
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let gout = self.nodes[id].grad.clone().unwrap();
                    let in_shape = self.nodes[input].value.shape();
                    let w_shape = self.nodes[weight].value.shape();
                    let out_shape = self.nodes[id].value.shape();
                    let d = ConvDims {
                        c_in: in_shape[0],
                        c_out: w_shape[1],
                        k: w_shape[2],
                        h: in_shape[1],
                        w: in_shape[2],
                        oh: out_shape[1],
                        ow: out_shape[2],
                        stride,
                        padding,
                    };
                    if self.nodes[input].requires_grad {
                        let gin = conv::backward_input(&gout, self.nodes[weight].value.data(), &d);
                        self.accumulate(input, &gin);
                    }
                    if self.nodes[weight].requires_grad {
                        let gw = conv::backward_weight(self.nodes[input].value.data(), &gout, &d);
                        self.accumulate(weight, &gw);
                    }
                    if let Some(b) = bias {
                        if self.nodes[b].requires_grad {
                            let plane = d.oh * d.ow;
                            let gb: Vec<T> = (0..d.c_out)
                                .map(|co| {
                                    let mut acc = T::zero();
                                    for &g in &gout[co * plane..(co + 1) * plane] {
                                        acc = acc + g;
                                    }
                                    acc
                                })
                                .collect();
                            self.accumulate(b, &gb);
                        }
                    }
                }
                Op::Activation { input, kind } => {
                    if self.nodes[input].requires_grad {
                        let gout = self.nodes[id].grad.as_ref().unwrap();
                        let gin: Vec<T> = self.nodes[input]
                            .value
                            .data()
                            .iter()
                            .zip(gout)
                            .map(|(&x, &g)| g * kind.derivative(x))
                            .collect();
                        self.accumulate(input, &gin);
                    }
                }
                Op::Add { lhs, rhs } => {
                    let gout = self.nodes[id].grad.clone().unwrap();
                    if self.nodes[lhs].requires_grad {
                        self.accumulate(lhs, &gout);
                    }
                    if self.nodes[rhs].requires_grad {
                        self.accumulate(rhs, &gout);
                    }
                }
                Op::Sub { lhs, rhs } => {
                    let gout = self.nodes[id].grad.clone().unwrap();
                    if self.nodes[lhs].requires_grad {
                        self.accumulate(lhs, &gout);
                    }
                    if self.nodes[rhs].requires_grad {
                        let neg: Vec<T> = gout.iter().map(|&g| -g).collect();
                        self.accumulate(rhs, &neg);
                    }
                }
                Op::MulScalar { input, factor } => {
                    if self.nodes[input].requires_grad {
                        let f = T::from_f64(factor);
                        let gin: Vec<T> = self.nodes[id]
                            .grad
                            .as_ref()
                            .unwrap()
                            .iter()
                            .map(|&g| g * f)
                            .collect();
                        self.accumulate(input, &gin);
                    }
                }
                Op::SumSquares { input } => {
                    if self.nodes[input].requires_grad {
                        let g = self.nodes[id].grad.as_ref().unwrap()[0];
                        let two = T::from_f64(2.0);
                        let gin: Vec<T> = self.nodes[input]
                            .value
                            .data()
                            .iter()
                            .map(|&x| two * x * g)
                            .collect();
                        self.accumulate(input, &gin);
                    }
                }
                Op::SumN { parts } => {
                    let g = self.nodes[id].grad.as_ref().unwrap()[0];
                    for p in parts {
                        if self.nodes[p].requires_grad {
                            self.accumulate(p, &[g]);
                        }
                    }
                }
                Op::Concat { parts } => {
                    let gout = self.nodes[id].grad.clone().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p].value.len();
                        if self.nodes[p].requires_grad {
                            let slice = gout[offset..offset + n].to_vec();
                            self.accumulate(p, &slice);
                        }
                        offset += n;
                    }
                }
                Op::Select { input, index } => {
                    if self.nodes[input].requires_grad {
                        let g = self.nodes[id].grad.as_ref().unwrap()[0];
                        let mut gin = vec![T::zero(); self.nodes[input].value.len()];
                        gin[index] = g;
                        self.accumulate(input, &gin);
                    }
                }
                Op::Reshape { input } => {
                    if self.nodes[input].requires_grad {
                        let gout = self.nodes[id].grad.clone().unwrap();
                        self.accumulate(input, &gout);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[T]) {
        let n = self.nodes[id].value.len();
        let grad = self.nodes[id].grad.get_or_insert_with(|| vec![T::zero(); n]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        // loss = sum(w * w), w = [1, 2] -> grad = [2, 4]
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let loss = g.sum_squares(w).unwrap();
        assert_eq!(g.value(loss).data()[0], 5.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![], vec![0.0]).unwrap(), true);
        let y = g.activation(w, Activation::Tanh).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(
            g.backward(w),
            Err(TensorError::BackwardNonScalar { .. })
        ));
    }

    #[test]
    fn double_backward_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![], vec![3.0]).unwrap(), true);
        let loss = g.sum_squares(w).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(TensorError::DoubleBackward)));
        g.reset();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn conv_transpose_identity_scatter() {
        // 1x1x1 input of 1 against an all-ones 2x2 kernel -> 1x2x2 of ones.
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(), false);
        let w = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap(), false);
        let y = g.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0; 4]);
    }

    #[test]
    fn conv_transpose_output_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![64, 1, 1]), false);
        let w = g.leaf(Tensor::zeros(vec![64, 128, 4, 4]), false);
        let y = g.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[128, 4, 4]);

        let x2 = g.leaf(Tensor::zeros(vec![128, 4, 4]), false);
        let w2 = g.leaf(Tensor::zeros(vec![128, 64, 4, 4]), false);
        let y2 = g.conv_transpose2d(x2, w2, None, 2, 1).unwrap();
        assert_eq!(g.value(y2).shape(), &[64, 8, 8]);
    }

    #[test]
    fn conv_transpose_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![3, 2, 2]), false);
        let w = g.leaf(Tensor::zeros(vec![4, 2, 3, 3]), false);
        assert!(matches!(
            g.conv_transpose2d(x, w, None, 1, 0),
            Err(TensorError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn select_and_concat() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = g.select(a, 1).unwrap();
        let c = g.concat(vec![s, s]).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 2.0]);
        let loss = g.sum_squares(c).unwrap();
        g.backward(loss).unwrap();
        // d/da1 of 2*a1^2 = 4*a1 = 8
        assert_eq!(g.grad(a).unwrap(), &[0.0, 8.0, 0.0]);
    }
}
