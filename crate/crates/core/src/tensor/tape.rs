//! Operation tape and the backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::{ops, Tensor};

/// Registered forward operations. Each carries whatever the backward
/// rule needs beyond the input/output values themselves.
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Transpose,
    EmbedLookup { ids: Vec<usize> },
    SoftmaxRows,
    LayerNorm { eps: f64 },
    Gelu,
    SliceRows { start: usize },
    ConcatRows,
    Scale { c: f64 },
    AddScalar { c: f64 },
    MaskFill { mask: Vec<bool>, value: f64 },
    CrossEntropyRows { targets: Vec<usize> },
    L2NormalizeRows,
    DotRows,
    Exp,
    Sum,
    Mean,
    MinElem,
    Clamp { lo: f64, hi: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        use OpKind::*;
        match self {
            MatMul => "matmul",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Transpose => "transpose",
            EmbedLookup { .. } => "embed_lookup",
            SoftmaxRows => "softmax_rows",
            LayerNorm { .. } => "layer_norm",
            Gelu => "gelu",
            SliceRows { .. } => "slice_rows",
            ConcatRows => "concat_rows",
            Scale { .. } => "scale",
            AddScalar { .. } => "add_scalar",
            MaskFill { .. } => "mask_fill",
            CrossEntropyRows { .. } => "cross_entropy_rows",
            L2NormalizeRows => "l2_normalize_rows",
            DotRows => "dot_rows",
            Exp => "exp",
            Sum => "sum",
            Mean => "mean",
            MinElem => "min_elem",
            Clamp { .. } => "clamp",
        }
    }
}

pub(crate) struct Node {
    pub op: OpKind,
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

/// Define-by-run gradient tape. Rebuilt for every forward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records one executed op; returns the output handle.
    pub(crate) fn record(
        &self,
        op: OpKind,
        inputs: Vec<Tensor>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Tensor {
        let track = inputs.iter().any(|t| t.inner().borrow().track);
        let mut tape = self.inner.borrow_mut();
        let id = tape.nodes.len();
        let output = Tensor::from_op(shape, data, track, id);
        tape.nodes.push(Node {
            op,
            inputs,
            output: output.clone(),
        });
        output
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// tracked tensor that the loss depends on; each tape accepts a
    /// single backward call.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        {
            let tape = self.inner.borrow();
            if tape.consumed {
                return Err(Error::BackwardConsumed);
            }
            if tape.nodes.is_empty() {
                return Err(Error::EmptyTape);
            }
        }
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape(),
            });
        }
        loss.inner().borrow_mut().grad = Some(vec![1.0]);

        let mut tape = self.inner.borrow_mut();
        tape.consumed = true;
        for node in tape.nodes.iter().rev() {
            let gout = {
                let out = node.output.inner().borrow();
                match &out.grad {
                    Some(g) => g.clone(),
                    None => continue, // not part of the loss graph
                }
            };
            if gout.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad { op: node.op.name() });
            }
            let contribs = ops::backprop(node, &gout);
            for (idx, grad) in contribs {
                let input = &node.inputs[idx];
                let mut inner = input.inner().borrow_mut();
                if !inner.track {
                    continue;
                }
                match &mut inner.grad {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a += g;
                        }
                    }
                    None => inner.grad = Some(grad),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_square_sum() {
        // loss = sum(x*x), grad = 2x
        let tape = Tape::new();
        let x = Tensor::param(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_rejected() {
        let tape = Tape::new();
        let x = Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(
            tape.backward(&loss),
            Err(Error::BackwardConsumed)
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn empty_tape_rejected() {
        let tape = Tape::new();
        let x = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&x), Err(Error::EmptyTape)));
    }

    #[test]
    fn untracked_inputs_get_no_grads() {
        let tape = Tape::new();
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(x) -> grad 2 everywhere
        let tape = Tape::new();
        let x = Tensor::param(&[1, 2], vec![5.0, -1.0]).unwrap();
        let a = tape.sum(&x).unwrap();
        let b = tape.sum(&x).unwrap();
        let loss = tape.add(&a, &b).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }
}
