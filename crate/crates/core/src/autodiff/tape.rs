use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::ops;
use super::tensor::Tensor;
use super::{AdError, AdResult};

/// Whether gradients returned by [`backward`] are themselves differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GradMode {
    /// Gradients are detached constants; the backward pass is not recorded.
    FirstOrder,
    /// The backward pass is recorded on the tape, so the returned gradients
    /// can be differentiated again.
    SecondOrder,
}

/// Primitive operations the tape knows how to differentiate.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Mul,
    Matmul,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Sqrt,
    Sum,
    Mean,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    /// Slice along axis 0.
    Slice { start: usize, len: usize },
    /// Inverse of `Slice`: embed into zeros along axis 0.
    Pad0 { total: usize, start: usize },
    Clamp { lo: f64, hi: f64 },
}

struct OpRecord {
    kind: OpKind,
    inputs: Vec<Tensor>,
    output: Tensor,
    out_id: usize,
}

pub(super) struct TapeInner {
    ops: Vec<OpRecord>,
    next_id: usize,
    recording: bool,
}

/// Records operations applied to its leaves. Confined to one thread.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeInner>>);

/// Back-reference from a tensor to its tape. Weak, so that the records of
/// a tape (which hold tensors) never keep the tape itself alive — a strong
/// reference here would make every tape a reference cycle and leak it.
#[derive(Clone)]
pub(super) struct NodeRef {
    pub(super) tape: std::rc::Weak<RefCell<TapeInner>>,
    pub(super) id: usize,
}

impl NodeRef {
    /// The owning tape, if it is still alive.
    pub(super) fn tape(&self) -> Option<Tape> {
        self.tape.upgrade().map(Tape)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            ops: Vec::new(),
            next_id: 0,
            recording: true,
        })))
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Attach a constant tensor as a differentiable leaf of this tape.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = {
            let mut inner = self.0.borrow_mut();
            let id = inner.next_id;
            inner.next_id += 1;
            id
        };
        Tensor::with_node(
            t.shape().to_vec(),
            t.data().to_vec(),
            NodeRef {
                tape: Rc::downgrade(&self.0),
                id,
            },
        )
    }

    pub fn num_ops(&self) -> usize {
        self.0.borrow().ops.len()
    }

    fn set_recording(&self, on: bool) -> bool {
        let mut inner = self.0.borrow_mut();
        std::mem::replace(&mut inner.recording, on)
    }
}

fn eval_unary(op: &'static str, x: &Tensor, f: impl Fn(f64) -> f64) -> AdResult<(Vec<usize>, Vec<f64>)> {
    let _ = op;
    Ok((x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()))
}

fn eval_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> AdResult<(Vec<usize>, Vec<f64>)> {
    if a.shape() != b.shape() {
        // broadcast a single-element operand against the other shape
        if a.numel() == 1 {
            let av = a.item();
            return Ok((b.shape().to_vec(), b.data().iter().map(|&v| f(av, v)).collect()));
        }
        if b.numel() == 1 {
            let bv = b.item();
            return Ok((a.shape().to_vec(), a.data().iter().map(|&v| f(v, bv)).collect()));
        }
        return Err(AdError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok((a.shape().to_vec(), out))
}

fn eval_matmul(a: &Tensor, b: &Tensor) -> AdResult<(Vec<usize>, Vec<f64>)> {
    let mismatch = || AdError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(mismatch());
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Ok((vec![m, n], out))
}

fn eval_permute(x: &Tensor, perm: &[usize]) -> AdResult<(Vec<usize>, Vec<f64>)> {
    let shape = x.shape();
    if perm.len() != shape.len() {
        return Err(AdError::InvalidArgument {
            op: "permute",
            msg: format!("permutation {:?} does not match rank of {:?}", perm, shape),
        });
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(AdError::InvalidArgument {
                op: "permute",
                msg: format!("{:?} is not a permutation", perm),
            });
        }
        seen[p] = true;
    }
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[perm[d]];
        }
        *slot = xd[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, out))
}

fn eval(kind: &OpKind, inputs: &[&Tensor]) -> AdResult<(Vec<usize>, Vec<f64>)> {
    match kind {
        OpKind::Add => eval_elementwise("add", inputs[0], inputs[1], |a, b| a + b),
        OpKind::Mul => eval_elementwise("mul", inputs[0], inputs[1], |a, b| a * b),
        OpKind::Matmul => eval_matmul(inputs[0], inputs[1]),
        OpKind::Relu => eval_unary("relu", inputs[0], |v| if v > 0.0 { v } else { 0.0 }),
        OpKind::Sigmoid => eval_unary("sigmoid", inputs[0], |v| 1.0 / (1.0 + (-v).exp())),
        OpKind::Log => eval_unary("log", inputs[0], f64::ln),
        OpKind::Exp => eval_unary("exp", inputs[0], f64::exp),
        OpKind::Sqrt => eval_unary("sqrt", inputs[0], f64::sqrt),
        OpKind::Sum => Ok((vec![1], vec![inputs[0].data().iter().sum()])),
        OpKind::Mean => {
            let x = inputs[0];
            Ok((vec![1], vec![x.data().iter().sum::<f64>() / x.numel() as f64]))
        }
        OpKind::Reshape(shape) => {
            let x = inputs[0];
            let n: usize = shape.iter().product();
            if n != x.numel() {
                return Err(AdError::ShapeMismatch {
                    op: "reshape",
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok((shape.clone(), x.data().to_vec()))
        }
        OpKind::Permute(perm) => eval_permute(inputs[0], perm),
        OpKind::Slice { start, len } => {
            let x = inputs[0];
            let rows = x.shape().first().copied().unwrap_or(0);
            if start + len > rows {
                return Err(AdError::InvalidArgument {
                    op: "slice",
                    msg: format!("range {}..{} out of {} rows", start, start + len, rows),
                });
            }
            let stride = x.numel() / rows.max(1);
            let mut shape = x.shape().to_vec();
            shape[0] = *len;
            Ok((shape, x.data()[start * stride..(start + len) * stride].to_vec()))
        }
        OpKind::Pad0 { total, start } => {
            let x = inputs[0];
            let rows = x.shape().first().copied().unwrap_or(0);
            if start + rows > *total {
                return Err(AdError::InvalidArgument {
                    op: "pad0",
                    msg: format!("{} rows at offset {} exceed {}", rows, start, total),
                });
            }
            let stride = x.numel() / rows.max(1);
            let mut shape = x.shape().to_vec();
            shape[0] = *total;
            let mut out = vec![0.0; total * stride];
            out[start * stride..(start + rows) * stride].copy_from_slice(x.data());
            Ok((shape, out))
        }
        OpKind::Clamp { lo, hi } => eval_unary("clamp", inputs[0], |v| v.clamp(*lo, *hi)),
    }
}

/// Apply a primitive op eagerly, recording it when any input is on a live tape.
pub fn record(kind: OpKind, inputs: &[&Tensor]) -> AdResult<Tensor> {
    let (shape, data) = eval(&kind, inputs)?;
    let mut tape: Option<Tape> = None;
    for t in inputs {
        // a dead tape makes the tensor an ordinary constant
        if let Some(node_tape) = t.node.as_ref().and_then(|n| n.tape()) {
            match &tape {
                None => tape = Some(node_tape),
                Some(existing) if existing.same_as(&node_tape) => {}
                Some(_) => {
                    return Err(AdError::InvalidArgument {
                        op: "record",
                        msg: "inputs belong to different tapes".into(),
                    })
                }
            }
        }
    }
    let tape = match tape {
        Some(t) if t.0.borrow().recording => t,
        _ => return Ok(Tensor::from_vec(shape, data)),
    };
    let out_id = {
        let mut inner = tape.0.borrow_mut();
        let id = inner.next_id;
        inner.next_id += 1;
        id
    };
    let out = Tensor::with_node(
        shape,
        data,
        NodeRef {
            tape: Rc::downgrade(&tape.0),
            id: out_id,
        },
    );
    tape.0.borrow_mut().ops.push(OpRecord {
        kind,
        inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        output: out.clone(),
        out_id,
    });
    Ok(out)
}

// Adjoint of one input of an elementwise broadcasting op: collapse the
// incoming gradient back to a scalar when the input was broadcast.
fn unbroadcast(g: &Tensor, input: &Tensor) -> Tensor {
    let reduced = if input.is_scalar() && !g.is_scalar() {
        ops::sum(g)
    } else {
        g.clone()
    };
    if reduced.shape() != input.shape() {
        ops::reshape(&reduced, input.shape().to_vec()).expect("unbroadcast reshape")
    } else {
        reduced
    }
}

fn vjps(op: &OpRecord, g: &Tensor) -> Vec<Tensor> {
    match &op.kind {
        OpKind::Add => vec![
            unbroadcast(g, &op.inputs[0]),
            unbroadcast(g, &op.inputs[1]),
        ],
        OpKind::Mul => {
            let (a, b) = (&op.inputs[0], &op.inputs[1]);
            vec![
                unbroadcast(&ops::mul(g, b), a),
                unbroadcast(&ops::mul(g, a), b),
            ]
        }
        OpKind::Matmul => {
            let (a, b) = (&op.inputs[0], &op.inputs[1]);
            vec![
                ops::matmul(g, &ops::transpose(b)).expect("matmul vjp"),
                ops::matmul(&ops::transpose(a), g).expect("matmul vjp"),
            ]
        }
        OpKind::Relu => {
            let mask: Vec<f64> = op.inputs[0]
                .data()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            vec![ops::mul(
                g,
                &Tensor::from_vec(op.inputs[0].shape().to_vec(), mask),
            )]
        }
        OpKind::Sigmoid => {
            // s' = s(1 - s); expressed in primitives so it stays differentiable
            let s = &op.output;
            let one_minus = ops::sub(&Tensor::ones(s.shape().to_vec()), s);
            vec![ops::mul(&ops::mul(g, s), &one_minus)]
        }
        OpKind::Log => vec![ops::mul(g, &ops::recip(&op.inputs[0]))],
        OpKind::Exp => vec![ops::mul(g, &op.output)],
        OpKind::Sqrt => {
            // d/dx sqrt(x) = 1 / (2 sqrt(x))
            let half_recip = ops::scale(&ops::recip(&op.output), 0.5);
            vec![ops::mul(g, &half_recip)]
        }
        OpKind::Sum => vec![ops::mul(&Tensor::ones(op.inputs[0].shape().to_vec()), g)],
        OpKind::Mean => {
            let n = op.inputs[0].numel() as f64;
            vec![ops::mul(
                &Tensor::ones(op.inputs[0].shape().to_vec()),
                &ops::scale(g, 1.0 / n),
            )]
        }
        OpKind::Reshape(_) => vec![ops::reshape(g, op.inputs[0].shape().to_vec()).expect("reshape vjp")],
        OpKind::Permute(perm) => {
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![ops::permute(g, &inv).expect("permute vjp")]
        }
        OpKind::Slice { start, len: _ } => {
            let total = op.inputs[0].shape()[0];
            vec![record(
                OpKind::Pad0 {
                    total,
                    start: *start,
                },
                &[g],
            )
            .expect("slice vjp")]
        }
        OpKind::Pad0 { total: _, start } => {
            let len = op.inputs[0].shape()[0];
            vec![record(
                OpKind::Slice {
                    start: *start,
                    len,
                },
                &[g],
            )
            .expect("pad0 vjp")]
        }
        OpKind::Clamp { lo, hi } => {
            let mask: Vec<f64> = op.inputs[0]
                .data()
                .iter()
                .map(|&v| if v > *lo && v < *hi { 1.0 } else { 0.0 })
                .collect();
            vec![ops::mul(
                g,
                &Tensor::from_vec(op.inputs[0].shape().to_vec(), mask),
            )]
        }
    }
}

/// Reverse pass: gradients of a scalar `loss` with respect to `wrt`, in order.
///
/// Under [`GradMode::SecondOrder`] the adjoint computation is recorded on the
/// same tape, so the returned tensors are differentiable; under
/// [`GradMode::FirstOrder`] they are detached constants.
pub fn backward(loss: &Tensor, wrt: &[&Tensor], mode: GradMode) -> AdResult<Vec<Tensor>> {
    if !loss.is_scalar() {
        return Err(AdError::NonScalarLoss(loss.shape().to_vec()));
    }
    let loss_node = loss.node.as_ref().ok_or(AdError::NotOnTape)?;
    let tape = loss_node.tape().ok_or(AdError::NotOnTape)?;
    for t in wrt {
        match t.node.as_ref().and_then(|n| n.tape()) {
            Some(node_tape) if node_tape.same_as(&tape) => {}
            _ => return Err(AdError::NotOnTape),
        }
    }

    let was_recording = match mode {
        GradMode::FirstOrder => tape.set_recording(false),
        GradMode::SecondOrder => true,
    };

    let n_ops = tape.0.borrow().ops.len();
    let mut adjoints: HashMap<usize, Tensor> = HashMap::new();
    adjoints.insert(loss_node.id, Tensor::ones(vec![1]));

    for idx in (0..n_ops).rev() {
        // Clone the record so the tape is not borrowed while vjps append to it.
        let (kind, inputs, output, out_id) = {
            let inner = tape.0.borrow();
            let op = &inner.ops[idx];
            (op.kind.clone(), op.inputs.clone(), op.output.clone(), op.out_id)
        };
        let g = match adjoints.get(&out_id) {
            Some(g) => g.clone(),
            None => continue,
        };
        // Elementwise broadcasting can leave a single-element adjoint with a
        // different rank than the op's output; realign it before the VJP.
        let g = if g.shape() != output.shape() && g.numel() == output.numel() {
            ops::reshape(&g, output.shape().to_vec()).expect("adjoint reshape")
        } else {
            g
        };
        let rec = OpRecord {
            kind,
            inputs,
            output,
            out_id,
        };
        let input_grads = vjps(&rec, &g);
        for (input, gi) in rec.inputs.iter().zip(input_grads) {
            if let Some(node) = &input.node {
                match adjoints.remove(&node.id) {
                    Some(prev) => {
                        adjoints.insert(node.id, ops::add(&prev, &gi));
                    }
                    None => {
                        adjoints.insert(node.id, gi);
                    }
                }
            }
        }
    }

    let grads = wrt
        .iter()
        .map(|t| {
            let id = t.node.as_ref().unwrap().id;
            adjoints
                .get(&id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    if mode == GradMode::FirstOrder {
        tape.set_recording(was_recording);
    }
    Ok(grads)
}
