//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every operation performed on its [`Var`]s in forward
//! order; [`Tape::backward`] replays the records in reverse and accumulates
//! gradients for every leaf. Custom-gradient nodes (the differentiable QP
//! layer) plug in through the [`CustomOp`] trait and participate in the
//! sweep exactly like built-ins.
//!
//! Tapes are single-threaded by construction (`Rc` handles); distinct tapes
//! share no state and may run on different threads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{Tensor, TensorError};

pub type AdError = TensorError;
pub type VarId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Softplus,
    Tanh,
    /// Positive part (u)_+ with subgradient 0 at u = 0.
    Relu,
    Square,
    Sqrt,
    Sum,
    Mean,
    Concat,
    Slice { start: usize, len: usize },
    ScalarMul(f64),
    Clamp { lo: f64, hi: f64 },
}

/// A node with a user-supplied forward/backward pair. `backward` must return
/// one gradient tensor per input, shape-matching that input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &Tensor,
    ) -> Result<Vec<Tensor>, AdError>;
}

enum Rule {
    Leaf,
    Op(OpKind),
    Custom(Rc<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    rule: Rule,
    param: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Shared handle to one computation record. Cloning is cheap.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Reference to one tensor on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    pub id: VarId,
}

/// Leaf-id → gradient map produced by [`Tape::backward`].
pub struct Gradients {
    by_id: HashMap<VarId, Tensor>,
}

impl Gradients {
    pub fn of(&self, var: &Var) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    /// Gradient of a leaf; zero tensor if the leaf never influenced the loss.
    pub fn of_or_zero(&self, var: &Var) -> Tensor {
        self.by_id
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.borrow().nodes.is_empty()
    }

    /// A constant leaf: receives a gradient but is not reported as a parameter.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, vec![], Rule::Leaf, false)
    }

    /// A parameter leaf: guaranteed an entry in [`Gradients`].
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, vec![], Rule::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, parents: Vec<VarId>, rule: Rule, param: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            parents,
            rule,
            param,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn record(&self, op: OpKind, operands: &[&Var]) -> Result<Var, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let tensors: Vec<&Tensor> = operands.iter().map(|v| &inner.nodes[v.id].value).collect();
            op_forward(op, &tensors)?
        };
        if !value.all_finite() {
            return Err(AdError::NonFinite {
                op: format!("{op:?}"),
            });
        }
        let parents = operands.iter().map(|v| v.id).collect();
        Ok(self.push(value, parents, Rule::Op(op), false))
    }

    /// Record a custom-gradient node.
    pub fn custom(&self, op: Rc<dyn CustomOp>, operands: &[&Var]) -> Result<Var, AdError> {
        let value = {
            let inner = self.inner.borrow();
            let tensors: Vec<&Tensor> = operands.iter().map(|v| &inner.nodes[v.id].value).collect();
            op.forward(&tensors)?
        };
        if !value.all_finite() {
            return Err(AdError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let parents = operands.iter().map(|v| v.id).collect();
        Ok(self.push(value, parents, Rule::Custom(op), false))
    }

    /// Reverse sweep from a scalar output. Returns gradients for every leaf
    /// reached; parameter leaves always appear (zero-filled if unreached).
    pub fn backward(&self, output: &Var) -> Result<Gradients, AdError> {
        let inner = self.inner.borrow();
        let out = &inner.nodes[output.id];
        if !out.value.is_scalar() {
            return Err(AdError::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(out.value.shape().to_vec(), 1.0));

        for id in (0..=output.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            match &node.rule {
                Rule::Leaf => {
                    grads[id] = Some(upstream);
                }
                Rule::Op(op) => {
                    let inputs: Vec<&Tensor> = node
                        .parents
                        .iter()
                        .map(|&p| &inner.nodes[p].value)
                        .collect();
                    let parent_grads = op_backward(*op, &inputs, &node.value, &upstream)?;
                    accumulate(&mut grads, &node.parents, parent_grads, &inner)?;
                }
                Rule::Custom(op) => {
                    let inputs: Vec<&Tensor> = node
                        .parents
                        .iter()
                        .map(|&p| &inner.nodes[p].value)
                        .collect();
                    let parent_grads = op.backward(&inputs, &node.value, &upstream)?;
                    if parent_grads.len() != node.parents.len() {
                        return Err(AdError::Contract(format!(
                            "custom op {} returned {} gradients for {} inputs",
                            op.name(),
                            parent_grads.len(),
                            node.parents.len()
                        )));
                    }
                    accumulate(&mut grads, &node.parents, parent_grads, &inner)?;
                }
            }
        }

        let mut by_id = HashMap::new();
        for (id, node) in inner.nodes.iter().enumerate() {
            if matches!(node.rule, Rule::Leaf) {
                if let Some(g) = grads[id].take() {
                    by_id.insert(id, g);
                } else if node.param {
                    by_id.insert(id, Tensor::zeros(node.value.shape().to_vec()));
                }
            }
        }
        Ok(Gradients { by_id })
    }
}

fn accumulate(
    grads: &mut [Option<Tensor>],
    parents: &[VarId],
    parent_grads: Vec<Tensor>,
    inner: &TapeInner,
) -> Result<(), AdError> {
    for (&pid, g) in parents.iter().zip(parent_grads) {
        let expected = inner.nodes[pid].value.shape();
        if g.shape() != expected {
            return Err(AdError::Contract(format!(
                "backward produced gradient of shape {:?} for operand of shape {:?}",
                g.shape(),
                expected
            )));
        }
        match &mut grads[pid] {
            Some(acc) => {
                for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }
    Ok(())
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, op: OpKind) -> Result<Var, AdError> {
        self.tape.record(op, &[self])
    }

    fn binary(&self, op: OpKind, rhs: &Var) -> Result<Var, AdError> {
        self.tape.record(op, &[self, rhs])
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var, AdError> {
        self.binary(OpKind::MatMul, rhs)
    }

    pub fn add(&self, rhs: &Var) -> Result<Var, AdError> {
        self.binary(OpKind::Add, rhs)
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var, AdError> {
        self.binary(OpKind::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var, AdError> {
        self.binary(OpKind::Mul, rhs)
    }

    pub fn div(&self, rhs: &Var) -> Result<Var, AdError> {
        self.binary(OpKind::Div, rhs)
    }

    pub fn exp(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Exp)
    }

    pub fn log(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Log)
    }

    pub fn softplus(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Softplus)
    }

    pub fn tanh(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Tanh)
    }

    pub fn relu(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Relu)
    }

    pub fn square(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Square)
    }

    pub fn sqrt(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Sqrt)
    }

    pub fn sum(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Sum)
    }

    pub fn mean(&self) -> Result<Var, AdError> {
        self.unary(OpKind::Mean)
    }

    pub fn concat(&self, rhs: &Var) -> Result<Var, AdError> {
        self.binary(OpKind::Concat, rhs)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Var, AdError> {
        self.unary(OpKind::Slice { start, len })
    }

    pub fn scale(&self, c: f64) -> Result<Var, AdError> {
        self.unary(OpKind::ScalarMul(c))
    }

    pub fn neg(&self) -> Result<Var, AdError> {
        self.scale(-1.0)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var, AdError> {
        self.unary(OpKind::Clamp { lo, hi })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x), overflow-safe
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let vals = x.values().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), vals).expect("shape preserved")
}

/// Elementwise binary with scalar-tensor broadcast on either side.
fn zip_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AdError> {
    if a.shape() == b.shape() {
        let vals = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), vals)
    } else if b.is_scalar() {
        let y = b.values()[0];
        Ok(map_unary(a, |x| f(x, y)))
    } else if a.is_scalar() {
        let x = a.values()[0];
        Ok(map_unary(b, |y| f(x, y)))
    } else {
        Err(AdError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Reduce a full-shape gradient back onto an operand that may have been a
/// broadcast scalar.
fn reduce_to_shape(g: &Tensor, target_shape: &[usize]) -> Tensor {
    if g.shape() == target_shape {
        g.clone()
    } else {
        let s: f64 = g.values().iter().sum();
        Tensor::new(target_shape.to_vec(), vec![s]).expect("scalar target")
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, bool), AdError> {
    // Returns (rows, inner, cols, rhs_is_vector).
    let mismatch = || AdError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() != 2 {
        return Err(mismatch());
    }
    let (r, k) = (a.shape()[0], a.shape()[1]);
    match b.rank() {
        1 => {
            if b.shape()[0] != k {
                return Err(mismatch());
            }
            Ok((r, k, 1, true))
        }
        2 => {
            if b.shape()[0] != k {
                return Err(mismatch());
            }
            Ok((r, k, b.shape()[1], false))
        }
        _ => Err(mismatch()),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
    let (r, k, c, vec_rhs) = matmul_dims(a, b)?;
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..c {
                out[i * c + j] += aip * bv[p * c + j];
            }
        }
    }
    if vec_rhs {
        Ok(Tensor::vector(out))
    } else {
        Tensor::matrix(r, c, out)
    }
}

fn op_forward(op: OpKind, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
    match op {
        OpKind::MatMul => matmul_forward(inputs[0], inputs[1]),
        OpKind::Add => zip_binary("add", inputs[0], inputs[1], |a, b| a + b),
        OpKind::Sub => zip_binary("sub", inputs[0], inputs[1], |a, b| a - b),
        OpKind::Mul => zip_binary("mul", inputs[0], inputs[1], |a, b| a * b),
        OpKind::Div => zip_binary("div", inputs[0], inputs[1], |a, b| a / b),
        OpKind::Exp => Ok(map_unary(inputs[0], f64::exp)),
        OpKind::Log => Ok(map_unary(inputs[0], f64::ln)),
        OpKind::Softplus => Ok(map_unary(inputs[0], softplus)),
        OpKind::Tanh => Ok(map_unary(inputs[0], f64::tanh)),
        OpKind::Relu => Ok(map_unary(inputs[0], |v| v.max(0.0))),
        OpKind::Square => Ok(map_unary(inputs[0], |v| v * v)),
        OpKind::Sqrt => Ok(map_unary(inputs[0], f64::sqrt)),
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].values().iter().sum())),
        OpKind::Mean => {
            let n = inputs[0].len() as f64;
            Ok(Tensor::scalar(inputs[0].values().iter().sum::<f64>() / n))
        }
        OpKind::Concat => {
            let mut vals = inputs[0].values().to_vec();
            vals.extend_from_slice(inputs[1].values());
            Ok(Tensor::vector(vals))
        }
        OpKind::Slice { start, len } => {
            if start + len > inputs[0].len() {
                return Err(AdError::Contract(format!(
                    "slice [{start}, {start}+{len}) out of bounds for length {}",
                    inputs[0].len()
                )));
            }
            Ok(Tensor::vector(
                inputs[0].values()[start..start + len].to_vec(),
            ))
        }
        OpKind::ScalarMul(c) => Ok(map_unary(inputs[0], |v| c * v)),
        OpKind::Clamp { lo, hi } => Ok(map_unary(inputs[0], |v| v.clamp(lo, hi))),
    }
}

fn op_backward(
    op: OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    g: &Tensor,
) -> Result<Vec<Tensor>, AdError> {
    let x = inputs[0];
    let grads = match op {
        OpKind::MatMul => {
            let a = inputs[0];
            let b = inputs[1];
            let (r, k, c, vec_rhs) = matmul_dims(a, b)?;
            let gv = g.values();
            let av = a.values();
            let bv = b.values();
            // dA = G · Bᵀ
            let mut da = vec![0.0; r * k];
            for i in 0..r {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += gv[i * c + j] * bv[p * c + j];
                    }
                    da[i * k + p] = s;
                }
            }
            // dB = Aᵀ · G
            let mut db = vec![0.0; k * c];
            for p in 0..k {
                for i in 0..r {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        db[p * c + j] += aip * gv[i * c + j];
                    }
                }
            }
            let db = if vec_rhs {
                Tensor::vector(db)
            } else {
                Tensor::matrix(k, c, db)?
            };
            vec![Tensor::matrix(r, k, da)?, db]
        }
        OpKind::Add => vec![
            reduce_to_shape(g, inputs[0].shape()),
            reduce_to_shape(g, inputs[1].shape()),
        ],
        OpKind::Sub => {
            let neg = map_unary(g, |v| -v);
            vec![
                reduce_to_shape(g, inputs[0].shape()),
                reduce_to_shape(&neg, inputs[1].shape()),
            ]
        }
        OpKind::Mul => {
            let ga = zip_binary("mul", g, inputs[1], |a, b| a * b)?;
            let gb = zip_binary("mul", g, inputs[0], |a, b| a * b)?;
            vec![
                reduce_to_shape(&ga, inputs[0].shape()),
                reduce_to_shape(&gb, inputs[1].shape()),
            ]
        }
        OpKind::Div => {
            let ga = zip_binary("div", g, inputs[1], |a, b| a / b)?;
            // d/db (a/b) = -a / b²
            let gb = {
                let t = zip_binary("mul", g, inputs[0], |a, b| a * b)?;
                let b2 = zip_binary("mul", inputs[1], inputs[1], |a, b| a * b)?;
                zip_binary("div", &t, &b2, |a, b| -a / b)?
            };
            vec![
                reduce_to_shape(&ga, inputs[0].shape()),
                reduce_to_shape(&gb, inputs[1].shape()),
            ]
        }
        OpKind::Exp => vec![zip_binary("mul", g, output, |a, b| a * b)?],
        OpKind::Log => vec![zip_binary("div", g, x, |a, b| a / b)?],
        OpKind::Softplus => vec![zip_binary("mul", g, x, |a, b| a * sigmoid(b))?],
        OpKind::Tanh => vec![zip_binary("mul", g, output, |a, b| a * (1.0 - b * b))?],
        OpKind::Relu => vec![zip_binary("mul", g, x, |a, b| {
            if b > 0.0 {
                a
            } else {
                0.0
            }
        })?],
        OpKind::Square => vec![zip_binary("mul", g, x, |a, b| 2.0 * a * b)?],
        OpKind::Sqrt => vec![zip_binary("div", g, output, |a, b| a / (2.0 * b))?],
        OpKind::Sum => vec![Tensor::full(x.shape().to_vec(), g.item())],
        OpKind::Mean => vec![Tensor::full(
            x.shape().to_vec(),
            g.item() / x.len() as f64,
        )],
        OpKind::Concat => {
            let na = inputs[0].len();
            let ga = Tensor::new(
                inputs[0].shape().to_vec(),
                g.values()[..na].to_vec(),
            )?;
            let gb = Tensor::new(
                inputs[1].shape().to_vec(),
                g.values()[na..].to_vec(),
            )?;
            vec![ga, gb]
        }
        OpKind::Slice { start, len } => {
            let mut full = Tensor::zeros(x.shape().to_vec());
            full.values_mut()[start..start + len].copy_from_slice(g.values());
            vec![full]
        }
        OpKind::ScalarMul(c) => vec![map_unary(g, |v| c * v)],
        OpKind::Clamp { lo, hi } => vec![zip_binary("mul", g, x, |a, b| {
            if b > lo && b < hi {
                a
            } else {
                0.0
            }
        })?],
    };
    Ok(grads)
}
