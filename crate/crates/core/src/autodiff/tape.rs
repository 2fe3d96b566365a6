use std::rc::Rc;

use super::optim::Parameter;
use super::tensor::{gemm, Operand, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the vector from [`Tape::gradients`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + bias` with a `1 x cols` bias broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    /// Per-row sums, `rows x 1`.
    RowSum(Var),
    BceWithLogits(Var, Rc<Tensor>),
    ModPeriodic(Var),
    Select(Rc<Vec<bool>>, Var, Var),
    Cols(Var, usize),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// A single-use record of a forward computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to `params[index]`; [`Tape::backward`] accumulates into it.
    pub fn param(&mut self, index: usize, p: &Parameter) -> Var {
        let v = self.input(p.value.clone());
        self.nodes[v.0].param = Some(index);
        v
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_with(self.value(b), self.exec)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows != 1 || b.cols != x.cols {
            return Err(shape_err("bias add", x.shape(), b.shape()));
        }
        let mut v = x.clone();
        for row in v.data.chunks_mut(v.cols) {
            for (o, bb) in row.iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            Op::LeakyRelu(a, slope),
            |x| if x > 0.0 { x } else { slope * x },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data
            .chunks(t.cols.max(1))
            .map(crate::exec::pairwise_sum)
            .collect();
        let v = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        self.push(v, Op::RowSum(a), &[a])
    }

    /// Elementwise Bernoulli negative log-likelihood of `targets` under
    /// `logits`: `max(l, 0) - l t + ln(1 + e^-|l|)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Tensor>) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != targets.shape() {
            return Err(shape_err("bce targets", l.shape(), targets.shape()));
        }
        let v = l.zip_map(&targets, |l, t| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p());
        Ok(self.push(v, Op::BceWithLogits(logits, targets), &[logits]))
    }

    /// `x mod period` in `[0, period)`; the derivative is taken as 1.
    pub fn mod_periodic(&mut self, a: Var, period: f64) -> Var {
        self.unary(a, Op::ModPeriodic(a), |x| crate::covering::wrap(x, period))
    }

    /// Elementwise `if cond >= threshold { a } else { b }`. `cond` only
    /// steers the choice and receives no gradient.
    pub fn select_by_threshold(&mut self, cond: Var, threshold: f64, a: Var, b: Var) -> Result<Var> {
        self.same_shape("select", a, b)?;
        self.same_shape("select condition", cond, a)?;
        let mask: Vec<bool> = self.value(cond).data.iter().map(|&c| c >= threshold).collect();
        let (ta, tb) = (self.value(a), self.value(b));
        let data = mask
            .iter()
            .zip(ta.data.iter().zip(&tb.data))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let v = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        Ok(self.push(v, Op::Select(Rc::new(mask), a, b), &[a, b]))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(Error::Shape(format!(
                "columns {start}..{} of a {}-column tensor",
                start + len,
                t.cols
            )));
        }
        let v = t.cols_slice(start, len);
        Ok(self.push(v, Op::Cols(a, start), &[a]))
    }

    /// Places the inputs side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows)
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if parts.iter().any(|p| self.value(*p).rows != rows) {
            return Err(Error::Shape("concat of tensors with different row counts".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let v = Tensor { rows, cols, data };
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// node that depends on an input or parameter leaf.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulates the gradient of `loss` into the bound parameters.
    /// Parameters not reached by `loss` are left untouched.
    pub fn backward(&self, loss: Var, params: &mut [Parameter]) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(pi), Some(g)) = (node.param, g) {
                let p = params.get_mut(pi).ok_or_else(|| {
                    Error::Shape(format!("tape refers to parameter {pi} which was not supplied"))
                })?;
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut give = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    gemm(
                        self.exec,
                        Operand::plain(g),
                        Operand::transposed(tb),
                        &mut da.data,
                        false,
                    );
                    give(*a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    gemm(
                        self.exec,
                        Operand::transposed(ta),
                        Operand::plain(g),
                        &mut db.data,
                        false,
                    );
                    give(*b, db);
                }
            }
            Op::AddBias(a, bias) => {
                if needs(*bias) {
                    let cols = g.cols;
                    let data = (0..cols)
                        .map(|c| {
                            let col: Vec<f64> = (0..g.rows).map(|r| g.get(r, c)).collect();
                            crate::exec::pairwise_sum(&col)
                        })
                        .collect();
                    give(*bias, Tensor { rows: 1, cols, data });
                }
                if needs(*a) {
                    give(*a, g.clone());
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    give(*a, g.clone());
                }
                if needs(*b) {
                    give(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    give(*a, g.clone());
                }
                if needs(*b) {
                    give(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    give(*a, g.zip_map(val(*b), |g, y| g * y));
                }
                if needs(*b) {
                    give(*b, g.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => give(*a, g.map(|x| x * s)),
            Op::AddScalar(a) | Op::ModPeriodic(a) => give(*a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                give(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { g * slope }))
            }
            Op::Sigmoid(a) => give(*a, g.zip_map(&node.value, |g, s| g * s * (1.0 - s))),
            Op::Softplus(a) => give(*a, g.zip_map(val(*a), |g, x| g * sigmoid(x))),
            Op::Log(a) => give(*a, g.zip_map(val(*a), |g, x| g / x)),
            Op::Exp(a) => give(*a, g.zip_map(&node.value, |g, e| g * e)),
            Op::Sum(a) => {
                let t = val(*a);
                give(*a, Tensor::full(t.rows, t.cols, g.data[0]));
            }
            Op::Mean(a) => {
                let t = val(*a);
                give(*a, Tensor::full(t.rows, t.cols, g.data[0] / t.len() as f64));
            }
            Op::RowSum(a) => {
                let t = val(*a);
                let data = (0..t.rows)
                    .flat_map(|r| std::iter::repeat_n(g.data[r], t.cols))
                    .collect();
                give(
                    *a,
                    Tensor {
                        rows: t.rows,
                        cols: t.cols,
                        data,
                    },
                );
            }
            Op::BceWithLogits(l, targets) => {
                let mut d = val(*l).zip_map(targets, |l, t| sigmoid(l) - t);
                for (x, gg) in d.data.iter_mut().zip(&g.data) {
                    *x *= gg;
                }
                give(*l, d);
            }
            Op::Select(mask, a, b) => {
                let pick = |take: bool| Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: mask
                        .iter()
                        .zip(&g.data)
                        .map(|(&m, &x)| if m == take { x } else { 0.0 })
                        .collect(),
                };
                if needs(*a) {
                    give(*a, pick(true));
                }
                if needs(*b) {
                    give(*b, pick(false));
                }
            }
            Op::Cols(a, start) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    d.data[r * t.cols + start..r * t.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                give(*a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols;
                    if needs(*p) {
                        give(*p, g.cols_slice(offset, w));
                    }
                    offset += w;
                }
            }
        }
    }
}
