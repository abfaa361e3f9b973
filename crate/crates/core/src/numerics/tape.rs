//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every forward operation appends a node holding its value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse order and
//! accumulates exact vector-Jacobian products, so the only gradients in the
//! training path are analytic ones.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjacency normalization applied to a nonnegative matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// `D^{-1/2} M D^{-1/2}` with `D = diag(row sums of M)`.
    Symmetric,
    /// `D^{-1} M`.
    RowStochastic,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Broadcast a `1 x n` row over every row of `x`.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    SoftmaxRows(Var),
    RowNorms(Var),
    Mean(Var),
    Sum(Var),
    Normalize(Var, NormKind),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `max(x, slope·x)` for slope in [0, 1); slope 0 is a plain ReLU.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = super::tensor::softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Euclidean norm of every row, as a column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let value = self.value(a).row_norms();
        let rg = self.rg(&[a]);
        self.push(value, Op::RowNorms(a), rg)
    }

    /// Mean of all entries as a `1 x 1` node. The mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = if t.is_empty() {
            0.0
        } else {
            t.sum() / t.len() as f64
        };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(value), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(value), Op::Sum(a), rg)
    }

    /// Degree normalization of a square matrix with strictly positive row sums.
    pub fn normalize(&mut self, a: Var, kind: NormKind) -> Result<Var> {
        let value = normalize_with_degrees(self.value(a), kind)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Normalize(a, kind), rg))
    }

    /// Propagates d(out)/d(node) for every node that requires a gradient.
    /// `out` must be a `1 x 1` node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {:?}",
                ov.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = matmul_nt(&g, self.value(b))?;
                        accumulate(&mut grads, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = matmul_tn(self.value(a), &g)?;
                        accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::MatMulNT(a, b) => {
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    if self.nodes[a.0].requires_grad {
                        let ga = matmul(&g, self.value(b))?;
                        accumulate(&mut grads, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = matmul_tn(&g, self.value(a))?;
                        accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone())?;
                    accumulate(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.scale(-1.0))?;
                    accumulate(&mut grads, a, g)?;
                }
                Op::AddRow(x, bias) => {
                    if self.nodes[bias.0].requires_grad {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, bias, gb)?;
                    }
                    accumulate(&mut grads, x, g)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, a, g.scale(s))?,
                Op::AddScalar(a) => accumulate(&mut grads, a, g)?,
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(a);
                    let ga = g.zip_map(x, "leaky_relu", |gv, xv| if xv > 0.0 { gv } else { slope * gv })?;
                    accumulate(&mut grads, a, ga)?;
                }
                Op::Abs(a) => {
                    let x = self.value(a);
                    let ga = g.zip_map(x, "abs", |gv, xv| gv * sign(xv))?;
                    accumulate(&mut grads, a, ga)?;
                }
                Op::SoftmaxRows(a) => {
                    // dX = S ⊙ (G − rowsum(G ⊙ S))
                    let s = &node.value;
                    let mut ga = Tensor::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let (sr, gr) = (s.row(r), g.row(r));
                        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, sv), gv) in ga.row_mut(r).iter_mut().zip(sr).zip(gr) {
                            *o = sv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, a, ga)?;
                }
                Op::RowNorms(a) => {
                    // d‖x‖/dx = x/‖x‖; the subgradient 0 is used at x = 0.
                    let x = self.value(a);
                    let norms = &node.value;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = norms.data()[r];
                        if n == 0.0 {
                            continue;
                        }
                        let coef = g.data()[r] / n;
                        for (o, xv) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = coef * xv;
                        }
                    }
                    accumulate(&mut grads, a, ga)?;
                }
                Op::Mean(a) => {
                    let x = self.value(a);
                    let n = x.len().max(1) as f64;
                    accumulate(&mut grads, a, Tensor::filled(x.rows(), x.cols(), g.data()[0] / n))?;
                }
                Op::Sum(a) => {
                    let x = self.value(a);
                    accumulate(&mut grads, a, Tensor::filled(x.rows(), x.cols(), g.data()[0]))?;
                }
                Op::Normalize(a, kind) => {
                    let ga = normalize_backward(self.value(a), &g, kind);
                    accumulate(&mut grads, a, ga)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn normalize_with_degrees(m: &Tensor, kind: NormKind) -> Result<Tensor> {
    if m.rows() != m.cols() {
        return Err(Error::dim("normalize", m.shape(), m.shape()));
    }
    let deg = m.row_sums();
    if let Some(bad) = deg.data().iter().position(|&d| d <= 0.0 || !d.is_finite()) {
        return Err(Error::Contract(format!(
            "adjacency row {bad} has non-positive degree {}",
            deg.data()[bad]
        )));
    }
    let n = m.rows();
    let mut out = m.clone();
    match kind {
        NormKind::Symmetric => {
            let d = deg.data();
            for i in 0..n {
                for j in 0..n {
                    out.set(i, j, m.get(i, j) / (d[i] * d[j]).sqrt());
                }
            }
        }
        NormKind::RowStochastic => {
            for i in 0..n {
                let d = deg.data()[i];
                for v in out.row_mut(i) {
                    *v /= d;
                }
            }
        }
    }
    Ok(out)
}

fn normalize_backward(m: &Tensor, g: &Tensor, kind: NormKind) -> Tensor {
    let n = m.rows();
    let deg = m.row_sums();
    let d = deg.data();
    let mut out = Tensor::zeros(n, n);
    match kind {
        NormKind::Symmetric => {
            // Â_kl = s_k M_kl s_l, s = d^{-1/2}, d_i = Σ_j M_ij.
            let s: Vec<f64> = d.iter().map(|v| v.powf(-0.5)).collect();
            let mut gd = vec![0.0; n];
            for i in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += g.get(i, l) * m.get(i, l) * s[l];
                }
                for k in 0..n {
                    acc += g.get(k, i) * s[k] * m.get(k, i);
                }
                gd[i] = -0.5 * d[i].powf(-1.5) * acc;
            }
            for i in 0..n {
                for j in 0..n {
                    out.set(i, j, g.get(i, j) * s[i] * s[j] + gd[i]);
                }
            }
        }
        NormKind::RowStochastic => {
            for i in 0..n {
                let dot: f64 = (0..n).map(|l| g.get(i, l) * m.get(i, l)).sum();
                for j in 0..n {
                    out.set(i, j, g.get(i, j) / d[i] - dot / (d[i] * d[i]));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let mut g = Tensor::zeros(x.rows(), x.cols());
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        g
    }

    fn check_unary(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone());
            let out = build(&mut tape, v);
            tape.scalar(out)
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(v).unwrap();
        let numeric = numeric_grad(&x, 1e-6, eval);
        let err = analytic.sub(&numeric).unwrap().max_abs();
        assert!(err < 1e-6, "max abs gradient error {err}");
    }

    fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let (r, c) = tape.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(Tensor::randn(r, c, 1.0, &mut rng));
        let prod = tape.sub(v, w).unwrap();
        let sq = tape.row_norms(prod);
        tape.sum(sq)
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_unary(Tensor::randn(3, 4, 1.0, &mut rng), |t, v| {
            let s = t.softmax_rows(v);
            weighted_sum(t, s, 9)
        });
    }

    #[test]
    fn self_similarity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_unary(Tensor::randn(4, 3, 0.7, &mut rng), |t, v| {
            let sim = t.matmul_nt(v, v).unwrap();
            let w = t.softmax_rows(sim);
            let c = t.matmul(w, v).unwrap();
            weighted_sum(t, c, 4)
        });
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Tensor::uniform(4, 4, 0.1, 2.0, &mut rng);
        for kind in [NormKind::Symmetric, NormKind::RowStochastic] {
            check_unary(m.clone(), |t, v| {
                let a = t.normalize(v, kind).unwrap();
                weighted_sum(t, a, 11)
            });
        }
    }

    #[test]
    fn bias_and_activation_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bias = Tensor::randn(1, 3, 1.0, &mut rng);
        check_unary(Tensor::randn(5, 3, 1.0, &mut rng), |t, v| {
            let b = t.constant(bias.clone());
            let y = t.add_row(v, b).unwrap();
            let y = t.leaky_relu(y, 0.2);
            let y = t.abs(y);
            let y = t.add_scalar(y, 0.3);
            let y = t.scale(y, 1.7);
            t.mean(y)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(2, 2, 1.0));
        let b = tape.leaf(Tensor::filled(2, 2, 2.0));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &Tensor::filled(2, 2, 2.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }
}
