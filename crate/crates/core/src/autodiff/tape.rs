use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RmsNormRows(Var, f64),
    Embedding(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    CausalMask(Var),
    Sum(Var),
    Mean(Var),
    GatherWeightedSum(Var, Vec<usize>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf reading a parameter's current value. Gradients flow back into
    /// the store on [`Tape::backward`] only if the parameter requires grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, the natural form for `x · Wᵀ` with `W` stored `out × in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, ta.data(), tb.data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * kernels::sigmoid(x), Op::Silu(a))
    }

    fn rowwise(&mut self, a: Var, f: impl Fn(&mut [f64]), op: Op) -> Var {
        let ta = self.value(a);
        let (_, c) = ta.dims2();
        let mut t = ta.clone();
        for row in t.data_mut().chunks_mut(c) {
            f(row);
        }
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.rowwise(a, kernels::softmax_in_place, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.rowwise(a, kernels::log_softmax_in_place, Op::LogSoftmaxRows(a))
    }

    /// Each row divided by `sqrt(mean(row²) + eps)`.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        self.rowwise(
            a,
            |row| {
                let r = kernels::rms(row, eps);
                row.iter_mut().for_each(|v| *v /= r);
            },
            Op::RmsNormRows(a, eps),
        )
    }

    /// Rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (m, _) = self.value(*first).dims2();
        let mut total = 0;
        for p in parts {
            let (r, c) = self.value(*p).dims2();
            if r != m {
                return Err(mismatch("concat_cols", self.value(*first), self.value(*p)));
            }
            total += c;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            let (_, c) = t.dims2();
            for i in 0..m {
                out[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, c) = ta.dims2();
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, start + len],
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols(a, start), rg))
    }

    /// Sets entries above the diagonal of a square score matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if m != n {
            return Err(mismatch("causal_mask", ta, ta));
        }
        let mut t = ta.clone();
        for i in 0..m {
            for v in &mut t.data_mut()[i * n + i + 1..(i + 1) * n] {
                *v = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::CausalMask(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `Σ_i weights[i] · a[i, cols[i]]`, the masked and weighted
    /// token-log-probability reduction.
    pub fn gather_weighted_sum(&mut self, a: Var, cols: &[usize], weights: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if cols.len() != m || weights.len() != m {
            return Err(Error::ShapeMismatch {
                op: "gather_weighted_sum",
                left: ta.shape().to_vec(),
                right: vec![cols.len(), weights.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::contract(format!("gather column {bad} out of range {n}")));
        }
        let mut s = 0.0;
        for i in 0..m {
            if weights[i] != 0.0 {
                s += weights[i] * ta.data()[i * n + cols[i]];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::GatherWeightedSum(a, cols.to_vec(), weights.to_vec()),
            rg,
        ))
    }

    /// Accumulates `∂loss/∂p` into every parameter that requires grad.
    /// Repeated calls (on this or other tapes) add up.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        gemm_nt(m, n, k, &g, tb.data(), ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        gemm_tn(m, k, n, ta.data(), &g, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), (n, _)) = (ta.dims2(), tb.dims2());
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        gemm_nn(m, n, k, &g, tb.data(), ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, n * k);
                        gemm_tn(m, n, k, &g, ta.data(), gb);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.requires_grad(*v) {
                            let gv = slot(&mut grads, *v, g.len());
                            kernels::axpy(1.0, &g, gv);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, g.len());
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(tb.data()) {
                            *o += gi * y;
                        }
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, g.len());
                        for ((o, gi), x) in gb.iter_mut().zip(&g).zip(ta.data()) {
                            *o += gi * x;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut grads, *a, g.len());
                    kernels::axpy(*s, &g, ga);
                }
                Op::Exp(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), y) in ga.iter_mut().zip(&g).zip(node.value.data()) {
                        *o += gi * y;
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), xi) in ga.iter_mut().zip(&g).zip(x) {
                        *o += gi / xi;
                    }
                }
                Op::Silu(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), &xi) in ga.iter_mut().zip(&g).zip(x) {
                        let s = kernels::sigmoid(xi);
                        *o += gi * s * (1.0 + xi * (1.0 - s));
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (_, c) = node.value.dims2();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((go, gi), p) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                        let inner = kernels::dot(gi, p);
                        for j in 0..c {
                            go[j] += p[j] * (gi[j] - inner);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let (_, c) = node.value.dims2();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((go, gi), lp) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                        let total: f64 = gi.iter().sum();
                        for j in 0..c {
                            go[j] += gi[j] - lp[j].exp() * total;
                        }
                    }
                }
                Op::RmsNormRows(a, eps) => {
                    let x = self.value(*a);
                    let (_, c) = x.dims2();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((go, gi), (xr, yr)) in ga
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(x.data().chunks(c).zip(node.value.data().chunks(c)))
                    {
                        let r = kernels::rms(xr, *eps);
                        let proj = kernels::dot(gi, yr) / c as f64;
                        for j in 0..c {
                            go[j] += (gi[j] - yr[j] * proj) / r;
                        }
                    }
                }
                Op::Embedding(table, ids) => {
                    let (v, d) = self.value(*table).dims2();
                    let gt = slot(&mut grads, *table, v * d);
                    for (i, &id) in ids.iter().enumerate() {
                        kernels::axpy(1.0, &g[i * d..(i + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = node.value.dims2();
                    let mut off = 0;
                    for p in parts {
                        let (_, c) = self.value(*p).dims2();
                        if self.requires_grad(*p) {
                            let gp = slot(&mut grads, *p, m * c);
                            for i in 0..m {
                                kernels::axpy(
                                    1.0,
                                    &g[i * total + off..i * total + off + c],
                                    &mut gp[i * c..(i + 1) * c],
                                );
                            }
                        }
                        off += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, c) = self.value(*a).dims2();
                    let (_, len) = node.value.dims2();
                    let ga = slot(&mut grads, *a, m * c);
                    for i in 0..m {
                        kernels::axpy(
                            1.0,
                            &g[i * len..(i + 1) * len],
                            &mut ga[i * c + start..i * c + start + len],
                        );
                    }
                }
                Op::CausalMask(a) => {
                    let (m, n) = node.value.dims2();
                    let ga = slot(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..=i {
                            ga[i * n + j] += g[i * n + j];
                        }
                    }
                }
                Op::Sum(a) => {
                    let ga = slot(&mut grads, *a, self.value(*a).numel());
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    let ga = slot(&mut grads, *a, n);
                    let d = g[0] / n as f64;
                    ga.iter_mut().for_each(|v| *v += d);
                }
                Op::GatherWeightedSum(a, cols, weights) => {
                    let (m, n) = self.value(*a).dims2();
                    let ga = slot(&mut grads, *a, m * n);
                    for i in 0..m {
                        if weights[i] != 0.0 {
                            ga[i * n + cols[i]] += g[0] * weights[i];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(3.0), true);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.mul(xv, xv).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(x).grad, vec![6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::zeros(&[2]), true);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        assert!(matches!(tape.backward(xv, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let p = tape.softmax_rows(a);
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn rms_normalize_three_four() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = tape.rms_norm_rows(a, 0.0);
        let r = 12.5f64.sqrt();
        let got = tape.value(y).data();
        assert!((got[0] - 3.0 / r).abs() < 1e-15 && (got[1] - 4.0 / r).abs() < 1e-15);
        assert!((got[0] - 0.8485).abs() < 1e-4 && (got[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn matmul_by_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.5, -2.0, 0.25, 7.0, -3.0, 0.0]).unwrap();
        let i = tape.constant(eye);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn nll_gradient_is_softmax_minus_onehot() {
        let mut store = ParamStore::new();
        let z = store.register("z", Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.1]).unwrap(), true);
        let mut tape = Tape::new();
        let zv = tape.param(&store, z);
        let lp = tape.log_softmax_rows(zv);
        let nll = tape.gather_weighted_sum(lp, &[2], &[-1.0]).unwrap();
        tape.backward(nll, &mut store).unwrap();
        let mut p = vec![0.3, -1.2, 2.0, 0.1];
        kernels::softmax_in_place(&mut p);
        for (j, g) in store.get(z).grad.iter().enumerate() {
            let want = p[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-14);
        }
    }

    #[test]
    fn frozen_parameters_receive_nothing() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap(), false);
        let x = store.register("x", Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap(), true);
        let mut tape = Tape::new();
        let (wv, xv) = (tape.param(&store, w), tape.param(&store, x));
        let y = tape.matmul_t(xv, wv).unwrap();
        let s = tape.sum(y);
        tape.backward(s, &mut store).unwrap();
        assert!(store.get(w).grad.iter().all(|g| g.to_bits() == 0));
        assert!(store.get(x).grad.iter().any(|g| *g != 0.0));
    }
}
