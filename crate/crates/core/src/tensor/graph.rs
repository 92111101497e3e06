use crate::error::{contract_err, dim_err, AbmtError, Result};

use super::Tensor;

/// Clamp applied to probabilities before taking logs in the binary soft loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    Reshape(Var),
    Pool {
        x: Var,
        mode: Pooling,
        parts: usize,
        width: usize,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
        da: usize,
        db: usize,
    },
    L2Normalize {
        x: Var,
        width: usize,
        denom: Vec<f64>,
        clamped: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    PairwiseDistance {
        x: Var,
        n: usize,
        width: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Nll {
        lp: Var,
        labels: Vec<usize>,
        cols: usize,
    },
    SoftNll {
        lp: Var,
        target: Vec<f64>,
        rows: usize,
    },
    BinarySoftCe {
        t: Var,
        target: Vec<f64>,
        literal: bool,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Execution tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of [`Graph::backward`]: one optional gradient per recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into the grad slot of `target`. Tensors that
    /// do not require gradients are left untouched.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if !target.requires_grad() {
            return Ok(());
        }
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => {
                // Unreachable from the loss: zero contribution.
                if target.grad().is_none() {
                    target.zero_grad();
                }
                Ok(())
            }
        }
    }
}

fn shape_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are finite")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        debug_assert_eq!(shape_numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(AbmtError::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a graph input. Gradients are tracked when the
    /// tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a detached input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = false;
        v
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    /// `x[N x Din] * w[Dout x Din]^T (+ b[Dout])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.matrix_dims(x, "linear input")?;
        let (dout, wdin) = self.matrix_dims(w, "linear weight")?;
        if din != wdin {
            return dim_err(format!("linear: input width {din} vs weight width {wdin}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return dim_err(format!("linear: bias shape {:?}, expected [{dout}]", self.shape(b)));
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xr = &xv[i * din..(i + 1) * din];
            for j in 0..dout {
                let wr = &wv[j * din..(j + 1) * din];
                out[i * dout + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        self.push(vec![n, dout], out, Op::Linear { x, w, b, n, din, dout }, rg, "linear")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg, "sub")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// Row-wise log-softmax over the last axis of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.matrix_dims(x, "log_softmax")?;
        if cols == 0 {
            return dim_err("log_softmax: zero classes");
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax { x, cols }, rg, "log_softmax")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape_numel(&shape) != self.value(x).len() {
            return dim_err(format!("reshape {:?} -> {:?}", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Reshape(x), rg, "reshape")
    }

    /// Reduces the part axis of an `N x P x D` tensor. Max mode routes the
    /// gradient to the first maximal part.
    pub fn pool(&mut self, x: Var, mode: Pooling) -> Result<Var> {
        let (n, parts, width) = match self.shape(x) {
            [n, p, d] => (*n, *p, *d),
            s => return dim_err(format!("pool: expected N x P x D, got {s:?}")),
        };
        if parts == 0 {
            return dim_err("pool: empty part axis");
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n * width];
        let mut argmax = Vec::new();
        match mode {
            Pooling::Mean => {
                for i in 0..n {
                    for p in 0..parts {
                        let base = (i * parts + p) * width;
                        for d in 0..width {
                            out[i * width + d] += xv[base + d];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= parts as f64);
            }
            Pooling::Max => {
                argmax = vec![0; n * width];
                for i in 0..n {
                    for d in 0..width {
                        let mut best = 0;
                        let mut best_v = xv[i * parts * width + d];
                        for p in 1..parts {
                            let v = xv[(i * parts + p) * width + d];
                            if v > best_v {
                                best = p;
                                best_v = v;
                            }
                        }
                        out[i * width + d] = best_v;
                        argmax[i * width + d] = best;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            vec![n, width],
            out,
            Op::Pool {
                x,
                mode,
                parts,
                width,
                argmax,
            },
            rg,
            "pool",
        )
    }

    /// Row-wise concatenation of two matrices.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.matrix_dims(a, "concat lhs")?;
        let (nb, db) = self.matrix_dims(b, "concat rhs")?;
        if na != nb {
            return dim_err(format!("concat: {na} rows vs {nb} rows"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(na * (da + db));
        for i in 0..na {
            out.extend_from_slice(&av[i * da..(i + 1) * da]);
            out.extend_from_slice(&bv[i * db..(i + 1) * db]);
        }
        let rg = self.rg(&[a, b]);
        self.push(vec![na, da + db], out, Op::Concat { a, b, da, db }, rg, "concat")
    }

    /// Divides each row by `max(||row||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return contract_err("l2_normalize: eps must be positive");
        }
        let (n, width) = self.matrix_dims(x, "l2_normalize")?;
        let xv = self.value(x);
        let mut out = xv.to_vec();
        let mut denom = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        for row in out.chunks_mut(width.max(1)).take(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
            denom.push(d);
            clamped.push(norm < eps);
        }
        let rg = self.rg(&[x]);
        self.push(
            vec![n, width],
            out,
            Op::L2Normalize {
                x,
                width,
                denom,
                clamped,
            },
            rg,
            "l2_normalize",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return dim_err("mean of empty tensor");
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), rg, "mean")
    }

    /// Euclidean distance matrix between the rows of `x`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let (n, width) = self.matrix_dims(x, "pairwise_distance")?;
        let xv = self.value(x);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = xv[i * width..(i + 1) * width]
                    .iter()
                    .zip(&xv[j * width..(j + 1) * width])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![n, n], out, Op::PairwiseDistance { x, n, width }, rg, "pairwise_distance")
    }

    /// Picks flat-indexed entries of `x` into a vector.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return dim_err(format!("gather: index {bad} out of range {}", xv.len()));
        }
        let out = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        self.push(vec![idx.len()], out, Op::Gather { x, idx }, rg, "gather")
    }

    /// Mean negative log-likelihood of integer labels under row log-probs.
    pub fn nll(&mut self, lp: Var, labels: &[usize]) -> Result<Var> {
        let (n, cols) = self.matrix_dims(lp, "nll")?;
        if labels.len() != n {
            return dim_err(format!("nll: {} labels for {n} rows", labels.len()));
        }
        if n == 0 {
            return dim_err("nll: empty batch");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return contract_err(format!("label {bad} outside [0, {cols})"));
        }
        let v = self.value(lp);
        let loss = -labels.iter().enumerate().map(|(i, &l)| v[i * cols + l]).sum::<f64>() / n as f64;
        let rg = self.rg(&[lp]);
        self.push(
            vec![1],
            vec![loss],
            Op::Nll {
                lp,
                labels: labels.to_vec(),
                cols,
            },
            rg,
            "nll",
        )
    }

    /// Mean over rows of `-sum_c target[i,c] * lp[i,c]` with a detached target.
    pub fn soft_nll(&mut self, lp: Var, target: &[f64]) -> Result<Var> {
        let (rows, _) = self.matrix_dims(lp, "soft_nll")?;
        if target.len() != self.value(lp).len() {
            return dim_err("soft_nll: target shape differs from log-probs");
        }
        if rows == 0 {
            return dim_err("soft_nll: empty batch");
        }
        let loss = -self.value(lp).iter().zip(target).map(|(l, t)| l * t).sum::<f64>() / rows as f64;
        let rg = self.rg(&[lp]);
        self.push(
            vec![1],
            vec![loss],
            Op::SoftNll {
                lp,
                target: target.to_vec(),
                rows,
            },
            rg,
            "soft_nll",
        )
    }

    /// Mean soft binary cross-entropy of probabilities `t` against a detached
    /// target. `literal` keeps only the `-target * log t` term.
    pub fn binary_soft_ce(&mut self, t: Var, target: &[f64], literal: bool) -> Result<Var> {
        let tv = self.value(t);
        if tv.len() != target.len() {
            return dim_err("binary_soft_ce: length mismatch");
        }
        if tv.is_empty() {
            return dim_err("binary_soft_ce: empty input");
        }
        let n = tv.len() as f64;
        let loss = tv
            .iter()
            .zip(target)
            .map(|(&s, &q)| {
                let s = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                if literal {
                    -q * s.ln()
                } else {
                    -(q * s.ln() + (1.0 - q) * (1.0 - s).ln())
                }
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[t]);
        self.push(
            vec![1],
            vec![loss],
            Op::BinarySoftCe {
                t,
                target: target.to_vec(),
                literal,
            },
            rg,
            "binary_soft_ce",
        )
    }

    /// Reverse pass from a scalar loss. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AbmtError::State("backward already ran on this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Linear { x, w, b, n, din, dout } => {
                let xv = self.value(x);
                let wv = self.value(w);
                acc(x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..dout {
                            let gij = g[i * dout + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let wr = &wv[j * din..(j + 1) * din];
                            gx[i * din..(i + 1) * din].iter_mut().zip(wr).for_each(|(a, w)| *a += gij * w);
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for i in 0..n {
                        let xr = &xv[i * din..(i + 1) * din];
                        for j in 0..dout {
                            let gij = g[i * dout + j];
                            if gij == 0.0 {
                                continue;
                            }
                            gw[j * din..(j + 1) * din].iter_mut().zip(xr).for_each(|(a, x)| *a += gij * x);
                        }
                    }
                });
                if let Some(b) = b {
                    acc(b, &mut |gb| {
                        for row in g.chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Scale(a, c) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            &Op::Relu(a) => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let out = &node.value;
                acc(a, &mut |ga| {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * s * (1.0 - s);
                    }
                });
            }
            &Op::LogSoftmax { x, cols } => {
                let out = &node.value;
                acc(x, &mut |gx| {
                    for ((gr, yr), outr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let total: f64 = yr.iter().sum();
                        for c in 0..cols {
                            gr[c] += yr[c] - outr[c].exp() * total;
                        }
                    }
                });
            }
            Op::Pool {
                x,
                mode,
                parts,
                width,
                argmax,
            } => {
                let (parts, width) = (*parts, *width);
                let n = g.len() / width.max(1);
                acc(*x, &mut |gx| match mode {
                    Pooling::Mean => {
                        for i in 0..n {
                            for p in 0..parts {
                                for d in 0..width {
                                    gx[(i * parts + p) * width + d] += g[i * width + d] / parts as f64;
                                }
                            }
                        }
                    }
                    Pooling::Max => {
                        for i in 0..n {
                            for d in 0..width {
                                let p = argmax[i * width + d];
                                gx[(i * parts + p) * width + d] += g[i * width + d];
                            }
                        }
                    }
                });
            }
            &Op::Concat { a, b, da, db } => {
                let w = da + db;
                acc(a, &mut |ga| {
                    for (gr, yr) in ga.chunks_mut(da.max(1)).zip(g.chunks(w.max(1))) {
                        if da > 0 {
                            gr.iter_mut().zip(&yr[..da]).for_each(|(x, y)| *x += y);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for (gr, yr) in gb.chunks_mut(db.max(1)).zip(g.chunks(w.max(1))) {
                        if db > 0 {
                            gr.iter_mut().zip(&yr[da..]).for_each(|(x, y)| *x += y);
                        }
                    }
                });
            }
            Op::L2Normalize {
                x,
                width,
                denom,
                clamped,
            } => {
                let width = (*width).max(1);
                let out = &node.value;
                acc(*x, &mut |gx| {
                    for (i, ((gr, yr), outr)) in gx.chunks_mut(width).zip(g.chunks(width)).zip(out.chunks(width)).enumerate() {
                        let d = denom[i];
                        if clamped[i] {
                            gr.iter_mut().zip(yr).for_each(|(a, y)| *a += y / d);
                        } else {
                            let dot: f64 = yr.iter().zip(outr).map(|(a, b)| a * b).sum();
                            for k in 0..gr.len() {
                                gr[k] += (yr[k] - outr[k] * dot) / d;
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            &Op::PairwiseDistance { x, n, width } => {
                let xv = self.value(x);
                let dist = &node.value;
                acc(x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..n {
                            let d = dist[i * n + j];
                            if i == j || d == 0.0 {
                                continue;
                            }
                            let c = (g[i * n + j] + g[j * n + i]) / d;
                            if c == 0.0 {
                                continue;
                            }
                            for k in 0..width {
                                gx[i * width + k] += c * (xv[i * width + k] - xv[j * width + k]);
                            }
                        }
                    }
                });
            }
            Op::Gather { x, idx } => acc(*x, &mut |gx| {
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
            }),
            Op::Nll { lp, labels, cols } => {
                let n = labels.len() as f64;
                acc(*lp, &mut |gl| {
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * cols + l] -= g[0] / n;
                    }
                });
            }
            Op::SoftNll { lp, target, rows } => {
                let n = *rows as f64;
                acc(*lp, &mut |gl| gl.iter_mut().zip(target).for_each(|(a, t)| *a -= g[0] * t / n));
            }
            Op::BinarySoftCe { t, target, literal } => {
                let tv = self.value(*t);
                let n = tv.len() as f64;
                acc(*t, &mut |gt| {
                    for k in 0..gt.len() {
                        let s = tv[k];
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&s) {
                            continue;
                        }
                        let q = target[k].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        let d = if *literal { -q / s } else { -(q / s - (1.0 - q) / (1.0 - s)) };
                        gt[k] += g[0] * d / n;
                    }
                });
            }
        }
    }
}
