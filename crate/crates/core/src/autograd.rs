//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse, hands out gradients for the leaves that asked for
//! them and clears the tape; a second call is rejected.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Concat(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the loss with respect to each leaf that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(&var).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        let value = Tensor::new(&shape, tensor.into_data()).expect("valid tensor");
        self.push(value, Op::Leaf, rg)
    }

    /// Records a copy of `tensor` as a leaf.
    pub fn param(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        let value = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = tensor::check_matmul(va.shape(), vb.shape())?;
        let data = tensor::matmul(va.data(), vb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `bias` (length = last dim of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_bias(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), tensor::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), tensor::sigmoid)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::LogSigmoid(x), tensor::log_sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax();
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let w = vx.width();
        let mut data = vx.data().to_vec();
        if w > 0 {
            data.chunks_exact_mut(w).for_each(tensor::log_softmax_in_place);
        }
        let value = Tensor::new(vx.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let w = vx.width();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.len() != w || vb.len() != w {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: vx.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let (data, stats) = tensor::layer_norm_rows(vx.data(), w, vg.data(), vb.data());
        let value = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Causal scaled dot-product attention over `[T×d]` projections; row `i`
    /// attends to rows `0..=i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() || vq.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "attention",
                left: vq.shape().to_vec(),
                right: vk.shape().to_vec(),
            });
        }
        let (t, d) = (vq.shape()[0], vq.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::parameter(format!("{heads} heads do not divide width {d}")));
        }
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(heads * t * (t + 1) / 2);
        for i in 0..t {
            tensor::attend_row(
                vq.row(i),
                vk.data(),
                vv.data(),
                i,
                heads,
                &mut out[i * d..(i + 1) * d],
                Some(&mut probs),
            );
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(&[t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Row lookup: output row `t` is `table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                left: vt.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Vocabulary {
                    token: id,
                    vocab_size: rows,
                });
            }
            data.extend_from_slice(vt.row(id as usize));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `x[i, idx[i]]` from an `m×n` tensor, giving a length-`m` vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let w = vx.width();
        if vx.rows() != idx.len() || idx.iter().any(|&j| j >= w) {
            return Err(Error::Dimension {
                op: "pick",
                left: vx.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| vx.data()[i * w + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[idx.len()], data)?,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: shape.to_vec(),
                right: vec![start, end],
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = vx.data()[start * inner..end * inner].to_vec();
        let mut new_shape = shape.to_vec();
        new_shape[0] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&new_shape, data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = vx.data().iter().sum::<f64>() / vx.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Back-propagates from a scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract(
                "backward already ran on this graph; record a new forward pass",
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss variable does not belong to this graph"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                out.grads.insert(Var(i), g);
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if rg(*a) {
                    accumulate(grads, *a, &tensor::matmul_bt(g, vb.data(), m, k, n));
                }
                if rg(*b) {
                    accumulate(grads, *b, &tensor::matmul_at(va.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
                if rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let d: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, &d);
                }
                if rg(*b) {
                    let d: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::AddBias(x, bias) => {
                if rg(*x) {
                    accumulate(grads, *x, g);
                }
                if rg(*bias) {
                    let w = val(*bias).len();
                    let mut d = vec![0.0; w];
                    for row in g.chunks_exact(w) {
                        for (dv, gv) in d.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    accumulate(grads, *bias, &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *x, &d);
            }
            Op::AddScalar(x) => accumulate(grads, *x, g),
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| g * tensor::gelu_grad(x))
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::LogSigmoid(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| g * tensor::sigmoid(-x))
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Log(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect();
                accumulate(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.width();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(w)
                    .zip(g.chunks_exact(w))
                    .zip(d.chunks_exact_mut(w))
                {
                    let s = tensor::dot(yr, gr);
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let w = node.value.width();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(w)
                    .zip(g.chunks_exact(w))
                    .zip(d.chunks_exact_mut(w))
                {
                    let s: f64 = gr.iter().sum();
                    for j in 0..w {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let vx = val(*x).data();
                let gv = val(*gain).data();
                let w = gv.len();
                let mut dx = vec![0.0; vx.len()];
                let mut dg = vec![0.0; w];
                let mut db = vec![0.0; w];
                let mut xhat = vec![0.0; w];
                let mut dxhat = vec![0.0; w];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &vx[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    for j in 0..w {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / w as f64;
                    let m2 = tensor::dot(&dxhat, &xhat) / w as f64;
                    let dr = &mut dx[r * w..(r + 1) * w];
                    for j in 0..w {
                        dr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if rg(*x) {
                    accumulate(grads, *x, &dx);
                }
                if rg(*gain) {
                    accumulate(grads, *gain, &dg);
                }
                if rg(*bias) {
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Concat(a, b) => {
                let (wa, wb) = (val(*a).width(), val(*b).width());
                let w = wa + wb;
                let rows = g.len() / w;
                let mut da = Vec::with_capacity(rows * wa);
                let mut db = Vec::with_capacity(rows * wb);
                for row in g.chunks_exact(w) {
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                if rg(*a) {
                    accumulate(grads, *a, &da);
                }
                if rg(*b) {
                    accumulate(grads, *b, &db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let (t, d) = (vq.shape()[0], vq.shape()[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut offset = 0;
                let mut dp = Vec::with_capacity(t);
                for i in 0..t {
                    let span = i + 1;
                    for h in 0..*heads {
                        let lo = h * dh;
                        let p = &probs[offset..offset + span];
                        offset += span;
                        let gi = &g[i * d + lo..i * d + lo + dh];
                        dp.clear();
                        for (j, &pj) in p.iter().enumerate() {
                            let vj = &vd[j * d + lo..j * d + lo + dh];
                            dp.push(tensor::dot(gi, vj));
                            for (acc, gv) in dv[j * d + lo..j * d + lo + dh].iter_mut().zip(gi) {
                                *acc += pj * gv;
                            }
                        }
                        let s = tensor::dot(p, &dp);
                        let qi = &qd[i * d + lo..i * d + lo + dh];
                        for (j, &pj) in p.iter().enumerate() {
                            let ds = pj * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kd[j * d + lo..j * d + lo + dh];
                            for (acc, kv) in dq[i * d + lo..i * d + lo + dh].iter_mut().zip(kj) {
                                *acc += ds * kv;
                            }
                            for (acc, qv) in dk[j * d + lo..j * d + lo + dh].iter_mut().zip(qi) {
                                *acc += ds * qv;
                            }
                        }
                    }
                }
                if rg(*q) {
                    accumulate(grads, *q, &dq);
                }
                if rg(*k) {
                    accumulate(grads, *k, &dk);
                }
                if rg(*v) {
                    accumulate(grads, *v, &dv);
                }
            }
            Op::Embedding { table, ids } => {
                let vt = val(*table);
                let d = vt.width();
                let mut dt = vec![0.0; vt.len()];
                for (t, &id) in ids.iter().enumerate() {
                    let row = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (acc, gv) in row.iter_mut().zip(&g[t * d..(t + 1) * d]) {
                        *acc += gv;
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::Pick { x, idx } => {
                let vx = val(*x);
                let w = vx.width();
                let mut d = vec![0.0; vx.len()];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * w + j] = g[i];
                }
                accumulate(grads, *x, &d);
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let inner: usize = vx.shape()[1..].iter().product();
                let mut d = vec![0.0; vx.len()];
                d[start * inner..start * inner + g.len()].copy_from_slice(g);
                accumulate(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; val(*x).len()];
                accumulate(grads, *x, &d);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let d = vec![g[0] / n as f64; n];
                accumulate(grads, *x, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Checks analytic gradients of `build` against central differences for
    /// every element of every input.
    fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t, false)).collect();
            let out = build(&mut g, &vars);
            g.value(out).item().unwrap()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t, true)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let mut worst = 0.0f64;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[ti]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
            for e in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[e] += EPS;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[e] -= EPS;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
                worst = worst.max(rel_err(analytic[e], numeric));
            }
        }
        worst
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[5, 7]);
        let b = random(&mut rng, &[7, 3]);
        let w = random(&mut rng, &[5, 3]);
        let err = grad_check(&[a, b, w], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            let c = g.mul(c, v[2]).unwrap();
            g.sum(c)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn log_sigmoid_gradient_at_fixed_points() {
        for x in [-2.0, 0.0, 2.0] {
            let t = Tensor::new(&[1], vec![x]).unwrap();
            let err = grad_check(&[t], |g, v| {
                let y = g.log_sigmoid(v[0]);
                g.sum(y)
            });
            assert!(err < 1e-6, "x={x}: {err}");
        }
    }

    #[test]
    fn softmax_gradient_random_length_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[6]);
        let w = random(&mut rng, &[6]);
        let err = grad_check(&[x, w], |g, v| {
            let s = g.softmax(v[0]);
            let s = g.mul(s, v[1]).unwrap();
            g.sum(s)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[3, 5]);
        let gain = random(&mut rng, &[5]);
        let bias = random(&mut rng, &[5]);
        let w = random(&mut rng, &[3, 5]);
        let err = grad_check(&[x, gain, bias, w], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let y = g.mul(y, v[3]).unwrap();
            g.sum(y)
        });
        assert!(err < 1e-5, "{err}");
    }

    /// Every differentiable op, over 20 seeds.
    #[test]
    fn all_ops_agree_with_finite_differences_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let q = random(&mut rng, &[4, 6]);
            let k = random(&mut rng, &[4, 6]);
            let v = random(&mut rng, &[4, 6]);
            let table = random(&mut rng, &[5, 6]);
            let bias = random(&mut rng, &[6]);
            let gain = random(&mut rng, &[6]);
            let side = random(&mut rng, &[4, 2]);
            let head = random(&mut rng, &[8, 3]);
            let err = grad_check(&[q, k, v, table, bias, gain, side, head], |g, x| {
                let att = g.causal_attention(x[0], x[1], x[2], 2).unwrap();
                let emb = g.embedding(x[3], &[4, 0, 4, 2]).unwrap();
                let h = g.add(att, emb).unwrap();
                let h = g.add_bias(h, x[4]).unwrap();
                let h = g.gelu(h);
                let h = g.layer_norm(h, x[5], x[4]).unwrap();
                let h = g.sub(h, x[0]).unwrap();
                let h = g.concat(h, x[6]).unwrap();
                let logits = g.matmul(h, x[7]).unwrap();
                let lp = g.log_softmax(logits);
                let picked = g.pick(lp, &[0, 2, 1, 1]).unwrap();
                let tail = g.slice_rows(picked, 1, 4).unwrap();
                let sig = g.sigmoid(tail);
                let lg = g.log(sig);
                let ls = g.log_sigmoid(tail);
                let both = g.add(lg, ls).unwrap();
                let both = g.scale(both, 0.7);
                let both = g.add_scalar(both, 0.3);
                let sm = g.softmax(logits);
                let a = g.mean(both).unwrap();
                let b = g.sum(sm);
                let ab = g.concat(a, b).unwrap();
                g.sum(ab)
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sum_gives_ones_and_square_gives_twice() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let s = g.sum(v);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let s = g.sum(v);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), false);
        let b = g.param(&Tensor::new(&[2], vec![3.0, 4.0]).unwrap(), true);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn attention_single_position_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(&[1, 4], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let k = g.constant(&[1, 4], vec![1.0, 1.0, -1.0, 0.5]).unwrap();
        let v = g.constant(&[1, 4], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let out = g.causal_attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(out).data(), &[9.0, 8.0, 7.0, 6.0]);
    }
}
