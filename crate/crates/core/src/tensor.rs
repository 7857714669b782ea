//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! inference path and the autograd tape.
//!
//! Every kernel accumulates in a fixed order that does not depend on how many
//! rows are processed together, so a row computed inside a batch is
//! bit-identical to the same row computed alone. The incremental KV-cache path
//! and the batched leaf evaluation rely on this.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![width],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[rows.len(), width], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for scalars).
    pub fn width(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of last-axis slices.
    pub fn rows(&self) -> usize {
        let w = self.width();
        if w == 0 {
            self.shape.iter().rev().skip(1).product()
        } else {
            self.data.len() / w
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = check_matmul(self.shape(), other.shape())?;
        Tensor::new(&[m, n], matmul(&self.data, &other.data, m, k, n))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(&self.shape, data)
    }

    /// Adds a vector to every last-axis slice.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.len() != self.width() {
            return Err(Error::Dimension {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        add_bias_rows(&mut data, &bias.data);
        Tensor::new(&self.shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn softmax(&self) -> Tensor {
        let mut data = self.data.clone();
        softmax_rows(&mut data, self.width());
        Tensor {
            shape: self.shape.clone(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let w = self.width();
        if gain.len() != w || bias.len() != w {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let (data, _) = layer_norm_rows(&self.data, w, &gain.data, &bias.data);
        Tensor::new(&self.shape, data)
    }

    /// Concatenates along the last axis.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::Dimension {
                op: "concat",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (wa, wb) = (self.width(), other.width());
        let data = concat_rows(&self.data, wa, &other.data, wb);
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(wa + wb);
        } else {
            *shape.last_mut().unwrap() = wa + wb;
        }
        Tensor::new(&shape, data)
    }
}

pub(crate) fn check_matmul(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// `a[m×k] · b[k×n]`. Each output element sums over `k` in ascending order.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    // Blocks of rows share each streamed row of `b`.
    const ROWS: usize = 8;
    for i0 in (0..m).step_by(ROWS) {
        let i1 = (i0 + ROWS).min(m);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for i in i0..i1 {
                let coef = a[i * k + p];
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += coef * bv;
                }
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` where `b` is `k×n`; result `m×k`.
pub(crate) fn matmul_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(g_row, b_row);
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result `k×n`.
pub(crate) fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let coef = a[i * k + p];
            if coef == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += coef * gv;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn add_bias_rows(data: &mut [f64], bias: &[f64]) {
    for row in data.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn softmax_rows(data: &mut [f64], width: usize) {
    if width == 0 {
        return;
    }
    for row in data.chunks_exact_mut(width) {
        softmax_in_place(row);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    for v in row.iter_mut() {
        *v -= log_z;
    }
}

/// Normalizes each row; returns the output and per-row `(mean, rstd)`.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    width: usize,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut out = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(x.len() / width.max(1));
    for (row, out_row) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..width {
            out_row[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

pub(crate) fn concat_rows(a: &[f64], wa: usize, b: &[f64], wb: usize) -> Vec<f64> {
    let rows = if wa > 0 { a.len() / wa } else { b.len() / wb.max(1) };
    let mut out = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b[r * wb..(r + 1) * wb]);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
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

/// `ln σ(x)`, stable for large |x|.
#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Causal multi-head attention for one query row.
///
/// `keys`/`values` hold rows for absolute positions `0..`; the query at
/// position `pos` attends to rows `0..=pos`. When `probs` is given it receives
/// the attention weights, head-major (`heads × (pos+1)`).
pub(crate) fn attend_row(
    query: &[f64],
    keys: &[f64],
    values: &[f64],
    pos: usize,
    heads: usize,
    out: &mut [f64],
    probs: Option<&mut Vec<f64>>,
) {
    attend_chunks(query, &[(keys, values)], pos + 1, heads, out, probs);
}

/// Attention over keys/values split into consecutive chunks of rows, reading
/// the first `span` rows in total. Bit-identical to a single contiguous chunk.
pub(crate) fn attend_chunks(
    query: &[f64],
    chunks: &[(&[f64], &[f64])],
    span: usize,
    heads: usize,
    out: &mut [f64],
    mut probs: Option<&mut Vec<f64>>,
) {
    let d = query.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; span];
    for h in 0..heads {
        let lo = h * dh;
        let q = &query[lo..lo + dh];
        let mut j = 0;
        'keys: for (keys, _) in chunks {
            for row in keys.chunks_exact(d) {
                if j == span {
                    break 'keys;
                }
                scores[j] = dot(q, &row[lo..lo + dh]) * scale;
                j += 1;
            }
        }
        debug_assert_eq!(j, span);
        softmax_in_place(&mut scores);
        let o = &mut out[lo..lo + dh];
        o.iter_mut().for_each(|v| *v = 0.0);
        let mut j = 0;
        'values: for (_, values) in chunks {
            for row in values.chunks_exact(d) {
                if j == span {
                    break 'values;
                }
                let p = scores[j];
                for (ov, vv) in o.iter_mut().zip(&row[lo..lo + dh]) {
                    *ov += p * vv;
                }
                j += 1;
            }
        }
        if let Some(buf) = probs.as_deref_mut() {
            buf.extend_from_slice(&scores);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_returns_operand() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.25, 9.0, -1.0]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn batched_rows_match_single_rows_bitwise() {
        let m = 11;
        let (k, n) = (7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 17) as f64 - 8.0) / 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 11) as f64 - 5.0) / 7.0).collect();
        let full = matmul(&a, &b, m, k, n);
        for i in 0..m {
            let single = matmul(&a[i * k..(i + 1) * k], &b, 1, k, n);
            assert_eq!(&full[i * n..(i + 1) * n], single.as_slice());
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let t = Tensor::new(&[3], vec![0.0; 3]).unwrap().softmax();
        for v in t.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::new(&[2], vec![1000.0, 0.0]).unwrap().softmax();
        assert_eq!(t.data()[0], 1.0);
        assert!(t.data()[1] < 1e-300);
        assert!(t.is_finite());
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(log_sigmoid(0.0), -std::f64::consts::LN_2);
    }

    #[test]
    fn concat_preserves_order() {
        let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(&[2], vec![4.0, 5.0]).unwrap();
        let c = a.concat_cols(&b).unwrap();
        assert_eq!(c.shape(), &[5]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn layer_norm_constant_gives_bias() {
        let x = Tensor::new(&[1, 4], vec![2.5; 4]).unwrap();
        let gain = Tensor::new(&[4], vec![3.0; 4]).unwrap();
        let bias = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = x.layer_norm(&gain, &bias).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn layer_norm_two_points() {
        let x = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
        let gain = Tensor::new(&[2], vec![1.0; 2]).unwrap();
        let bias = Tensor::zeros(&[2]);
        let y = x.layer_norm(&gain, &bias).unwrap();
        // var = 1, so the epsilon shrinks the result by 1/sqrt(1 + 1e-5).
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-15);
        assert!((y.data()[1] - s).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn shape_product_enforced() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one_for_finite_input(
            rows in 1usize..4,
            data in proptest::collection::vec(-1e6f64..1e6, 12),
            scale in proptest::sample::select(vec![1e-3, 1.0, 1e3]),
        ) {
            let width = 12 / rows.max(1);
            let n = width * rows;
            let t = Tensor::new(&[rows, width], data[..n].iter().map(|x| x * scale).collect()).unwrap();
            let p = t.softmax();
            for i in 0..rows {
                let s: f64 = p.row(i).iter().sum();
                proptest::prop_assert!((s - 1.0).abs() <= 1e-12, "row {} sums to {}", i, s);
            }
        }
    }
}
