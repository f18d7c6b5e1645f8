//! Dense numeric kernels shared by the whole engine.
//!
//! Every reduction (dot products, sums, variances) is carried out in `f64`
//! and narrowed to the storage scalar on the way out, so `f32` and `f64`
//! engines run the same arithmetic and differ only by the final rounding.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Storage scalar of the engine: `f32` (default) or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Gathers the listed rows, in the listed order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with identical column counts.
    pub fn vstack(parts: &[&Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    left: (rows, cols),
                    right: m.shape(),
                });
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| T::narrow(a.widen() + b.widen()))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Converts to another storage scalar.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::narrow(x.widen())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> Matrix<T> {
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

impl<T: Copy> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T: Copy> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// `a × b`, accumulated in `f64`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let wide_b: Vec<f64> = b.data.iter().map(|x| x.widen()).collect();
    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.fill(0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = aik.widen();
            if aik == 0.0 {
                continue;
            }
            let brow = &wide_b[k * m..(k + 1) * m];
            for (o, &bkj) in acc.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
        out.extend(acc.iter().map(|&v| T::narrow(v)));
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Numerically stable softmax of a finite, nonempty vector.
pub fn softmax_row<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Usage("softmax of an empty vector".into()));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Usage(format!("softmax input {i} is not finite")));
    }
    let wide: Vec<f64> = x.iter().map(|v| v.widen()).collect();
    Ok(softmax_wide(&wide).into_iter().map(T::narrow).collect())
}

// Entries equal to -inf receive exactly zero mass.
fn softmax_wide(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Parameter-free layer normalization.
pub fn layer_norm<T: Scalar>(x: &[T], eps: f64) -> Vec<T> {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.widen()).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|v| {
            let c = v.widen() - mean;
            c * c
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().map(|v| T::narrow((v.widen() - mean) * inv)).collect()
}

/// Row-wise [`layer_norm`] of a matrix.
pub fn layer_norm_rows<T: Scalar>(x: &Matrix<T>, eps: f64) -> Matrix<T> {
    let mut data = Vec::with_capacity(x.data.len());
    for i in 0..x.rows {
        data.extend(layer_norm(x.row(i), eps));
    }
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

/// Result of one causal multi-head attention call.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    /// Concatenated head outputs, `n × d`.
    pub out: Matrix<T>,
    /// Attention distribution of the final query position, averaged over heads.
    pub last_row_weights: Vec<f64>,
}

fn check_attention_shapes<T>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize) -> Result<()> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape {
            op: "causal_attention",
            left: q.shape(),
            right: if q.shape() != k.shape() { k.shape() } else { v.shape() },
        });
    }
    if heads == 0 || q.cols % heads != 0 {
        return Err(Error::Config(format!(
            "width {} is not divisible by {} heads",
            q.cols, heads
        )));
    }
    if q.rows == 0 {
        return Err(Error::Usage("attention over an empty sequence".into()));
    }
    Ok(())
}

/// Scaled dot-product attention with a strict causal mask.
///
/// Scale is `1/sqrt(d/heads)`. Only the unmasked prefix of each row is
/// evaluated; see [`causal_attention_weights`] for the full masked tensor.
pub fn causal_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
) -> Result<Attention<T>> {
    check_attention_shapes(q, k, v, heads)?;
    let (n, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let wq: Vec<f64> = q.data.iter().map(|x| x.widen()).collect();
    let wk: Vec<f64> = k.data.iter().map(|x| x.widen()).collect();
    let wv: Vec<f64> = v.data.iter().map(|x| x.widen()).collect();

    let mut out = vec![0.0f64; n * d];
    let mut last = vec![0.0f64; n];
    let mut logits = vec![0.0f64; n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &wq[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &wk[j * d + off..j * d + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                logits[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for l in &mut logits[..=i] {
                *l = (*l - max).exp();
                sum += *l;
            }
            let orow = &mut out[i * d + off..i * d + off + dh];
            for (j, l) in logits[..=i].iter_mut().enumerate() {
                *l /= sum;
                let vj = &wv[j * d + off..j * d + off + dh];
                for (o, &x) in orow.iter_mut().zip(vj) {
                    *o += *l * x;
                }
            }
            if i == n - 1 {
                for (acc, &w) in last.iter_mut().zip(&logits[..n]) {
                    *acc += w;
                }
            }
        }
    }
    for w in &mut last {
        *w /= heads as f64;
    }
    Ok(Attention {
        out: Matrix {
            rows: n,
            cols: d,
            data: out.into_iter().map(T::narrow).collect(),
        },
        last_row_weights: last,
    })
}

/// Full per-head `n × n` attention weights, computed by masking every
/// above-diagonal logit to `-inf` before a full-row softmax.
pub fn causal_attention_weights<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    heads: usize,
) -> Result<Vec<Matrix<f64>>> {
    check_attention_shapes(q, k, k, heads)?;
    let (n, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut all = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            let qi = &q.row(i)[off..off + dh];
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    if j > i {
                        f64::NEG_INFINITY
                    } else {
                        let kj = &k.row(j)[off..off + dh];
                        qi.iter().zip(kj).map(|(a, b)| a.widen() * b.widen()).sum::<f64>() * scale
                    }
                })
                .collect();
            data.extend(softmax_wide(&logits));
        }
        all.push(Matrix {
            rows: n,
            cols: n,
            data,
        });
    }
    Ok(all)
}

/// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix<f32> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = m(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
        let z = Matrix::<f32>::zeros(2, 2);
        assert_eq!(matmul(&z, &x).unwrap(), z);
    }

    #[test]
    fn matmul_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_row(&[3.0f64; 4]).unwrap();
        assert!(s.iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let s = softmax_row(&[0.0, 2f64.ln()]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-12);

        let s = softmax_row(&[1000.0f32, 0.0]).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-6 && s[1] < 1e-6);

        assert!(matches!(softmax_row::<f32>(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn layer_norm_cases() {
        assert_eq!(layer_norm(&[0.0f32; 5], 1e-5), vec![0.0; 5]);
        assert_eq!(layer_norm(&[5.0f32; 3], 1e-5), vec![0.0; 3]);
        let y = layer_norm(&[1.0f64, -1.0], 1e-5);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - expect).abs() < 1e-12 && (y[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn attention_single_position() {
        let q = m(&[&[0.3, -0.1]]);
        let v = m(&[&[7.0, 8.0]]);
        let a = causal_attention(&q, &q, &v, 1).unwrap();
        assert_eq!(a.out, v);
        assert_eq!(a.last_row_weights, vec![1.0]);
    }

    #[test]
    fn attention_equal_keys_is_uniform() {
        let q = m(&[&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0, 1.0], &[-1.0, 0.5, 2.0, 0.0]]);
        let k = Matrix::from_rows(&[[0.5f32; 4]; 3]).unwrap();
        let a = causal_attention(&q, &k, &q, 2).unwrap();
        for w in a.last_row_weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_hand_trace() {
        // one head, d = 2, scale 1/sqrt(2)
        let q = m(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let k = m(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let v = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = causal_attention(&q, &k, &v, 1).unwrap();
        // row 1 logits: q1·k0 = 2, q1·k1 = 2 -> equal
        assert!((a.last_row_weights[0] - 0.5).abs() < 1e-12);
        assert!((a.out[(1, 0)] - 0.5).abs() < 1e-7);
        assert!((a.out[(1, 1)] - 0.5).abs() < 1e-7);
        assert_eq!(a.out.row(0), &[1.0, 0.0]);

        let q = m(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let k = m(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let a = causal_attention(&q, &k, &v, 1).unwrap();
        // row 1 logits: 2/sqrt2, 1/sqrt2
        let e0 = (2.0f64 / 2f64.sqrt()).exp();
        let e1 = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e0 / (e0 + e1);
        assert!((a.last_row_weights[0] - w0).abs() < 1e-12);
        assert!((a.out[(1, 0)] as f64 - w0).abs() < 1e-6);
        assert!((a.out[(1, 1)] as f64 - (1.0 - w0)).abs() < 1e-6);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let q = Matrix::<f32>::zeros(2, 6);
        assert!(matches!(
            causal_attention(&q, &q, &q, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_weights_agree_with_fast_path() {
        let q = m(&[&[0.1, 0.2, 0.3, 0.4], &[1.0, -1.0, 0.5, 0.0], &[0.3, 0.3, -0.2, 0.9]]);
        let k = m(&[&[0.5, 0.1, 0.0, 0.2], &[-0.4, 0.8, 0.1, 0.1], &[0.2, 0.2, 0.2, 0.2]]);
        let fast = causal_attention(&q, &k, &q, 2).unwrap();
        let full = causal_attention_weights(&q, &k, 2).unwrap();
        for j in 0..3 {
            let avg = (full[0][(2, j)] + full[1][(2, j)]) / 2.0;
            assert!((avg - fast.last_row_weights[j]).abs() < 1e-12);
        }
        for w in &full {
            assert_eq!(w[(0, 1)], 0.0);
            assert_eq!(w[(0, 2)], 0.0);
            assert_eq!(w[(1, 2)], 0.0);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_808_009_391_723_2).abs() < 1e-12);
    }
}
