//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Everything here is a pure function of its inputs. The reverse-mode engine in
//! [`crate::autodiff`] calls these same kernels for its forward values, so a
//! replayed tape reproduces the recorded outputs bit for bit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[self.shape.len() - 1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().expect("rank >= 1");
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn slab(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        if parts.iter().any(|p| p.shape != first.shape) {
            return Err(Error::shape("stacked tensors differ in shape"));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Tensor::from_parts(shape, data))
    }
}

/// One tensor per encoder block, all sharing a shape (`h×s×s` for
/// attention-shaped stacks).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorStack {
    blocks: Vec<Tensor>,
}

impl TensorStack {
    pub fn new(blocks: Vec<Tensor>) -> Self {
        TensorStack { blocks }
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Tensor] {
        &mut self.blocks
    }

    pub fn into_blocks(self) -> Vec<Tensor> {
        self.blocks
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Checks that both stacks have the same depth and per-block shapes.
    pub fn check_matches(&self, other: &TensorStack) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::shape(format!(
                "stack depths differ: {} vs {}",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (b, (x, y)) in self.blocks.iter().zip(&other.blocks).enumerate() {
            if x.shape() != y.shape() {
                return Err(Error::shape(format!(
                    "block {b}: {:?} vs {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// matrix products

fn gemm(
    a: &Tensor,
    a_transposed: bool,
    b: &Tensor,
    b_transposed: bool,
) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k, rsa, csa) = if a_transposed {
        (ac, ar, 1, ac)
    } else {
        (ar, ac, ac, 1)
    };
    let (k2, n, rsb, csb) = if b_transposed {
        (bc, br, 1, bc)
    } else {
        (br, bc, bc, 1)
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims {k} vs {k2} ({:?}{} x {:?}{})",
            a.shape,
            if a_transposed { "^T" } else { "" },
            b.shape,
            if b_transposed { "^T" } else { "" },
        )));
    }
    let mut out = vec![0.0; m * n];
    // SAFETY: strides describe exactly the row-major buffers checked above,
    // and `out` is a distinct m*n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · b` for rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false)
}

/// `a · bᵀ`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, true)
}

/// `aᵀ · b`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, true, b, false)
}

// ---------------------------------------------------------------------------
// elementwise / row-wise kernels

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("add {:?} + {:?}", a.shape, b.shape)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

/// Adds a length-`c` row vector to every row of an `r×c` matrix.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = a.dims2()?;
    if bias.len() != c {
        return Err(Error::shape(format!(
            "bias of {} values for {c} columns",
            bias.len()
        )));
    }
    let mut data = a.data.clone();
    for row in data.chunks_exact_mut(c) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

/// Softmax over the last axis, stabilized by subtracting each slice's max.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::shape("softmax of an empty tensor"));
    }
    let c = *x.shape.last().expect("non-empty tensor has rank >= 1");
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(c) {
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
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Exact erf-based GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise layer normalization with per-column gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape("layer norm affine parameters do not match width"));
    }
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(c) {
        let (mean, inv_std) = row_moments(row);
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Mean of each row of an `r×c` matrix, returned as a length-`r` vector.
pub fn row_means(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let data = x
        .data
        .chunks_exact(c)
        .map(|row| row.iter().sum::<f64>() / c as f64)
        .collect();
    Ok(Tensor::from_parts(vec![r], data))
}

/// Multiplies row `i` of `x` by `scale[i]`.
pub fn scale_rows(x: &Tensor, scale: &[f64]) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if scale.len() != r {
        return Err(Error::shape(format!("{} row scales for {r} rows", scale.len())));
    }
    let mut data = x.data.clone();
    for (row, s) in data.chunks_exact_mut(c).zip(scale) {
        for v in row {
            *v *= s;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

/// Divides each row by its sum. Rows summing to zero are left unchanged.
pub fn row_normalize(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(c) {
        let sum: f64 = row.iter().sum();
        if sum != 0.0 {
            for v in row {
                *v /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

/// Mean over the leading axis of an `h×r×c` stack.
pub fn mean_leading(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::shape("mean over leading axis needs rank >= 2"));
    }
    let h = x.shape[0];
    let inner: usize = x.shape[1..].iter().product();
    let mut out = vec![0.0; inner];
    for slab in x.data.chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(slab) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= h as f64;
    }
    Ok(Tensor::from_parts(x.shape[1..].to_vec(), out))
}

/// Columns `[start, start+len)` of a rank-2 tensor.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if len == 0 || start + len > c {
        return Err(Error::shape(format!("column slice {start}+{len} of {c}")));
    }
    let mut data = Vec::with_capacity(r * len);
    for row in x.data.chunks_exact(c) {
        data.extend_from_slice(&row[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![r, len], data))
}

/// Concatenates rank-2 tensors with equal row counts side by side.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("empty concat"))?;
    let (r, _) = first.dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = p.dims2()?;
        if pr != r {
            return Err(Error::shape("concat_cols row counts differ"));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![r, total], data))
}

/// Stacks rank-2 tensors with equal widths vertically.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("empty concat"))?;
    let (_, c) = first.dims2()?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pr, pc) = p.dims2()?;
        if pc != c {
            return Err(Error::shape("concat_rows widths differ"));
        }
        rows += pr;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_parts(vec![rows, c], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let t = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(softmax_rows(&t).unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::vector(vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);

        let t = Tensor::vector(vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax_rows(&t).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_tensor_rejected() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let empty = Tensor {
            shape: vec![0],
            data: vec![],
        };
        assert!(softmax_rows(&empty).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // 3·Φ(3), Φ(3) = 0.998650101968369896532... (high-precision erf)
        assert!((gelu_scalar(3.0) - 2.995_950_305_905_11).abs() < 1e-14);
        let tail = gelu_scalar(-10.0);
        // -10·Φ(-10) = -7.6198530241605261e-23
        assert!((tail + 7.619_853_024_160_526e-23).abs() < 1e-36, "gelu(-10) = {tail}");
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let x = 2.5;
        assert!((sigmoid_scalar(-x) - (1.0 - sigmoid_scalar(x))).abs() <= f64::EPSILON);
        let big = sigmoid_scalar(40.0);
        assert!((1.0 - big).abs() < 1e-15 && big <= 1.0);
        assert!(sigmoid_scalar(-800.0) > 0.0 || sigmoid_scalar(-800.0) == 0.0);
        assert!(sigmoid_scalar(-800.0).is_finite());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.data(), &[4.0, 5.0, 10.0, 11.0]);
        let bt = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(matmul_bt(&a, &bt).unwrap(), ab);
        let at = Tensor::from_rows(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(matmul_at(&at, &b).unwrap(), ab);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            mags in prop::collection::vec(-8.0f64..3.0, 1..40),
            signs in prop::collection::vec(any::<bool>(), 40),
            width in 1usize..8,
        ) {
            let vals: Vec<f64> = mags
                .iter()
                .zip(&signs)
                .map(|(m, s)| if *s { 10f64.powf(*m) } else { -(10f64.powf(*m)) })
                .collect();
            let rows = vals.len().div_ceil(width);
            let mut data = vals.clone();
            data.resize(rows * width, 0.5);
            let t = Tensor::new(vec![rows, width], data).unwrap();
            let s = softmax_rows(&t).unwrap();
            for r in 0..rows {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(r).iter().all(|v| *v >= 0.0 && v.is_finite()));
            }
        }

        #[test]
        fn gelu_and_sigmoid_monotone(start in -12.0f64..12.0, step in 1e-3f64..0.5) {
            let grid: Vec<f64> = (0..50).map(|i| start + step * i as f64).collect();
            for w in grid.windows(2) {
                prop_assert!(sigmoid_scalar(w[1]) >= sigmoid_scalar(w[0]));
                // GELU is only monotone right of its minimum near x ≈ -0.7518.
                if w[0] >= -0.7518 {
                    prop_assert!(gelu_scalar(w[1]) >= gelu_scalar(w[0]));
                }
            }
        }
    }
}
