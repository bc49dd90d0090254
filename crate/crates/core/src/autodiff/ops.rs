//! Differentiable primitives. Each returns a new tensor and, when any operand
//! is attached to a tape, records the node needed to replay its gradient.


use super::array::Array;
use super::tape::{record, Op, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected a matrix, got {other:?}"))),
    }
}

/// `op(a) · op(b)` on raw values, where `op` transposes when the flag is set.
/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn matmul_values(a: &Array, b: &Array, ta: bool, tb: bool) -> Array {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
    let m = if tb { br } else { bc };
    let (ad, bd) = (a.data(), b.data());
    let out = match (ta, tb) {
        (false, false) => {
            let mut out = vec![0.0; n * m];
            for (arow, crow) in ad.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(m.max(1))) {
                for (&av, brow) in arow.iter().zip(bd.chunks_exact(m.max(1))) {
                    if av == 0.0 {
                        continue;
                    }
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
            out
        }
        // rows of a against rows of b
        (false, true) => {
            let mut out = Vec::with_capacity(n * m);
            for arow in ad.chunks_exact(k.max(1)).take(n) {
                for brow in bd.chunks_exact(k.max(1)).take(m) {
                    out.push(dot(arow, brow));
                }
            }
            out.resize(n * m, 0.0);
            out
        }
        // accumulate outer products of matching rows
        (true, false) => {
            let mut out = vec![0.0; n * m];
            for (arow, brow) in ad.chunks_exact(n.max(1)).zip(bd.chunks_exact(m.max(1))) {
                for (&av, crow) in arow.iter().zip(out.chunks_exact_mut(m.max(1))) {
                    if av == 0.0 {
                        continue;
                    }
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
            out
        }
        (true, true) => {
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] = (0..k).map(|p| ad[p * ac + i] * bd[j * bc + p]).sum();
                }
            }
            out
        }
    };
    Array::from_parts(vec![n, m], out)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let v = self.value.zip_map(&other.value, |a, b| a + b);
        record("add", v, &[self, other], |s| {
            let [a, b] = <[_; 2]>::try_from(s).ok().unwrap();
            Op::Add(a, b)
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let v = self.value.zip_map(&other.value, |a, b| a - b);
        record("sub", v, &[self, other], |s| {
            let [a, b] = <[_; 2]>::try_from(s).ok().unwrap();
            Op::Sub(a, b)
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let v = self.value.zip_map(&other.value, |a, b| a * b);
        record("mul", v, &[self, other], |s| {
            let [a, b] = <[_; 2]>::try_from(s).ok().unwrap();
            Op::Mul(a, b)
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let v = self.value.map(|a| a * factor);
        record("scale", v, &[self], |mut s| Op::Scale(s.remove(0), factor))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Adds a `(1, m)` row to every row of an `(n, m)` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (n, m) = matrix_dims("add_row", self)?;
        if row.shape() != [1, m] {
            return Err(Error::shape(
                "add_row",
                format!("row {:?} against matrix {:?}", row.shape(), self.shape()),
            ));
        }
        let mut out = self.value.data().to_vec();
        let r = row.data();
        for chunk in out.chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let v = Array::from_parts(vec![n, m], out);
        record("add_row", v, &[self, row], |s| {
            let [a, b] = <[_; 2]>::try_from(s).ok().unwrap();
            Op::AddRow(a, b)
        })
    }

    /// Repeats a `(1, m)` row `n` times.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        let (r, m) = matrix_dims("broadcast_rows", self)?;
        if r != 1 {
            return Err(Error::shape("broadcast_rows", format!("expected one row, got {r}")));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        let v = Array::from_parts(vec![n, m], out);
        record("broadcast_rows", v, &[self], |mut s| {
            Op::BroadcastRows(s.remove(0))
        })
    }

    /// Column sums as a `(1, m)` row.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (_, m) = matrix_dims("sum_rows", self)?;
        let mut out = vec![0.0; m];
        for chunk in self.data().chunks(m) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let v = Array::from_parts(vec![1, m], out);
        record("sum_rows", v, &[self], |mut s| Op::SumRows(s.remove(0)))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposition of either operand.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let (ar, ac) = matrix_dims("matmul", self)?;
        let (br, bc) = matrix_dims("matmul", other)?;
        let k_a = if ta { ar } else { ac };
        let k_b = if tb { bc } else { br };
        if k_a != k_b {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?}{} x {:?}{}",
                    self.shape(),
                    if ta { "^T" } else { "" },
                    other.shape(),
                    if tb { "^T" } else { "" }
                ),
            ));
        }
        let v = matmul_values(&self.value, &other.value, ta, tb);
        record("matmul", v, &[self, other], |s| {
            let [a, b] = <[_; 2]>::try_from(s).ok().unwrap();
            Op::MatMul { a, b, ta, tb }
        })
    }

    /// Extracts `len` columns starting at `start`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, m) = matrix_dims("slice_cols", self)?;
        if start + len > m {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {m}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(n * len);
        for row in self.data().chunks(m) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let v = Array::from_parts(vec![n, len], out);
        record("slice_cols", v, &[self], |mut s| Op::SliceCols {
            a: s.remove(0),
            start,
        })
    }

    /// Embeds the columns of `self` at `start` in a zero matrix with `total` columns.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Tensor> {
        let (n, m) = matrix_dims("pad_cols", self)?;
        if start + m > total {
            return Err(Error::shape(
                "pad_cols",
                format!("{m} columns at {start} exceed {total}"),
            ));
        }
        let mut out = vec![0.0; n * total];
        for (dst, src) in out.chunks_mut(total).zip(self.data().chunks(m)) {
            dst[start..start + m].copy_from_slice(src);
        }
        let v = Array::from_parts(vec![n, total], out);
        record("pad_cols", v, &[self], |mut s| Op::PadCols {
            a: s.remove(0),
            start,
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let v = self.value.map(|a| if a > 0.0 { a } else { 0.0 });
        record("relu", v, &[self], |mut s| Op::Relu(s.remove(0)))
    }

    /// `self` where `x > 0`, zero elsewhere.
    pub(crate) fn relu_mask(&self, x: &Tensor) -> Result<Tensor> {
        same_shape("relu_mask", self, x)?;
        let v = self
            .value
            .zip_map(&x.value, |g, xv| if xv > 0.0 { g } else { 0.0 });
        record("relu_mask", v, &[self, x], |s| {
            let [g, x] = <[_; 2]>::try_from(s).ok().unwrap();
            Op::ReluMask { g, x }
        })
    }

    pub fn sin(&self) -> Result<Tensor> {
        let v = self.value.map(f64::sin);
        record("sin", v, &[self], |mut s| Op::Sin(s.remove(0)))
    }

    pub fn cos(&self) -> Result<Tensor> {
        let v = self.value.map(f64::cos);
        record("cos", v, &[self], |mut s| Op::Cos(s.remove(0)))
    }

    pub fn square(&self) -> Result<Tensor> {
        let v = self.value.map(|a| a * a);
        record("square", v, &[self], |mut s| Op::Square(s.remove(0)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let v = Array::scalar(self.value.sum());
        record("sum", v, &[self], |mut s| Op::Sum(s.remove(0)))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.value.numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Fills `shape` with the value of a one-element tensor.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if !self.value.is_scalar() {
            return Err(Error::shape(
                "expand",
                format!("expected one element, got {:?}", self.shape()),
            ));
        }
        let v = Array::full(shape, self.item());
        record("expand", v, &[self], |mut s| Op::Expand(s.remove(0)))
    }
}

/// Joins matrices with equal row counts along the feature axis.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::shape("concat_cols", "no operands"));
    };
    let (n, _) = matrix_dims("concat_cols", first)?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = matrix_dims("concat_cols", p)?;
        if r != n {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts {n} and {r} differ"),
            ));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    let v = Array::from_parts(vec![n, total], out);
    record("concat_cols", v, parts, Op::ConcatCols)
}
