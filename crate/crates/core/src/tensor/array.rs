use crate::error::{Error, Result};

/// Dense row-major array of `f64`. Rank 0 is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::validation(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("ragged rows"));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `op(A) · op(B)` into `c` (m×n, row-major), accumulating when `accumulate`.
///
/// `A` is stored m×k (or k×m when `ta`); `B` is stored k×n (or n×k when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out` with zeros on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// How the flat indices of two operands map onto a broadcast output.
pub(crate) enum Layout {
    Same,
    /// `b` repeats every `period` elements of `a` (trailing-axis bias).
    TileB { period: usize },
    /// `a` repeats every `period` elements of `b`.
    TileA { period: usize },
    General {
        out: Vec<usize>,
        sa: Vec<usize>,
        sb: Vec<usize>,
    },
}

pub(crate) fn layout(a: &[usize], b: &[usize], out: &[usize]) -> Layout {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let no: usize = out.iter().product();
    if a == b {
        return Layout::Same;
    }
    let is_suffix = |s: &[usize]| {
        let trimmed: Vec<usize> = s.iter().copied().skip_while(|&d| d == 1).collect();
        out.ends_with(&trimmed)
    };
    if na == no && is_suffix(b) {
        return Layout::TileB { period: nb.max(1) };
    }
    if nb == no && is_suffix(a) {
        return Layout::TileA { period: na.max(1) };
    }
    Layout::General {
        out: out.to_vec(),
        sa: broadcast_strides(a, out),
        sb: broadcast_strides(b, out),
    }
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
pub(crate) fn for_each_pair(lay: &Layout, n_out: usize, mut f: impl FnMut(usize, usize, usize)) {
    match lay {
        Layout::Same => (0..n_out).for_each(|i| f(i, i, i)),
        &Layout::TileB { period } => {
            for base in (0..n_out).step_by(period) {
                (0..period).for_each(|j| f(base + j, base + j, j));
            }
        }
        &Layout::TileA { period } => {
            for base in (0..n_out).step_by(period) {
                (0..period).for_each(|j| f(base + j, j, base + j));
            }
        }
        Layout::General { out, sa, sb } => {
            let rank = out.len();
            let mut idx = vec![0usize; rank];
            let (mut ia, mut ib) = (0usize, 0usize);
            for o in 0..n_out {
                f(o, ia, ib);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    ia += sa[d];
                    ib += sb[d];
                    if idx[d] < out[d] {
                        break;
                    }
                    ia -= sa[d] * out[d];
                    ib -= sb[d] * out[d];
                    idx[d] = 0;
                }
            }
        }
    }
}

/// Sums over the middle axis of an `(outer, n, inner)` block, giving
/// `outer × inner` results that do not depend on the order along that axis.
///
/// Each slice is rescaled by a power of two fixed by its largest magnitude,
/// truncated to 64-bit integers and accumulated in 128 bits, where addition is
/// associative. Resolution is `2^-62` of the largest magnitude, finer than the
/// rounding of an ordinary floating-point sum.
pub(crate) fn order_free_sums(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    let mut peak = vec![0.0f64; inner];
    let mut acc = vec![0i128; inner];
    for o in 0..outer {
        let block = &x[o * n * inner..(o + 1) * n * inner];
        peak.fill(0.0);
        for row in block.chunks_exact(inner) {
            for (p, v) in peak.iter_mut().zip(row) {
                // NaN poisons the slice on purpose
                *p = if v.is_nan() || p.is_nan() { f64::NAN } else { p.max(v.abs()) };
            }
        }
        let shifts: Vec<i32> = peak
            .iter()
            .map(|&p| {
                let e = ((p.to_bits() >> 52) & 0x7ff) as i32 - 1022;
                62 - e
            })
            .collect();
        // split so that subnormal peaks (shift up to 1084) stay representable
        let scales: Vec<(f64, f64)> = shifts.iter().map(|&s| (2f64.powi(s / 2), 2f64.powi(s - s / 2))).collect();
        acc.fill(0);
        for row in block.chunks_exact(inner) {
            for ((a, v), (s1, s2)) in acc.iter_mut().zip(row).zip(&scales) {
                *a += (v * s1 * s2) as i64 as i128;
            }
        }
        for j in 0..inner {
            out[o * inner + j] = if peak[j].is_finite() {
                acc[j] as f64 * 2f64.powi(-shifts[j] / 2) * 2f64.powi(shifts[j] / 2 - shifts[j])
            } else {
                block.chunks_exact(inner).map(|r| r[j]).sum()
            };
        }
    }
    out
}
