//! Dense row-major tensors.
//!
//! [`Tensor`] is the value type carried by the autodiff tape. Values are
//! held in `f64`; parameters and on-disk blobs are `f32` and are widened
//! when they enter a computation (see [`crate::params`]).

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&e| e == 0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but buffer has {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn from_f32(shape: impl Into<Vec<usize>>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    /// Builds a 2-D tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new([rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.shape.len() {
            return shape_err(format!("index {index:?} for shape {:?}", self.shape));
        }
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            if i >= e {
                return shape_err(format!("index {index:?} out of bounds for {:?}", self.shape));
            }
            off = off * e + i;
        }
        Ok(self.data[off])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn axis_check(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::Axis { axis, rank: self.rank() });
        }
        Ok(())
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Broadcast result shape under trailing-dimension alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides that read `shape` as if it were broadcast to `target` (zero on
/// broadcast dimensions).
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = target.len() - shape.len();
    (0..target.len())
        .map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { own[i - pad] })
        .collect()
}

/// Offsets into a tensor of `shape` for each element of `target`, in
/// row-major order of `target`.
pub(crate) fn broadcast_offsets(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let bs = broadcast_strides(shape, target);
    let n: usize = target.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; target.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            off += bs[d];
            if idx[d] < target[d] {
                break;
            }
            off -= bs[d] * target[d];
            idx[d] = 0;
        }
    }
    out
}

/// Broadcasts `t` to `target`.
pub(crate) fn broadcast_to(t: &Tensor, target: &[usize]) -> Tensor {
    if t.shape() == target {
        return t.clone();
    }
    let offs = broadcast_offsets(t.shape(), target);
    Tensor::from_parts(target.to_vec(), offs.iter().map(|&o| t.data[o]).collect())
}

/// Sums `t` (of broadcast shape `from`) back down to `shape`.
pub(crate) fn reduce_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let mut out = vec![0.0; shape.iter().product()];
    // Fast path: `shape` is a suffix block repeated along leading dims.
    let n: usize = shape.iter().product();
    let pad = t.rank() - shape.len();
    if shape == &t.shape()[pad..] {
        for chunk in t.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    } else {
        let offs = broadcast_offsets(shape, t.shape());
        for (v, &o) in t.data.iter().zip(&offs) {
            out[o] += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// C = A·B (optionally with A and/or B transposed), accumulating into `c`.
///
/// `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when
/// `tb`), `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    c[i * n + j] += dot(arow, brow);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let arow = &a[p * m..(p + 1) * m];
                for (i, &api) in arow.iter().enumerate() {
                    if api == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums let the compiler vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 0], vec![]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn broadcasting_follows_trailing_alignment() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shape(&[3], &[2, 3]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape(&[3], &[2, 4]).is_err());
    }

    #[test]
    fn reduce_inverts_broadcast_sum() {
        let t = Tensor::new([2, 1], vec![1.0, 2.0]).unwrap();
        let b = broadcast_to(&t, &[2, 3]);
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let r = reduce_to(&b, &[2, 1]);
        assert_eq!(r.data(), &[3.0, 6.0]);
        let r = reduce_to(&b, &[3]);
        assert_eq!(r.data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 1.0]; // [3,2]
        let mut c = [0.0; 4];
        gemm(&a, &b, &mut c, 2, 3, 2, false, false);
        assert_eq!(c, [5.0, 5.0, 14.0, 11.0]);
        // transposed copies
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 1.0];
        for (ta, tb) in [(true, false), (false, true), (true, true)] {
            let mut c2 = [0.0; 4];
            let aa: &[f64] = if ta { &at } else { &a };
            let bb: &[f64] = if tb { &bt } else { &b };
            gemm(aa, bb, &mut c2, 2, 3, 2, ta, tb);
            assert_eq!(c2, c, "ta={ta} tb={tb}");
        }
    }
}
