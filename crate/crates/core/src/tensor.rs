//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff tape.
//!
//! Storage is reference counted so that cloning a tensor (which the tape
//! does constantly) never copies data. Mutation goes through
//! [`Tensor::data_mut`], which copies on write.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::format(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_vec(shape, data))
    }

    /// Panics if `data.len()` does not match `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(numel(shape), data.len(), "shape {shape:?} vs len {}", data.len());
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(shape, vec![v; numel(shape)])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(&[], vec![v])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_vec(shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn to_scalar(&self) -> f64 {
        assert_eq!(self.numel(), 1, "to_scalar on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape {:?} -> {shape:?}",
            self.shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor::from_vec(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        broadcast_binary(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        broadcast_binary(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        broadcast_binary(self, other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        permute(self, axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        narrow(self, axis, start, len)
    }

    pub fn cat(parts: &[&Tensor], axis: usize) -> Tensor {
        cat(parts, axis)
    }

    /// Copies `src` into the slab `[start, start + src.dim(axis))` along `axis`.
    pub fn assign_narrow(&mut self, axis: usize, start: usize, src: &Tensor) {
        let (outer, inner) = outer_inner(&self.shape, axis);
        let len = src.shape[axis];
        assert!(start + len <= self.shape[axis]);
        let dst_axis = self.shape[axis];
        let dst = Arc::make_mut(&mut self.data);
        for o in 0..outer {
            let d0 = (o * dst_axis + start) * inner;
            let s0 = o * len * inner;
            dst[d0..d0 + len * inner].copy_from_slice(&src.data[s0..s0 + len * inner]);
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Walks every output index in row-major order, yielding `(out, a, b)` flat
/// offsets. The innermost axis runs as a tight loop.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = out.len();
    if n == 0 {
        f(0, 0, 0);
        return;
    }
    if numel(out) == 0 {
        return;
    }
    let inner = out[n - 1];
    let (ia, ib) = (sa[n - 1], sb[n - 1]);
    let mut idx = vec![0usize; n];
    let mut o = 0;
    loop {
        let mut pa = 0;
        let mut pb = 0;
        for d in 0..n - 1 {
            pa += idx[d] * sa[d];
            pb += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, pa + j * ia, pb + j * ib);
        }
        o += inner;
        let mut d = n - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    let n = numel(&out);
    // suffix broadcast: b repeats over the leading axes of a
    if out == a.shape && a.shape.ends_with(&b.shape) && b.numel() > 0 {
        let inner = b.numel();
        let mut v = Vec::with_capacity(n);
        for chunk in a.data.chunks(inner) {
            v.extend(chunk.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::from_vec(&out, v);
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut v = vec![0.0; n];
    for_each_broadcast(&out, &sa, &sb, |o, i, j| v[o] = f(a.data[i], b.data[j]));
    Tensor::from_vec(&out, v)
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let out = g.shape.clone();
    if out.ends_with(shape) {
        let inner = numel(shape);
        let mut acc = vec![0.0; inner];
        for chunk in g.data.chunks(inner) {
            for (a, &x) in acc.iter_mut().zip(chunk) {
                *a += x;
            }
        }
        return Tensor::from_vec(shape, acc);
    }
    let st = broadcast_strides(shape, &out);
    let zero = vec![0; out.len()];
    let mut acc = vec![0.0; numel(shape)];
    for_each_broadcast(&out, &st, &zero, |o, i, _| acc[i] += g.data[o]);
    Tensor::from_vec(shape, acc)
}

pub fn permute(t: &Tensor, axes: &[usize]) -> Tensor {
    let n = t.rank();
    assert_eq!(axes.len(), n, "permute axes {axes:?} for shape {:?}", t.shape);
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return t.clone();
    }
    let src_st = strides(&t.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let sa: Vec<usize> = axes.iter().map(|&a| src_st[a]).collect();
    let zero = vec![0; n];
    let mut v = vec![0.0; t.numel()];
    for_each_broadcast(&out_shape, &sa, &zero, |o, i, _| v[o] = t.data[i]);
    Tensor::from_vec(&out_shape, v)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn narrow(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    assert!(
        start + len <= t.shape[axis],
        "narrow {start}+{len} on axis {axis} of {:?}",
        t.shape
    );
    let (outer, inner) = outer_inner(&t.shape, axis);
    let d = t.shape[axis];
    let mut v = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * d + start) * inner;
        v.extend_from_slice(&t.data[s..s + len * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Tensor::from_vec(&shape, v)
}

pub fn cat(parts: &[&Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty());
    let base = parts[0].shape.clone();
    for p in parts {
        assert_eq!(p.rank(), base.len());
        for (i, (&a, &b)) in p.shape.iter().zip(base.iter()).enumerate() {
            assert!(i == axis || a == b, "cat shapes {:?} vs {:?}", p.shape, base);
        }
    }
    let (outer, inner) = outer_inner(&base, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut v = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape[axis] * inner;
            v.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    Tensor::from_vec(&shape, v)
}

/// `c = a · b + beta · c` on row-major matrices given by explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: bounds of all three operands are checked above (in debug) and
    // guaranteed by every caller, which derives m/k/n from tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shapes of the two matmul operands reduced to `(batch, m, k, n, b_batched)`.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], b_transposed: bool) -> (usize, usize, usize, usize, bool) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2: {a:?} x {b:?}");
    let m = a[a.len() - 2];
    let k = a[a.len() - 1];
    let (bk, n) = if b_transposed {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    assert_eq!(k, bk, "matmul inner dims: {a:?} x {b:?} (transposed: {b_transposed})");
    if b.len() == 2 {
        (numel(&a[..a.len() - 2]), m, k, n, false)
    } else {
        assert_eq!(
            &a[..a.len() - 2],
            &b[..b.len() - 2],
            "matmul batch dims: {a:?} x {b:?}"
        );
        (numel(&a[..a.len() - 2]), m, k, n, true)
    }
}

/// `a @ b` or `a @ bᵀ` over the last two axes. A rank-2 `b` is shared by every
/// batch entry of `a`.
pub fn matmul(a: &Tensor, b: &Tensor, b_transposed: bool) -> Tensor {
    let (batch, m, k, n, batched) = matmul_dims(&a.shape, &b.shape, b_transposed);
    let mut out_shape = a.shape[..a.rank() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut c = vec![0.0; batch * m * n];
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    if !batched {
        gemm(batch * m, k, n, &a.data, k, 1, &b.data, rsb, csb, 0.0, &mut c);
    } else {
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data[i * m * k..],
                k,
                1,
                &b.data[i * k * n..],
                rsb,
                csb,
                0.0,
                &mut c[i * m * n..],
            );
        }
    }
    Tensor::from_vec(&out_shape, c)
}

/// im2col for channels-last 5D input `[B, T, H, W, C]`.
///
/// Output is `[B, To, Ho, Wo, kt*kh*kw*C]` with patch features ordered
/// `(dt, dh, dw, c)`; out-of-range taps read zero.
pub fn unfold3d(x: &Tensor, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let [b, t, h, w, c] = five(x.shape());
    let out = unfold_out_dims([t, h, w], kernel, stride, pad);
    let feat = kernel[0] * kernel[1] * kernel[2] * c;
    let mut v = vec![0.0; b * out[0] * out[1] * out[2] * feat];
    unfold_walk([b, t, h, w, c], kernel, stride, pad, |dst, src| {
        v[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
    });
    Tensor::from_vec(&[b, out[0], out[1], out[2], feat], v)
}

/// Adjoint of [`unfold3d`]: scatters patch gradients back onto the input.
pub fn fold3d(
    g: &Tensor,
    in_shape: &[usize],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor {
    let [b, t, h, w, c] = five(in_shape);
    let mut v = vec![0.0; b * t * h * w * c];
    unfold_walk([b, t, h, w, c], kernel, stride, pad, |dst, src| {
        for (o, &x) in v[src..src + c].iter_mut().zip(&g.data[dst..dst + c]) {
            *o += x;
        }
    });
    Tensor::from_vec(in_shape, v)
}

pub fn unfold_out_dims(dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> [usize; 3] {
    let mut o = [0; 3];
    for i in 0..3 {
        assert!(dims[i] + 2 * pad[i] >= kernel[i], "kernel larger than padded input");
        o[i] = (dims[i] + 2 * pad[i] - kernel[i]) / stride[i] + 1;
    }
    o
}

fn five(s: &[usize]) -> [usize; 5] {
    assert_eq!(s.len(), 5, "expected a 5D [B, T, H, W, C] tensor, got {s:?}");
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Calls `f(dst_offset, src_offset)` for each in-range tap; each run is `C` long.
fn unfold_walk(
    [b, t, h, w, c]: [usize; 5],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    mut f: impl FnMut(usize, usize),
) {
    let [to, ho, wo] = unfold_out_dims([t, h, w], kernel, stride, pad);
    let feat = kernel[0] * kernel[1] * kernel[2] * c;
    let mut dst_row = 0;
    for bi in 0..b {
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut tap = 0;
                    for dt in 0..kernel[0] {
                        let it = (ot * stride[0] + dt) as isize - pad[0] as isize;
                        for dh in 0..kernel[1] {
                            let ih = (oh * stride[1] + dh) as isize - pad[1] as isize;
                            for dw in 0..kernel[2] {
                                let iw = (ow * stride[2] + dw) as isize - pad[2] as isize;
                                if it >= 0
                                    && ih >= 0
                                    && iw >= 0
                                    && (it as usize) < t
                                    && (ih as usize) < h
                                    && (iw as usize) < w
                                {
                                    let src = ((((bi * t) + it as usize) * h + ih as usize) * w
                                        + iw as usize)
                                        * c;
                                    f(dst_row + tap * c, src);
                                }
                                tap += 1;
                            }
                        }
                    }
                    dst_row += feat;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    v[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        Tensor::from_vec(&[m, n], v)
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        assert!(matmul(&a, &b, false).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = b.permute(&[1, 0]);
        assert!(matmul(&a, &bt, true).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn broadcast_and_reduce() {
        let a = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(&[2, 1], vec![10., 20.]);
        let c = a.add(&b);
        assert_eq!(c.data(), &[11., 12., 13., 24., 25., 26.]);
        let r = sum_to_shape(&c, &[2, 1]);
        assert_eq!(r.data(), &[36., 75.]);
        let r = sum_to_shape(&c, &[3]);
        assert_eq!(r.data(), &[35., 37., 39.]);
    }

    #[test]
    fn permute_narrow_cat() {
        let a = Tensor::from_vec(&[2, 3], (0..6).map(|x| x as f64).collect());
        assert_eq!(a.permute(&[1, 0]).data(), &[0., 3., 1., 4., 2., 5.]);
        let n = a.narrow(1, 1, 2);
        assert_eq!(n.data(), &[1., 2., 4., 5.]);
        let c = Tensor::cat(&[&a.narrow(1, 0, 1), &n], 1);
        assert_eq!(c, a);
    }

    #[test]
    fn unfold_identity_kernel_is_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 2, 3, 3, 2], 1.0, &mut rng);
        let u = unfold3d(&x, [1, 1, 1], [1, 1, 1], [0, 0, 0]);
        assert_eq!(u.data(), x.data());
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 4, 4, 2], 1.0, &mut rng);
        let (k, s, p) = ([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        let u = unfold3d(&x, k, s, p);
        let g = Tensor::randn(u.shape(), 1.0, &mut rng);
        let lhs: f64 = u.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let f = fold3d(&g, x.shape(), k, s, p);
        let rhs: f64 = x.data().iter().zip(f.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
