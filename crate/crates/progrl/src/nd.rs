//! Dense row-major arrays.
//!
//! A deliberately small tensor type: contiguous storage, explicit shape,
//! row-major layout. Layers index into the flat buffer directly; nothing
//! here allocates views or tracks gradients.

use crate::scalar::Scalar;

/// Contiguous row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> NdArray<T> {
    /// Array of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    /// Wrap an existing buffer. Panics if the element count does not match
    /// the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "buffer length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape: shape.to_vec(), data }
    }

    /// Scalar wrapped as a 0-d array.
    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            self.data.len(),
            shape.iter().product::<usize>(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    /// Element-wise map into a new array.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows of a 2-d array. Panics when the array is not 2-d.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.shape.len(), 2, "row() needs a 2-d array");
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        assert_eq!(self.shape.len(), 2, "row_mut() needs a 2-d array");
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }
}

#[inline(always)]
fn fma_into<T: Scalar, const L: usize>(acc: &mut [T; L], a: &[T], b: &[T]) {
    for k in 0..L {
        acc[k] = a[k].mul_add(b[k], acc[k]);
    }
}

#[inline(always)]
fn reduce_lanes<T: Scalar, const L: usize>(acc: &[T; L]) -> T {
    let mut total = T::zero();
    for &v in acc {
        total = total + v;
    }
    total
}

/// Dot product of two equal-length slices.
///
/// Accumulates into many independent lanes so the FMA chains can be
/// vectorized and pipelined; a single running accumulator would serialize on
/// FMA latency and run several times slower.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const WIDE: usize = 32;
    const NARROW: usize = 8;
    let n = a.len();
    let mut acc_wide = [T::zero(); WIDE];
    let wide_end = n - n % WIDE;
    let mut i = 0;
    while i < wide_end {
        fma_into(&mut acc_wide, &a[i..i + WIDE], &b[i..i + WIDE]);
        i += WIDE;
    }
    let mut acc_narrow = [T::zero(); NARROW];
    let narrow_end = n - n % NARROW;
    while i < narrow_end {
        fma_into(&mut acc_narrow, &a[i..i + NARROW], &b[i..i + NARROW]);
        i += NARROW;
    }
    let mut tail = T::zero();
    while i < n {
        tail = a[i].mul_add(b[i], tail);
        i += 1;
    }
    reduce_lanes(&acc_wide) + reduce_lanes(&acc_narrow) + tail
}

/// `y += alpha * x` over equal-length slices.
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(xi, *yi);
    }
}

/// `y[o] += sum_t coefs[t] * srcs[t][o]` over the length of `y`.
///
/// Fusing several scaled sources into one pass loads and stores `y` once per
/// `NT` multiplies instead of once per multiply, which is what makes short
/// convolution taps compute-bound instead of store-bound. Sources may
/// overlap each other (shared borrows), only `y` must be exclusive.
pub fn axpy_fused<T: Scalar, const NT: usize>(coefs: &[T; NT], srcs: &[&[T]; NT], y: &mut [T]) {
    let n = y.len();
    for s in srcs.iter() {
        assert!(s.len() >= n, "axpy_fused: source shorter than destination");
    }
    let h = NT / 2;
    for o in 0..n {
        // Two partial chains halve the FMA latency chain per element.
        let mut a = y[o];
        let mut b = T::zero();
        for t in 0..h {
            a = coefs[t].mul_add(srcs[t][o], a);
        }
        for t in h..NT {
            b = coefs[t].mul_add(srcs[t][o], b);
        }
        y[o] = a + b;
    }
}


/// `c[m][n] (+)= sum_k a[m][k] * b[k][n]` over row-major slices.
///
/// With `accumulate` set the product is added onto `c`; otherwise `c` is
/// overwritten. Backed by a width-specific GEMM, so this is the fast path
/// every layer kernel should funnel through.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert_eq!(a.len(), m * k, "gemm_nn: a length != m*k");
    assert_eq!(b.len(), k * n, "gemm_nn: b length != k*n");
    assert_eq!(c.len(), m * n, "gemm_nn: c length != m*n");
    gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, c, accumulate);
}

/// `c[m][n] (+)= sum_k a[m][k] * b[n][k]` — second operand transposed.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert_eq!(a.len(), m * k, "gemm_nt: a length != m*k");
    assert_eq!(b.len(), n * k, "gemm_nt: b length != n*k");
    assert_eq!(c.len(), m * n, "gemm_nt: c length != m*n");
    gemm_strided(m, k, n, a, k as isize, 1, b, 1, k as isize, c, accumulate);
}

/// `c[m][n] (+)= sum_k a[k][m] * b[k][n]` — first operand transposed.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert_eq!(a.len(), k * m, "gemm_tn: a length != k*m");
    assert_eq!(b.len(), k * n, "gemm_tn: b length != k*n");
    assert_eq!(c.len(), m * n, "gemm_tn: c length != m*n");
    gemm_strided(m, k, n, a, 1, m as isize, b, n as isize, 1, c, accumulate);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // Safety: the public wrappers checked every slice covers its full
    // m*k / k*n / m*n extent for the strides passed here, and c is a
    // distinct &mut so it aliases neither input.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// `out[m][n] = sum_k a[m][k] * b[n][k]` — matrix times transposed matrix.
///
/// Weights are stored with the contraction axis last, so this is the natural
/// orientation for dense layers and score matrices.
pub fn matmul_nt<T: Scalar>(a: &NdArray<T>, b: &NdArray<T>) -> NdArray<T> {
    assert_eq!(a.shape().len(), 2);
    assert_eq!(b.shape().len(), 2);
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul_nt inner dims differ: {} vs {}", k, k2);
    let mut out = NdArray::zeros(&[m, n]);
    gemm_nt(m, k, n, a.data(), b.data(), out.data_mut(), false);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_has_shape_product_elements() {
        let a = NdArray::<f64>::zeros(&[2, 3, 4]);
        assert_eq!(a.len(), 24);
        assert!(a.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn from_vec_rejects_wrong_length() {
        let _ = NdArray::from_vec(&[2, 2], vec![1.0f64; 3]);
    }

    #[test]
    fn reshape_preserves_data_order() {
        let a = NdArray::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect());
        let b = a.clone().reshape(&[3, 2]);
        assert_eq!(a.data(), b.data());
        assert_eq!(b.shape(), &[3, 2]);
    }

    #[test]
    fn dot_and_axpy_match_hand_values() {
        let a = [1.0f64, 2.0, 3.0];
        let b = [4.0f64, 5.0, 6.0];
        assert_eq!(dot(&a, &b), 32.0);
        let mut y = [1.0f64, 1.0, 1.0];
        axpy(2.0, &a, &mut y);
        assert_eq!(y, [3.0, 5.0, 7.0]);
    }

    #[test]
    fn matmul_nt_matches_hand_multiplication() {
        // a = [[1,2],[3,4]], b_rows = [[5,6],[7,8]] -> a * b^T
        let a = NdArray::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = NdArray::from_vec(&[2, 2], vec![5.0f64, 6.0, 7.0, 8.0]);
        let c = matmul_nt(&a, &b);
        assert_eq!(c.data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn generic_core_runs_in_f32() {
        let a = NdArray::from_vec(&[1, 2], vec![1.5f32, 2.5]);
        let b = NdArray::from_vec(&[1, 2], vec![2.0f32, 4.0]);
        assert_eq!(matmul_nt(&a, &b).data(), &[13.0f32]);
    }
}
