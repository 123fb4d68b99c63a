//! Dense NCHW tensors and the small set of kernels the network layers need.

use std::fmt::Debug;

use num_traits::{Float, NumAssign};

/// Floating point element type usable by the network.
///
/// Training runs in `f32`; gradient checks instantiate the same layers in `f64`.
pub trait Scalar: Float + NumAssign + Default + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides, in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(extent(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
                assert!(extent(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
                assert!(extent(m, n, c_strides) <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel lies inside the slices,
                // as checked by the extent assertions above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major matrix product `c = a' * b' + beta * c`, where `a'` is `a` (m×k) or,
/// when `trans_a`, the transpose of a stored k×m matrix; likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(m, k, n, T::one(), a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

/// Batch of feature maps in NCHW order. A single feature map is a tensor with `n == 1`;
/// fully connected activations use `h == w == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    /// Stacks rows of equal length into an `[n, len, 1, 1]` tensor.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            assert_eq!(r.as_ref().len(), width, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec([rows.len(), width, 1, 1], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }

    /// Elements per sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Same data viewed with a new shape of equal element count.
    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates along the channel axis; spatial dims and batch must agree.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!(a.shape[0], b.shape[0], "batch mismatch");
        assert_eq!(a.spatial(), b.spatial(), "spatial mismatch");
        let (la, lb) = (a.sample_len(), b.sample_len());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.batch() {
            data.extend_from_slice(&a.data[i * la..(i + 1) * la]);
            data.extend_from_slice(&b.data[i * lb..(i + 1) * lb]);
        }
        Self {
            shape: [a.shape[0], a.shape[1] + b.shape[1], a.shape[2], a.shape[3]],
            data,
        }
    }

    /// Splits into the first `c` channels and the rest.
    pub fn split_channels(&self, c: usize) -> (Self, Self) {
        let [n, ch, h, w] = self.shape;
        assert!(c <= ch);
        let hw = h * w;
        let mut a = Vec::with_capacity(n * c * hw);
        let mut b = Vec::with_capacity(n * (ch - c) * hw);
        for s in self.data.chunks(ch * hw) {
            a.extend_from_slice(&s[..c * hw]);
            b.extend_from_slice(&s[c * hw..]);
        }
        (Self::from_vec([n, c, h, w], a), Self::from_vec([n, ch - c, h, w], b))
    }

    /// Stacks single-sample or batched tensors of identical per-sample shape.
    pub fn stack(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let [_, c, h, w] = parts[0].shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(&p.shape[1..], &[c, h, w], "stack: shape mismatch");
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Self::from_vec([n, c, h, w], data)
    }

    pub fn select(&self, i: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Self::from_vec([1, c, h, w], self.sample(i).to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
