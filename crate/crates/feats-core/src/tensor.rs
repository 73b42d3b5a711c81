//! Dense row-major 64-bit float tensors.
//!
//! Tensors are immutable values once built; the autodiff graph and the
//! layers allocate fresh outputs instead of mutating inputs. Matrix
//! products go through `matrixmultiply::dgemm`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != expected {
            return Err(Error::Argument(format!(
                "buffer of length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-d tensor from rows-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a scalar (shape [1] or [1,1]) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dimension("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }
}

/// C = A * B for row-major 2-d tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.shape[1] != b.shape[0] {
        return Err(Error::dimension("matmul", &a.shape, &b.shape));
    }
    let (r, k, c) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(vec![r, c]);
    gemm_nn(r, k, c, 1.0, a.data(), b.data(), 0.0, out.data_mut());
    Ok(out)
}

/// C = alpha * A * B + beta * C, all row-major.
pub fn gemm_nn(r: usize, k: usize, c: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, out: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            r, k, c, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), c as isize, 1,
            beta,
            out.as_mut_ptr(), c as isize, 1,
        );
    }
}

/// C = alpha * A * B^T + beta * C; A is r x k, B is c x k.
pub fn gemm_nt(r: usize, k: usize, c: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, out: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            r, k, c, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            out.as_mut_ptr(), c as isize, 1,
        );
    }
}

/// C = alpha * A^T * B + beta * C; A is k x r, B is k x c.
pub fn gemm_tn(r: usize, k: usize, c: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, out: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            r, k, c, alpha,
            a.as_ptr(), 1, r as isize,
            b.as_ptr(), c as isize, 1,
            beta,
            out.as_mut_ptr(), c as isize, 1,
        );
    }
}

/// Numerically stable softmax of a 1-d tensor: positive, sums to one,
/// invariant under adding a constant to every entry.
pub fn softmax_stable(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::Argument("softmax of empty input".into()));
    }
    let mut out = vec![0.0; v.len()];
    softmax_slice(v.data(), &mut out);
    Ok(Tensor {
        shape: v.shape.clone(),
        data: out,
    })
}

/// Softmax of one contiguous row, written into `out`.
pub(crate) fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn relu(v: &Tensor) -> Tensor {
    Tensor {
        shape: v.shape.clone(),
        data: v.data.iter().map(|&x| x.max(0.0)).collect(),
    }
}

/// Stable logistic function, used both as activation and gate.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &Tensor) -> Tensor {
    Tensor {
        shape: v.shape.clone(),
        data: v.data.iter().map(|&x| sigmoid_scalar(x)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = matmul(&i2, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let out = softmax_stable(&Tensor::from_vec(vec![0.0, 0.0, 0.0])).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_case() {
        // [0, ln 3] -> [1/4, 3/4]
        let out = softmax_stable(&Tensor::from_vec(vec![0.0, 3.0_f64.ln()])).unwrap();
        assert!((out.data()[0] - 0.25).abs() < 1e-12);
        assert!((out.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let out = softmax_stable(&Tensor::from_vec(vec![1000.0, 1000.0])).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
        assert!((out.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_error() {
        let t = Tensor {
            shape: vec![0],
            data: vec![],
        };
        assert!(softmax_stable(&t).is_err());
    }

    #[test]
    fn relu_hand_case() {
        let out = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(36.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid_scalar(-36.0) < 1e-12);
        assert!(sigmoid_scalar(-36.0) > 0.0);
        // saturated but finite gradient out * (1 - out)
        let s = sigmoid_scalar(36.0);
        assert!((s * (1.0 - s)).is_finite());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..512),
            shift in -100.0f64..100.0,
        ) {
            let base = softmax_stable(&Tensor::from_vec(v.clone())).unwrap();
            let sum: f64 = base.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(base.data().iter().all(|&p| p > 0.0));

            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let moved = softmax_stable(&Tensor::from_vec(shifted)).unwrap();
            for (a, b) in base.data().iter().zip(moved.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_matches_naive(
            r in 1usize..6, k in 1usize..6, c in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = crate::rng::Prng::new(seed);
            let a_data: Vec<f64> = (0..r*k).map(|_| rng.next_uniform(2.0)).collect();
            let b_data: Vec<f64> = (0..k*c).map(|_| rng.next_uniform(2.0)).collect();
            let a = Tensor::matrix(r, k, a_data.clone()).unwrap();
            let b = Tensor::matrix(k, c, b_data.clone()).unwrap();
            let fast = matmul(&a, &b).unwrap();
            for i in 0..r {
                for j in 0..c {
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += a_data[i*k + t] * b_data[t*c + j];
                    }
                    prop_assert!((fast.data()[i*c + j] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
