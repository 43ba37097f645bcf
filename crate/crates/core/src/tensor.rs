//! Dense real tensors stored as a flat row-major buffer.
//!
//! Every numeric object in the classifier (site weights, feature vectors,
//! absorbed transfer matrices, gradients) is carried by [`Tensor`]. The
//! kernels here allocate fresh outputs and never alias their inputs, so a
//! tensor can be shared read-only across worker threads.

use crate::error::{FttnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major buffer.
    ///
    /// A rank-0 tensor (empty shape) holds exactly one entry.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(FttnError::InvalidArgument(format!(
                "axis lengths must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FttnError::DimensionMismatch(format!(
                "shape {shape:?} needs {expected} entries, buffer has {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FttnError::NonFinite(format!(
                "entry {pos} of tensor with shape {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
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

    /// Mutable access for in-place parameter updates. Callers keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    /// Reorders axes so that output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(FttnError::InvalidArgument(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        if perm.iter().enumerate().all(|(k, &p)| k == p) {
            return Ok(self.clone());
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let moved_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();

        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            // odometer increment over the output index
            for axis in (0..rank).rev() {
                index[axis] += 1;
                offset += moved_strides[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                offset -= moved_strides[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        out[k] = out[k + 1] * shape[k + 1];
    }
    out
}

/// Sums over the paired axes of `a` and `b`.
///
/// The result carries the unpaired axes of `a` (in order) followed by the
/// unpaired axes of `b`. Pairing every axis yields a rank-0 tensor.
pub fn contract(a: &Tensor, b: &Tensor, axis_pairs: &[(usize, usize)]) -> Result<Tensor> {
    let mut used_a = vec![false; a.rank()];
    let mut used_b = vec![false; b.rank()];
    for &(ia, ib) in axis_pairs {
        if ia >= a.rank() || ib >= b.rank() {
            return Err(FttnError::InvalidArgument(format!(
                "axis pair ({ia}, {ib}) out of range for ranks {} and {}",
                a.rank(),
                b.rank()
            )));
        }
        if used_a[ia] || used_b[ib] {
            return Err(FttnError::InvalidArgument(format!(
                "axis paired twice in {axis_pairs:?}"
            )));
        }
        used_a[ia] = true;
        used_b[ib] = true;
        if a.shape[ia] != b.shape[ib] {
            return Err(FttnError::DimensionMismatch(format!(
                "axis {ia} of {:?} vs axis {ib} of {:?}",
                a.shape, b.shape
            )));
        }
    }

    let free_a: Vec<usize> = (0..a.rank()).filter(|&k| !used_a[k]).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|&k| !used_b[k]).collect();

    let perm_a: Vec<usize> = free_a
        .iter()
        .copied()
        .chain(axis_pairs.iter().map(|&(ia, _)| ia))
        .collect();
    let perm_b: Vec<usize> = axis_pairs
        .iter()
        .map(|&(_, ib)| ib)
        .chain(free_b.iter().copied())
        .collect();
    let a_t = a.permute(&perm_a)?;
    let b_t = b.permute(&perm_b)?;

    let rows: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let inner: usize = axis_pairs.iter().map(|&(ia, _)| a.shape[ia]).product();
    let cols: usize = free_b.iter().map(|&k| b.shape[k]).product();

    let mut out = vec![0.0; rows * cols];
    matmul_into(&a_t.data, &b_t.data, rows, inner, cols, &mut out);

    let shape = free_a
        .iter()
        .map(|&k| a.shape[k])
        .chain(free_b.iter().map(|&k| b.shape[k]))
        .collect();
    Ok(Tensor { shape, data: out })
}

/// `out += a (rows x inner) * b (inner x cols)`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        let out_row = &mut out[i * cols..(i + 1) * cols];
        for (k, &aik) in a[i * inner..(i + 1) * inner].iter().enumerate() {
            let b_row = &b[k * cols..(k + 1) * cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// Elementwise `exp(-beta * a)`.
pub fn exp_scale(a: &Tensor, beta: f64) -> Result<Tensor> {
    if !beta.is_finite() {
        return Err(FttnError::NonFinite(format!("beta = {beta}")));
    }
    let out = a.map(|v| (-beta * v).exp());
    check_finite(&out, "exp_scale")?;
    Ok(out)
}

/// Elementwise product of two tensors with identical shapes.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(FttnError::DimensionMismatch(format!(
            "hadamard of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let out = Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    };
    check_finite(&out, "hadamard")?;
    Ok(out)
}

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    match t.data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(FttnError::NonFinite(format!("{what}: entry {pos}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().fold(1e-300_f64, |m, v| m.max(v.abs()));
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn identity_acts_trivially() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let out = contract(&eye, &v, &[(1, 0)]).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn full_pairing_gives_scalar() {
        let v = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2], vec![5.0, 7.0]).unwrap();
        let out = contract(&v, &w, &[(0, 0)]).unwrap();
        assert_eq!(out.rank(), 0);
        assert_eq!(out.data(), &[19.0]);
    }

    #[test]
    fn matrix_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(vec![2, 3], &mut rng);
        let b = random(vec![3, 4], &mut rng);
        let mut oracle = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    oracle[i * 4 + j] += a.data()[i * 3 + k] * b.data()[k * 4 + j];
                }
            }
        }
        let out = contract(&a, &b, &[(1, 0)]).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(rel_close(out.data(), &oracle, 1e-12));
    }

    #[test]
    fn multi_axis_contraction_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(vec![3, 2, 4], &mut rng);
        let b = random(vec![4, 5, 3], &mut rng);
        // pair a.0 with b.2 and a.2 with b.0: out[j, m] = sum_{i,k} a[i,j,k] b[k,m,i]
        let out = contract(&a, &b, &[(0, 2), (2, 0)]).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
        let mut oracle = vec![0.0; 10];
        for j in 0..2 {
            for m in 0..5 {
                for i in 0..3 {
                    for k in 0..4 {
                        oracle[j * 5 + m] += a.data()[(i * 2 + j) * 4 + k] * b.data()[(k * 5 + m) * 3 + i];
                    }
                }
            }
        }
        assert!(rel_close(out.data(), &oracle, 1e-12));
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            contract(&a, &b, &[(1, 0)]),
            Err(FttnError::DimensionMismatch(_))
        ));
        assert!(matches!(
            contract(&a, &b, &[(0, 0), (0, 1)]),
            Err(FttnError::InvalidArgument(_))
        ));
    }

    #[test]
    fn exp_scale_cases() {
        let a = Tensor::new(vec![2, 2], vec![0.3, -1.0, 5.0, 2.0]).unwrap();
        assert_eq!(exp_scale(&a, 0.0).unwrap(), Tensor::ones(vec![2, 2]));
        let zero = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(exp_scale(&zero, 0.4).unwrap().data(), &[1.0]);

        let v = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let out = exp_scale(&v, 0.5).unwrap();
        let oracle = [(-0.5f64).exp(), (-1.0f64).exp()];
        for (x, y) in out.data().iter().zip(oracle) {
            assert!((x - y).abs() <= 1e-15);
        }
        assert!(exp_scale(&v, f64::NAN).is_err());
    }

    #[test]
    fn hadamard_cases() {
        let a = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2], vec![4.0, 5.0]).unwrap();
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[8.0, 15.0]);
        assert_eq!(hadamard(&a, &Tensor::ones(vec![2])).unwrap(), a);
        assert!(hadamard(&a, &Tensor::ones(vec![3])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random(vec![3, 4], &mut rng);
            let y = random(vec![3, 4], &mut rng);
            assert_eq!(hadamard(&x, &y).unwrap(), hadamard(&y, &x).unwrap());
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(vec![2, 3, 4], &mut rng);
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], a.data()[(3 + 2) * 4 + 3]);
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), a);
        assert!(a.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn constructor_validates() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rel_err(a: &[f64], b: &[f64]) -> f64 {
            let scale = b.iter().fold(1e-300_f64, |m, v| m.max(v.abs()));
            a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
        }

        proptest! {
            #[test]
            fn contract_is_bilinear(seed in any::<u64>(), alpha in -10.0f64..10.0, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(vec![m, k], &mut rng);
                let b = random(vec![k, n], &mut rng);
                let lhs = contract(&a.scale(alpha), &b, &[(1, 0)]).unwrap();
                let rhs = contract(&a, &b, &[(1, 0)]).unwrap().scale(alpha);
                prop_assert!(rel_err(lhs.data(), rhs.data()) <= 1e-12);
            }

            #[test]
            fn contract_is_associative(seed in any::<u64>(), d in proptest::collection::vec(1usize..6, 4)) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(vec![d[0], d[1]], &mut rng);
                let b = random(vec![d[1], d[2]], &mut rng);
                let c = random(vec![d[2], d[3]], &mut rng);
                let left = contract(&contract(&a, &b, &[(1, 0)]).unwrap(), &c, &[(1, 0)]).unwrap();
                let right = contract(&a, &contract(&b, &c, &[(1, 0)]).unwrap(), &[(1, 0)]).unwrap();
                prop_assert!(rel_err(left.data(), right.data()) <= 1e-10);
            }

            #[test]
            fn exp_scale_is_additive_in_beta(seed in any::<u64>(), b1 in 0.0f64..2.0, b2 in 0.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(vec![3, 2, 3], &mut rng);
                let joint = exp_scale(&a, b1 + b2).unwrap();
                let split = hadamard(&exp_scale(&a, b1).unwrap(), &exp_scale(&a, b2).unwrap()).unwrap();
                prop_assert!(rel_err(joint.data(), split.data()) <= 1e-12);
            }
        }
    }
}
