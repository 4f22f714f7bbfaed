use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m, k, n, T::one(), ta.data(), k as isize, 1, tb.data(), n as isize, 1, T::zero(),
            out.data_mut(), n as isize, 1,
        );
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |args| {
                let (va, vb, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
                // dA = dC * B^T
                let ga = need_a.then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m, n, k, T::one(), g, n as isize, 1, vb, 1, n as isize, T::zero(), &mut ga,
                        k as isize, 1,
                    );
                    ga
                });
                // dB = A^T * dC
                let gb = need_b.then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k, m, n, T::one(), va, 1, k as isize, g, n as isize, 1, T::zero(), &mut gb,
                        n as isize, 1,
                    );
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_vector() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(3));
        let v = tape.constant(Tensor::new(&[3, 1], vec![1.0, -2.0, 5.0]).unwrap());
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, -2.0, 5.0]);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(out), &[2, 1]);
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn inner_mismatch_is_typed() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }
}
