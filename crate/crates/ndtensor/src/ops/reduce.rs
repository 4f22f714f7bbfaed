use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<T: Real> Tape<T> {
    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let total: T = tx.data().iter().copied().sum();
        let n = tx.numel();
        self.custom(
            &[x],
            Tensor::scalar(total),
            Box::new(move |args| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = split("sum", tx.shape(), axis)?;
        let src = tx.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let out = Tensor::new(&without_axis(tx.shape(), axis), out)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let go = &args.grad[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        g[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(go);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| TensorError::AxisOutOfRange {
                op: "mean",
                axis,
                rank: self.shape(x).len(),
            })?;
        let s = self.sum(x, axis)?;
        Ok(self.scale(s, T::one() / T::of(n as f64)))
    }

    /// Maximum over `axis`. The gradient is routed to the first maximal
    /// element.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = split("max", tx.shape(), axis)?;
        if n == 0 {
            return Err(TensorError::invalid("max", "empty axis"));
        }
        let src = tx.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..n {
                    if src[(o * n + j) * inner + i] > src[(o * n + best) * inner + i] {
                        best = j;
                    }
                }
                out[o * inner + i] = src[(o * n + best) * inner + i];
                arg[o * inner + i] = (o * n + best) * inner + i;
            }
        }
        let out = Tensor::new(&without_axis(tx.shape(), axis), out)?;
        let numel = outer * n * inner;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let mut g = vec![T::zero(); numel];
                for (k, &src_idx) in arg.iter().enumerate() {
                    g[src_idx] += args.grad[k];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Softmax along `axis` (shape preserved), stabilised by subtracting
    /// the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = split("softmax", tx.shape(), axis)?;
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (out[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let (y, gy) = (args.output.data(), args.grad);
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| gy[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            g[idx(j)] = y[idx(j)] * (gy[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// `log(softmax(x))` along `axis`, computed without forming the softmax.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = split("log_softmax", tx.shape(), axis)?;
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..n).map(|j| (out[idx(j)] - m).exp()).sum::<T>().ln();
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] - lse;
                }
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let (y, gy) = (args.output.data(), args.grad);
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let total: T = (0..n).map(|j| gy[idx(j)]).sum();
                        for j in 0..n {
                            g[idx(j)] = gy[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Euclidean norm along `axis` (removed). The gradient at a zero
    /// vector is taken as zero.
    pub fn l2norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = split("l2norm", tx.shape(), axis)?;
        let src = tx.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let ss: T = (0..n)
                    .map(|j| {
                        let v = src[(o * n + j) * inner + i];
                        v * v
                    })
                    .sum();
                out[o * inner + i] = ss.sqrt();
            }
        }
        let out = Tensor::new(&without_axis(tx.shape(), axis), out)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let (xs, norms, gy) = (args.inputs[0].data(), args.output.data(), args.grad);
                let mut g = vec![T::zero(); xs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let nrm = norms[o * inner + i];
                        if nrm == T::zero() {
                            continue;
                        }
                        let scale = gy[o * inner + i] / nrm;
                        for j in 0..n {
                            let k = (o * n + j) * inner + i;
                            g[k] = xs[k] * scale;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_does_not_overflow() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);
        let l = tape.log_softmax(x, 0).unwrap();
        assert!(tape.value(l).all_finite());
    }

    #[test]
    fn sum_and_mean_along_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s0 = tape.sum(x, 0).unwrap();
        assert_eq!(tape.value(s0).data(), &[3.0, 5.0, 7.0]);
        let m1 = tape.mean(x, 1).unwrap();
        assert_eq!(tape.value(m1).data(), &[1.0, 4.0]);
        assert!(matches!(
            tape.sum(x, 2),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2, .. })
        ));
    }

    #[test]
    fn max_ties_pick_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(&[3], vec![2.0, 5.0, 5.0]).unwrap().requiring_grad());
        let m = tape.max(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn l2norm_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let n = tape.l2norm(x, 1).unwrap();
        assert_eq!(tape.value(n).data(), &[5.0, 0.0]);
    }
}
