use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(|args| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// Swaps the last two axes, treating leading axes as a batch.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        if rank < 2 {
            return Err(TensorError::invalid(
                "transpose",
                format!("needs rank >= 2, got shape {:?}", tx.shape()),
            ));
        }
        let (r, c) = (tx.shape()[rank - 2], tx.shape()[rank - 1]);
        let batch = tx.numel() / (r * c).max(1);
        let swap = move |src: &[T]| {
            let mut dst = vec![T::zero(); src.len()];
            for b in 0..batch {
                let (s, d) = (&src[b * r * c..], &mut dst[b * r * c..]);
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = s[i * c + j];
                    }
                }
            }
            dst
        };
        let mut shape = tx.shape().to_vec();
        shape.swap(rank - 2, rank - 1);
        let out = Tensor::new(&shape, swap(tx.data()))?;
        // the inverse of swapping (r, c) is swapping (c, r)
        let unswap = move |src: &[T]| {
            let mut dst = vec![T::zero(); src.len()];
            for b in 0..batch {
                let (s, d) = (&src[b * r * c..], &mut dst[b * r * c..]);
                for j in 0..c {
                    for i in 0..r {
                        d[i * c + j] = s[j * r + i];
                    }
                }
            }
            dst
        };
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |args| vec![Some(unswap(args.grad))]),
        ))
    }

    /// Picks `x[i, labels[i]]` from a `[M, C]` matrix, giving `[M]`.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let &[m, c] = tx.shape() else {
            return Err(TensorError::invalid(
                "pick",
                format!("needs a matrix, got shape {:?}", tx.shape()),
            ));
        };
        if labels.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: tx.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::invalid(
                "pick",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let out: Vec<T> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| tx.data()[i * c + y])
            .collect();
        let labels = labels.to_vec();
        Ok(self.custom(
            &[x],
            Tensor::new(&[m], out)?,
            Box::new(move |args| {
                let mut g = vec![T::zero(); m * c];
                for (i, &y) in labels.iter().enumerate() {
                    g[i * c + y] = args.grad[i];
                }
                vec![Some(g)]
            }),
        ))
    }
}
