//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! The crate covers exactly the operator set a small convolutional speaker
//! embedding network needs: broadcasting elementwise arithmetic, 2-D matrix
//! products, axis reductions (sum, mean, max, softmax, log-softmax, L2 norm)
//! and a handful of shape operations. Anything more specialised (convolution,
//! batch normalisation) is registered from outside through [`Tape::custom`].
//!
//! Values are generic over [`Real`], implemented for `f32` (training) and
//! `f64` (gradient checking).
//!
//! ```
//! use ndtensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(&Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap().requiring_grad());
//! let sq = tape.square(x);
//! let loss = tape.sum_all(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

mod broadcast;
mod error;
mod ops;
mod real;
mod tape;
mod tensor;

pub use broadcast::broadcast_shape;
pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{BackwardArgs, BackwardFn, Tape, Var};
pub use tensor::Tensor;
