use crate::broadcast::{broadcast_shape, for_each_pair};
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape =
            broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: op.name(),
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (da, db) = (ta.data(), tb.data());
            let dout = out.data_mut();
            for_each_pair(&out_shape, ta.shape(), tb.shape(), |o, i, j| {
                dout[o] = op.apply(da[i], db[j]);
            });
        }
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |args| {
                let g = args.grad;
                let (va, vb) = (args.inputs[0].data(), args.inputs[1].data());
                let shape = args.output.shape();
                let mut ga = need_a.then(|| vec![T::zero(); va.len()]);
                let mut gb = need_b.then(|| vec![T::zero(); vb.len()]);
                for_each_pair(shape, &sa, &sb, |o, i, j| {
                    let (da, db) = match op {
                        Binary::Add => (g[o], g[o]),
                        Binary::Sub => (g[o], -g[o]),
                        Binary::Mul => (g[o] * vb[j], g[o] * va[i]),
                        Binary::Div => (g[o] / vb[j], -g[o] * va[i] / (vb[j] * vb[j])),
                    };
                    if let Some(ga) = &mut ga {
                        ga[i] += da;
                    }
                    if let Some(gb) = &mut gb {
                        gb[j] += db;
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise map with a caller-supplied derivative. `df` receives
    /// `(input, output)` and returns the local slope.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let xs = args.inputs[0].data();
                let ys = args.output.data();
                let g = args
                    .grad
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, |v| v.ln(), |x, _| T::one() / x)
    }

    /// Rectifier; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map(x, |v| -v, |_, _| -T::one())
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(x, move |v| v + c, |_, _| T::one())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever clamping bites.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.map(
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::one() } else { T::zero() },
        )
    }
}
