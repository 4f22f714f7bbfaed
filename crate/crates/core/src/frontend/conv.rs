use ndtensor::{Real, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, out_h*out_w]` matrix.
fn im2col<T: Real>(img: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, summing
/// overlapping contributions.
fn col2im<T: Real>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D cross-correlation of `[N, C, H, W]` input with `[O, C, kh, kw]`
/// weights, without bias. Output extent is `floor((H + 2p - k) / s) + 1`.
pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
    let (tx, tw) = (tape.value(x), tape.value(w));
    let mismatch = || {
        Error::from(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: tx.shape().to_vec(),
            rhs: tw.shape().to_vec(),
        })
    };
    let (&[n, c, h, wd], &[o, c2, kh, kw]) = (tx.shape(), tw.shape()) else {
        return Err(mismatch());
    };
    if c != c2 || stride == 0 {
        return Err(mismatch());
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Degenerate(format!(
            "{kh}x{kw} kernel larger than padded {h}x{wd} input"
        )));
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        pad,
        out_h: (h + 2 * pad - kh) / stride + 1,
        out_w: (wd + 2 * pad - kw) / stride + 1,
    };
    let (patch, pos, img) = (g.patch(), g.positions(), c * h * wd);
    let mut out = Tensor::zeros(&[n, o, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); patch * pos];
    for b in 0..n {
        im2col(&tx.data()[b * img..(b + 1) * img], &g, &mut cols);
        T::gemm(
            o, patch, pos, T::one(), tw.data(), patch as isize, 1, &cols, pos as isize, 1,
            T::zero(), &mut out.data_mut()[b * o * pos..(b + 1) * o * pos], pos as isize, 1,
        );
    }
    let (need_x, need_w) = (tape.requires_grad(x), tape.requires_grad(w));
    Ok(tape.custom(
        &[x, w],
        out,
        Box::new(move |args| {
            let (xs, ws, gy) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
            let mut gx = need_x.then(|| vec![T::zero(); n * img]);
            let mut gw = need_w.then(|| vec![T::zero(); o * patch]);
            let mut cols = vec![T::zero(); patch * pos];
            let mut dcols = vec![T::zero(); patch * pos];
            for b in 0..n {
                let gyb = &gy[b * o * pos..(b + 1) * o * pos];
                if let Some(gw) = &mut gw {
                    im2col(&xs[b * img..(b + 1) * img], &g, &mut cols);
                    // dW += dY * cols^T
                    T::gemm(
                        o, pos, patch, T::one(), gyb, pos as isize, 1, &cols, 1, pos as isize,
                        T::one(), gw, patch as isize, 1,
                    );
                }
                if let Some(gx) = &mut gx {
                    // dcols = W^T * dY
                    T::gemm(
                        patch, o, pos, T::one(), ws, 1, patch as isize, gyb, pos as isize, 1,
                        T::zero(), &mut dcols, pos as isize, 1,
                    );
                    col2im(&dcols, &g, &mut gx[b * img..(b + 1) * img]);
                }
            }
            vec![gx, gw]
        }),
    ))
}
