use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

pub fn conv_output_size(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: Shape4, weight: Shape4, bias: Shape4, stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if weight.h != weight.w {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "kernel width",
                expected: weight.h,
                found: weight.w,
            });
        }
        if weight.c != x.c {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "input channels",
                expected: weight.c,
                found: x.c,
            });
        }
        if bias.numel() != weight.n {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "bias length",
                expected: weight.n,
                found: bias.numel(),
            });
        }
        let k = weight.h;
        let oh = conv_output_size(x.h, k, stride, padding)
            .ok_or_else(|| Error::invalid(OP, format!("kernel {k} does not fit height {} (padding {padding}, stride {stride})", x.h)))?;
        let ow = conv_output_size(x.w, k, stride, padding)
            .ok_or_else(|| Error::invalid(OP, format!("kernel {k} does not fit width {} (padding {padding}, stride {stride})", x.w)))?;
        Ok(ConvGeometry {
            c_in: x.c,
            h: x.h,
            w: x.w,
            c_out: weight.n,
            k,
            stride,
            padding,
            oh,
            ow,
        })
    }

    #[inline]
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    #[inline]
    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Source column for output column `ox` and tap `kx`, if inside the image.
    #[inline]
    fn src(&self, o: usize, tap: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + tap) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// Unfolds one sample (`C x H x W`) into a `patch_len x out_plane` matrix.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.out_plane();
        let mut row = 0;
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ky, self.h) {
                            None => drow.fill(T::zero()),
                            Some(iy) => {
                                let srow = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    *d = match self.src(ox, kx, self.w) {
                                        Some(ix) => srow[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds columns back into `dx`.
    pub fn col2im_add<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.out_plane();
        let mut row = 0;
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        if let Some(iy) = self.src(oy, ky, self.h) {
                            let srow = &src[oy * self.ow..(oy + 1) * self.ow];
                            let drow = &mut plane[iy * self.w..(iy + 1) * self.w];
                            for (ox, &v) in srow.iter().enumerate() {
                                if let Some(ix) = self.src(ox, kx, self.w) {
                                    drow[ix] = drow[ix] + v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation. `weight` is `C_out x C_in x k x k`,
/// `bias` holds `C_out` values in any 4-D layout.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    Ok(conv_forward_geom(&g, x, weight, bias))
}

pub(crate) fn conv_forward_geom<T: Real>(
    g: &ConvGeometry,
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Tensor4<T> {
    let n = x.shape().n;
    let (kk, p) = (g.patch_len(), g.out_plane());
    let mut out = Tensor4::zeros(Shape4::new(n, g.c_out, g.oh, g.ow));
    let mut cols = vec![T::zero(); kk * p];
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    for s in 0..n {
        g.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        let y = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
        for (co, plane) in y.chunks_mut(p).enumerate() {
            plane.fill(bias.data()[co]);
        }
        T::gemm(
            g.c_out, kk, p, T::one(),
            weight.data(), kk as isize, 1,
            &cols, p as isize, 1,
            T::one(),
            y, p as isize, 1,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeometry,
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dy: &Tensor4<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let n = x.shape().n;
    let (kk, p) = (g.patch_len(), g.out_plane());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = vec![T::zero(); kk * p];
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = need_input.then(|| vec![T::zero(); x.numel()]);
    for s in 0..n {
        let dys = &dy.data()[s * out_len..(s + 1) * out_len];
        for (co, plane) in dys.chunks(p).enumerate() {
            db[co] = db[co] + plane.iter().copied().sum::<T>();
        }
        g.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        // dW += dY (C_out x P) * cols^T (P x K)
        T::gemm(
            g.c_out, p, kk, T::one(),
            dys, p as isize, 1,
            &cols, 1, p as isize,
            T::one(),
            &mut dw, kk as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T (K x C_out) * dY (C_out x P)
            T::gemm(
                kk, g.c_out, p, T::one(),
                weight.data(), 1, kk as isize,
                dys, p as isize, 1,
                T::zero(),
                &mut dcols, p as isize, 1,
            );
            g.col2im_add(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

fn shuffle_check(shape: Shape4, r: usize) -> Result<()> {
    if r == 0 || shape.c % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channel count {} is not divisible by r^2 = {}", shape.c, r * r),
        ));
    }
    Ok(())
}

/// `(N, C, H, W) -> (N, C/r^2, H*r, W*r)` with
/// `out[n][c][h*r+dy][w*r+dx] = in[n][c*r*r + dy*r + dx][h][w]`.
pub fn pixel_shuffle_tensor<T: Real>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    shuffle_check(s, r)?;
    let out_shape = Shape4::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    Ok(Tensor4::from_fn(out_shape, |n, c, oy, ox| {
        let (h, dy, w, dx) = (oy / r, oy % r, ox / r, ox % r);
        x.get(n, c * r * r + dy * r + dx, h, w)
    }))
}

/// Inverse permutation of [`pixel_shuffle_tensor`].
pub fn pixel_unshuffle_tensor<T: Real>(y: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let s = y.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("spatial size {}x{} not divisible by {r}", s.h, s.w),
        ));
    }
    let in_shape = Shape4::new(s.n, s.c * r * r, s.h / r, s.w / r);
    Ok(Tensor4::from_fn(in_shape, |n, c, h, w| {
        let (co, rem) = (c / (r * r), c % (r * r));
        y.get(n, co, h * r + rem / r, w * r + rem % r)
    }))
}
