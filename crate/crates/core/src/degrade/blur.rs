use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::ImageTensor;

/// Normalized, non-negative, odd-sized 2-D kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
}

/// Anisotropic Gaussian: weights proportional to
/// `exp(-(u'^2 / 2 sx^2 + v'^2 / 2 sy^2))` where `(u', v')` is the grid
/// offset rotated by `theta`.
pub fn gaussian_kernel(size: usize, sigma_x: f64, sigma_y: f64, theta: f64) -> Result<BlurKernel> {
    const OP: &str = "gaussian_kernel";
    if size < 3 || size % 2 == 0 {
        return Err(Error::invalid(OP, format!("size must be odd and >= 3, got {size}")));
    }
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(Error::invalid(
            OP,
            format!("sigmas must be positive, got ({sigma_x}, {sigma_y})"),
        ));
    }
    let weights = gaussian_weights(size, sigma_x, sigma_y, theta);
    Ok(BlurKernel {
        size,
        weights,
        sigma_x,
        sigma_y,
        theta,
    })
}

fn gaussian_weights(size: usize, sx: f64, sy: f64, theta: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let (sin, cos) = theta.sin_cos();
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        let v = i as f64 - r;
        for j in 0..size {
            let u = j as f64 - r;
            let ur = cos * u + sin * v;
            let vr = -sin * u + cos * v;
            w.push((-(ur * ur / (2.0 * sx * sx) + vr * vr / (2.0 * sy * sy))).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major `size x size` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    /// Same Gaussian evaluated on a smaller odd grid (`size <= max_size`).
    /// Returns `None` when no odd size `>= 3` fits.
    pub fn fitted(&self, max_size: usize) -> Option<BlurKernel> {
        if self.size <= max_size {
            return Some(self.clone());
        }
        let size = if max_size % 2 == 1 { max_size } else { max_size.saturating_sub(1) };
        if size < 3 {
            return None;
        }
        Some(BlurKernel {
            size,
            weights: gaussian_weights(size, self.sigma_x, self.sigma_y, self.theta),
            ..self.clone()
        })
    }
}

/// Reflect-101 index: `-1 -> 1`, `len -> len - 2`.
#[inline]
pub(crate) fn reflect101(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Per-plane 2-D correlation with reflect-101 borders; output has the input size.
pub fn apply_blur(img: &ImageTensor, k: &BlurKernel) -> Result<ImageTensor> {
    let s = img.shape();
    if k.size > s.h || k.size > s.w {
        return Err(Error::invalid(
            "apply_blur",
            format!("kernel size {} exceeds image {}x{}", k.size, s.h, s.w),
        ));
    }
    let r = (k.size / 2) as isize;
    let mut out = Tensor4::zeros(s);
    let row_idx: Vec<Vec<usize>> = (0..s.h)
        .map(|y| (0..k.size).map(|i| reflect101(y as isize + i as isize - r, s.h)).collect())
        .collect();
    let col_idx: Vec<Vec<usize>> = (0..s.w)
        .map(|x| (0..k.size).map(|j| reflect101(x as isize + j as isize - r, s.w)).collect())
        .collect();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut acc = 0.0f64;
                    for (i, &sy) in row_idx[y].iter().enumerate() {
                        let srow = &src[sy * s.w..(sy + 1) * s.w];
                        let krow = &k.weights[i * k.size..(i + 1) * k.size];
                        for (&kw, &sx) in krow.iter().zip(&col_idx[x]) {
                            acc += kw * srow[sx] as f64;
                        }
                    }
                    dst[y * s.w + x] = acc as f32;
                }
            }
        }
    }
    Ok(out)
}
