use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};
use crate::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
}

impl ResizeMode {
    pub const ALL: [ResizeMode; 3] = [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Bicubic];

    pub fn as_str(&self) -> &'static str {
        match self {
            ResizeMode::Nearest => "nearest",
            ResizeMode::Bilinear => "bilinear",
            ResizeMode::Bicubic => "bicubic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
#[inline]
pub fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-index source taps along one axis.
struct AxisTaps {
    idx: Vec<usize>,
    weights: Vec<f64>,
    taps: usize,
}

fn axis_taps(in_len: usize, out_len: usize, mode: ResizeMode) -> AxisTaps {
    let ratio = out_len as f64 / in_len as f64;
    let last = in_len as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    let taps = match mode {
        ResizeMode::Nearest => 1,
        ResizeMode::Bilinear => 2,
        ResizeMode::Bicubic => 4,
    };
    let mut idx = Vec::with_capacity(out_len * taps);
    let mut weights = Vec::with_capacity(out_len * taps);
    for o in 0..out_len {
        match mode {
            ResizeMode::Nearest => {
                let src = ((o as f64 + 0.5) / ratio).floor() as isize;
                idx.push(clamp(src));
                weights.push(1.0);
            }
            ResizeMode::Bilinear => {
                let src = (o as f64 + 0.5) / ratio - 0.5;
                let x0 = src.floor();
                let f = src - x0;
                idx.extend([clamp(x0 as isize), clamp(x0 as isize + 1)]);
                weights.extend([1.0 - f, f]);
            }
            ResizeMode::Bicubic => {
                let src = (o as f64 + 0.5) / ratio - 0.5;
                let x0 = src.floor();
                let f = src - x0;
                for t in -1..=2isize {
                    idx.push(clamp(x0 as isize + t));
                    weights.push(keys_cubic(f - t as f64));
                }
            }
        }
    }
    AxisTaps { idx, weights, taps }
}

/// Resize to `round(H * scale) x round(W * scale)`.
pub fn resize(img: &ImageTensor, scale: f64, mode: ResizeMode) -> Result<ImageTensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("resize", format!("scale must be positive, got {scale}")));
    }
    let s = img.shape();
    let oh = (s.h as f64 * scale).round() as usize;
    let ow = (s.w as f64 * scale).round() as usize;
    resize_to(img, oh, ow, mode)
}

/// Separable resampling with half-pixel-centered coordinates and edge
/// clamping. Output is clamped to `[0, 1]`.
pub fn resize_to(img: &ImageTensor, oh: usize, ow: usize, mode: ResizeMode) -> Result<ImageTensor> {
    let s = img.shape();
    if oh == 0 || ow == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(
            "resize",
            format!("degenerate output size {oh}x{ow} from {}x{}", s.h, s.w),
        ));
    }
    let ty = axis_taps(s.h, oh, mode);
    let tx = axis_taps(s.w, ow, mode);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    let mut tmp = vec![0.0f64; s.h * ow];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            for y in 0..s.h {
                let row = &src[y * s.w..(y + 1) * s.w];
                for x in 0..ow {
                    let k = x * tx.taps;
                    tmp[y * ow + x] = (0..tx.taps)
                        .map(|t| tx.weights[k + t] * row[tx.idx[k + t]] as f64)
                        .sum();
                }
            }
            let dst = out.plane_mut(n, c);
            for y in 0..oh {
                let k = y * ty.taps;
                for x in 0..ow {
                    let v: f64 = (0..ty.taps)
                        .map(|t| ty.weights[k + t] * tmp[ty.idx[k + t] * ow + x])
                        .sum();
                    dst[y * ow + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(out)
}
