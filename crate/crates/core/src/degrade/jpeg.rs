//! Baseline JPEG round trip without entropy coding: color transform, 8x8
//! DCT, quantization and reconstruction. Entropy coding is lossless, so it
//! does not change the decoded image and is skipped.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::ImageTensor;

/// Annex K.1 luminance table, natural (row-major) order.
pub const LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K.2 chrominance table, natural order.
pub const CHROMA_BASE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

fn check_quality(quality: u8) -> Result<()> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid("jpeg", format!("quality {quality} outside 1..=100")));
    }
    Ok(())
}

/// IJG quality scaling of one base table.
pub fn scale_table(base: &[u16; 64], quality: u8) -> Result<[u16; 64]> {
    check_quality(quality)?;
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(out)
}

/// `(luma, chroma)` quantization tables for `quality`.
pub fn quant_tables(quality: u8) -> Result<([u16; 64], [u16; 64])> {
    Ok((scale_table(&LUMA_BASE, quality)?, scale_table(&CHROMA_BASE, quality)?))
}

/// Orthonormal 8-point DCT-II basis: `basis[u][x]`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

pub fn fdct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_735_892 * r - 0.331_264_108 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418_687_589 * g - 0.081_312_411 * b + 128.0,
    ]
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let (cb, cr) = (cb - 128.0, cr - 128.0);
    [
        y + 1.402 * cr,
        y - 0.344_136_286 * cb - 0.714_136_286 * cr,
        y + 1.772 * cb,
    ]
}

/// Compress and decompress every image of an `N x 3 x H x W` batch.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let (luma_q, chroma_q) = quant_tables(quality)?;
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::ShapeMismatch {
            op: "jpeg",
            dim: "C",
            expected: 3,
            found: s.c,
        });
    }
    let (h, w) = (s.h, s.w);
    let mut out = Tensor4::zeros(s);
    let mut planes = vec![vec![0.0f64; h * w]; 3];
    for n in 0..s.n {
        let (r, g, b) = (img.plane(n, 0), img.plane(n, 1), img.plane(n, 2));
        for i in 0..h * w {
            let ycc = rgb_to_ycbcr(r[i] as f64 * 255.0, g[i] as f64 * 255.0, b[i] as f64 * 255.0);
            for (p, v) in planes.iter_mut().zip(ycc) {
                p[i] = v;
            }
        }
        for (ci, plane) in planes.iter_mut().enumerate() {
            let table = if ci == 0 { &luma_q } else { &chroma_q };
            code_plane(plane, h, w, table);
        }
        for i in 0..h * w {
            let rgb = ycbcr_to_rgb(planes[0][i], planes[1][i], planes[2][i]);
            for (c, v) in rgb.into_iter().enumerate() {
                out.plane_mut(n, c)[i] = (v / 255.0).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Quantize/dequantize one plane in place; partial edge blocks are padded
/// by replicating the last row/column.
fn code_plane(plane: &mut [f64], h: usize, w: usize, table: &[u16; 64]) {
    let mut block = [0.0f64; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                let sy = (by + y).min(h - 1);
                for x in 0..8 {
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                }
            }
            let mut coef = fdct8x8(&block);
            for (c, &q) in coef.iter_mut().zip(table) {
                let q = q as f64;
                *c = (*c / q).round() * q;
            }
            let rec = idct8x8(&coef);
            for y in 0..8.min(h - by) {
                for x in 0..8.min(w - bx) {
                    plane[(by + y) * w + bx + x] = rec[y * 8 + x] + 128.0;
                }
            }
        }
    }
}
