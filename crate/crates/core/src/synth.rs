//! Procedural RGB test images: gradients, smooth texture, anti-aliased
//! shapes and stripe patches. Used as a self-contained toy corpus.

use crate::rng::{derive_stream, RngState};
use crate::tensor::{Shape4, Tensor4};
use crate::ImageTensor;

const SUPERSAMPLE: usize = 4;

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Stripes { cx: f64, cy: f64, r: f64, freq: f64, angle: f64 },
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= *x0 && x <= *x1 && y >= *y0 && y <= *y1,
            Shape::Triangle { pts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
            Shape::Stripes { cx, cy, r, freq, angle } => {
                if (x - cx).abs() > *r || (y - cy).abs() > *r {
                    return false;
                }
                let t = (x - cx) * angle.cos() + (y - cy) * angle.sin();
                (t * freq).rem_euclid(1.0) < 0.5
            }
        }
    }
}

fn random_color(rng: &mut RngState) -> [f64; 3] {
    [rng.next_f64(), rng.next_f64(), rng.next_f64()]
}

fn random_shape(rng: &mut RngState, h: f64, w: f64) -> Shape {
    let size = h.min(w);
    let (cx, cy) = (rng.uniform(0.0, w), rng.uniform(0.0, h));
    match rng.below(4) {
        0 => Shape::Disc {
            cx,
            cy,
            r: rng.uniform(0.05, 0.3) * size,
        },
        1 => {
            let (hw, hh) = (rng.uniform(0.05, 0.3) * size, rng.uniform(0.05, 0.3) * size);
            Shape::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
        2 => {
            let r = rng.uniform(0.1, 0.35) * size;
            let mut pts = [(0.0, 0.0); 3];
            for p in &mut pts {
                let a = rng.uniform(0.0, std::f64::consts::TAU);
                *p = (cx + r * a.cos(), cy + r * a.sin());
            }
            Shape::Triangle { pts }
        }
        _ => Shape::Stripes {
            cx,
            cy,
            r: rng.uniform(0.1, 0.3) * size,
            freq: 1.0 / rng.uniform(2.5, 8.0),
            angle: rng.uniform(0.0, std::f64::consts::PI),
        },
    }
}

/// Smooth per-channel texture: bilinear interpolation of a coarse random grid.
fn value_noise(rng: &mut RngState, h: usize, w: usize, cells: usize) -> Vec<[f64; 3]> {
    let g = cells + 1;
    let grid: Vec<[f64; 3]> = (0..g * g)
        .map(|_| [rng.next_f64() - 0.5, rng.next_f64() - 0.5, rng.next_f64() - 0.5])
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / h as f64 * cells as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / w as f64 * cells as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let mut v = [0.0; 3];
            for (c, vc) in v.iter_mut().enumerate() {
                let a = grid[y0 * g + x0][c] * (1.0 - tx) + grid[y0 * g + x0 + 1][c] * tx;
                let b = grid[(y0 + 1) * g + x0][c] * (1.0 - tx) + grid[(y0 + 1) * g + x0 + 1][c] * tx;
                *vc = a * (1.0 - ty) + b * ty;
            }
            out.push(v);
        }
    }
    out
}

/// One `1 x 3 x h x w` image, a pure function of `seed`.
pub fn synthetic_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = RngState::new(seed);
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let texture_amp = rng.uniform(0.05, 0.25);
    let cells = 2 + rng.below(6) as usize;
    let texture = value_noise(&mut rng, h, w, cells);
    let n_shapes = 4 + rng.below(7) as usize;
    let shapes: Vec<(Shape, [f64; 3], f64)> = (0..n_shapes)
        .map(|_| {
            let s = random_shape(&mut rng, h as f64, w as f64);
            let col = random_color(&mut rng);
            let alpha = rng.uniform(0.6, 1.0);
            (s, col, alpha)
        })
        .collect();

    let mut img = Tensor4::zeros(Shape4::new(1, 3, h, w));
    let norm = (h.max(w)) as f64;
    for y in 0..h {
        for x in 0..w {
            let t = (((x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy) / norm + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t + texture_amp * texture[y * w + x][c];
            }
            for (shape, col, alpha) in &shapes {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px_x = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let px_y = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        hits += shape.covers(px_x, px_y) as usize;
                    }
                }
                let cover = alpha * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + col[c] * cover;
                }
            }
            for (c, v) in px.iter().enumerate() {
                img.set(0, c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// `count` images; image `i` uses the stream derived from `(seed, i)`.
pub fn synthetic_corpus(seed: u64, count: usize, h: usize, w: usize) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| synthetic_image(derive_stream(seed, i as u64).next_u64(), h, w))
        .collect()
}
