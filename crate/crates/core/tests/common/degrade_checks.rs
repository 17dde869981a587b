//! Degradation properties, each returning a diagnostic on failure.

use dropsr::degrade::{
    add_gaussian_noise, apply_blur, gaussian_kernel, jpeg_roundtrip, quant_tables, resize, sample_train_pipeline,
    DegradationOp, ResizeMode, TestKind, CHROMA_BASE, LUMA_BASE, STAGE1, STAGE2,
};
use dropsr::evaluate::degrade_for_test;
use dropsr::rng::seed_rng;
use dropsr::synth::{synthetic_corpus, synthetic_image};
use dropsr::tensor::{Shape4, Tensor4};
use dropsr::ImageTensor;

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn kernel_normalization() -> Check {
    let mut rng = seed_rng(90);
    for _ in 0..500 {
        let size = 3 + 2 * rng.below(10) as usize;
        let sx = rng.uniform(0.1, 8.0);
        let sy = rng.uniform(0.1, 8.0);
        let k = gaussian_kernel(size, sx, sy, rng.uniform(0.0, std::f64::consts::PI)).map_err(|e| e.to_string())?;
        let sum: f64 = k.weights().iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("kernel {size} {sx} {sy}: sum {sum}"))?;
        ensure(k.weights().iter().all(|&w| w >= 0.0), || "negative weight".into())?;
    }
    Ok(())
}

pub fn constants_preserved() -> Check {
    let img = Tensor4::filled(Shape4::new(1, 3, 24, 22), 0.37f32);
    let k = gaussian_kernel(21, 2.0, 1.3, 0.4).map_err(|e| e.to_string())?;
    let b = apply_blur(&img, &k).map_err(|e| e.to_string())?;
    ensure(b.max_abs_diff(&img) <= 1e-6, || format!("blur drift {}", b.max_abs_diff(&img)))?;
    for mode in ResizeMode::ALL {
        for scale in [0.25, 0.5, 0.7, 1.0, 1.5, 2.0] {
            let r = resize(&img, scale, mode).map_err(|e| e.to_string())?;
            let err = r.data().iter().map(|&v| (v - 0.37).abs()).fold(0.0f32, f32::max);
            let tol = if mode == ResizeMode::Nearest { 0.0 } else { 1e-6 };
            ensure(err <= tol, || format!("{mode:?} x{scale}: drift {err}"))?;
        }
    }
    Ok(())
}

pub fn jpeg_table_identity() -> Check {
    let (l, c) = quant_tables(50).map_err(|e| e.to_string())?;
    ensure(l == LUMA_BASE && c == CHROMA_BASE, || "q50 tables differ from the base tables".into())?;
    let (l, c) = quant_tables(100).map_err(|e| e.to_string())?;
    ensure(l.iter().chain(&c).all(|&q| q == 1), || "q100 tables are not all ones".into())
}

pub fn jpeg_q100_error() -> Check {
    for (i, img) in synthetic_corpus(31, 4, 40, 48).iter().enumerate() {
        let out = jpeg_roundtrip(img, 100).map_err(|e| e.to_string())?;
        let err = out.max_abs_diff(img);
        ensure(err < 4.0 / 255.0, || format!("image {i}: q100 max error {:.3}/255", err * 255.0))?;
    }
    Ok(())
}

fn mean_abs_error(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64
}

pub fn jpeg_monotonic() -> Check {
    for (i, img) in synthetic_corpus(32, 6, 48, 48).iter().enumerate() {
        let errs: Vec<f64> = [10u8, 50, 90]
            .iter()
            .map(|&q| jpeg_roundtrip(img, q).map(|o| mean_abs_error(&o, img)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        ensure(errs[0] >= errs[1] && errs[1] >= errs[2], || format!("image {i}: errors {errs:?}"))?;
    }
    Ok(())
}

/// Mean over 8x8 grid blocks of the residual variance within each block.
fn blockiness(out: &ImageTensor, img: &ImageTensor) -> f64 {
    let s = img.shape();
    let mut total = 0.0;
    let mut blocks = 0;
    for c in 0..s.c {
        for by in 0..s.h / 8 {
            for bx in 0..s.w / 8 {
                let vals: Vec<f64> = (0..64)
                    .map(|k| {
                        let (h, w) = (by * 8 + k / 8, bx * 8 + k % 8);
                        (out.get(0, c, h, w) - img.get(0, c, h, w)) as f64
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / 64.0;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
                blocks += 1;
            }
        }
    }
    total / blocks as f64
}

pub fn jpeg_blockiness() -> Check {
    let img = Tensor4::from_fn(Shape4::new(1, 3, 32, 32), |_, c, h, w| {
        if (h / 5 + w / 7 + c) % 2 == 0 {
            0.9
        } else {
            0.1
        }
    });
    let q10 = jpeg_roundtrip(&img, 10).map_err(|e| e.to_string())?;
    let q90 = jpeg_roundtrip(&img, 90).map_err(|e| e.to_string())?;
    let (b10, b90) = (blockiness(&q10, &img), blockiness(&q90, &img));
    ensure(b10 > b90, || format!("blockiness q10 {b10} <= q90 {b90}"))
}

pub fn noise_statistics() -> Check {
    let img = Tensor4::filled(Shape4::new(1, 1, 250, 400), 0.5f32);
    let out = add_gaussian_noise(&img, 20.0, &mut seed_rng(4)).map_err(|e| e.to_string())?;
    let n = img.numel() as f64;
    let diffs: Vec<f64> = out.data().iter().map(|&v| v as f64 - 0.5).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let want = 20.0 / 255.0;
    ensure((sd / want - 1.0).abs() < 0.02, || format!("noise sd {sd} vs {want}"))?;
    let again = add_gaussian_noise(&img, 20.0, &mut seed_rng(4)).map_err(|e| e.to_string())?;
    ensure(again == out, || "noise not deterministic".into())?;
    let clean = add_gaussian_noise(&img, 0.0, &mut seed_rng(4)).map_err(|e| e.to_string())?;
    ensure(clean == img, || "sigma 0 changed the image".into())
}

fn in_range(v: f64, r: (f64, f64)) -> bool {
    v >= r.0 && v <= r.1
}

/// Checks every op of a sampled pipeline against the stage ranges.
pub fn sampled_ranges() -> Check {
    let mut rng = seed_rng(1234);
    let mut modes = std::collections::HashSet::new();
    for trial in 0..1000 {
        let s = if trial % 2 == 0 { 2 } else { 4 };
        let p = sample_train_pipeline(s, &mut rng).map_err(|e| e.to_string())?;
        // Stage 2 starts at the pipeline's ResizeTo, after the first jpeg.
        let split = p
            .stages
            .iter()
            .position(|op| matches!(op, DegradationOp::Jpeg { .. }))
            .ok_or("no stage-1 jpeg")?
            + 1;
        for (i, op) in p.stages.iter().enumerate() {
            let r = if i < split { &STAGE1 } else { &STAGE2 };
            let ok = match op {
                DegradationOp::Blur(k) => {
                    k.size() % 2 == 1
                        && k.size() >= r.kernel_sizes.0
                        && k.size() <= r.kernel_sizes.1
                        && in_range(k.sigma_x, r.sigma)
                        && in_range(k.sigma_y, r.sigma)
                        && (0.0..std::f64::consts::PI).contains(&k.theta)
                }
                DegradationOp::Resize { scale, mode } => {
                    modes.insert(mode.as_str());
                    i < split && in_range(*scale, r.resize_scale)
                }
                DegradationOp::ResizeTo { scale, mode } => {
                    i >= split && *mode == ResizeMode::Bicubic && (*scale - 1.0 / s as f64).abs() < 1e-12
                }
                DegradationOp::Noise { sigma } => in_range(*sigma, r.noise_sigma),
                DegradationOp::Jpeg { quality } => *quality >= r.jpeg_quality.0 && *quality <= r.jpeg_quality.1,
            };
            ensure(ok, || format!("pipeline {trial} op {i} out of range: {op}"))?;
        }
        let kinds: Vec<&str> = p.stages.iter().map(|o| o.kind_name()).collect();
        ensure(kinds.last() == Some(&"jpeg") && kinds.contains(&"resize_to"), || {
            format!("pipeline {trial} layout {kinds:?}")
        })?;
    }
    ensure(modes.len() == 3, || format!("resize modes seen: {modes:?}"))
}

pub fn size_contracts() -> Check {
    let hr = synthetic_image(5, 64, 64);
    let mut rng = seed_rng(8);
    for _ in 0..50 {
        let p = sample_train_pipeline(4, &mut rng).map_err(|e| e.to_string())?;
        let lr = p.apply(&hr).map_err(|e| e.to_string())?;
        ensure(lr.shape() == Shape4::new(1, 3, 16, 16), || format!("{:?} from\n{}", lr.shape(), p.to_manifest()))?;
        ensure(lr.data().iter().all(|v| (0.0..=1.0).contains(v)), || "LR out of [0,1]".into())?;
    }
    for kind in TestKind::ALL {
        for s in [2, 4] {
            let (lr, hr2) = degrade_for_test(&hr, kind, s, 3).map_err(|e| e.to_string())?;
            ensure(lr.shape().h * s == hr2.shape().h && lr.shape().w * s == hr2.shape().w, || {
                format!("{kind} x{s}: {:?}", lr.shape())
            })?;
        }
    }
    Ok(())
}

pub fn pipeline_determinism() -> Check {
    let hr = synthetic_image(6, 48, 48);
    for seed in 0..10 {
        let a = sample_train_pipeline(2, &mut seed_rng(seed)).map_err(|e| e.to_string())?;
        let b = sample_train_pipeline(2, &mut seed_rng(seed)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("seed {seed}: pipelines differ"))?;
        let (x, y) = (a.apply(&hr).map_err(|e| e.to_string())?, b.apply(&hr).map_err(|e| e.to_string())?);
        ensure(x == y, || format!("seed {seed}: outputs differ"))?;
    }
    Ok(())
}

/// Named list of all degradation checks.
pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("kernel normalization", kernel_normalization as fn() -> Check),
        ("constant preservation", constants_preserved),
        ("jpeg q50 tables", jpeg_table_identity),
        ("jpeg q100 error", jpeg_q100_error),
        ("jpeg monotonic error", jpeg_monotonic),
        ("jpeg blockiness", jpeg_blockiness),
        ("noise statistics", noise_statistics),
        ("sampled parameter ranges", sampled_ranges),
        ("size contracts", size_contracts),
        ("pipeline determinism", pipeline_determinism),
    ]
}
