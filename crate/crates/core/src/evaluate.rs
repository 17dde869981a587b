//! PSNR and the degradation x dataset evaluation grid.

use rayon::prelude::*;

use crate::degrade::{resize, test_degradation, ResizeMode, TestKind};
use crate::error::Result;
use crate::model::SrNetwork;
use crate::rng::derive_stream;
use crate::ImageTensor;

/// Default seed for test-time noise streams.
pub const EVAL_SEED: u64 = 0x5EED_2022;

/// `10 log10(1 / MSE)` on the `[0, 1]` scale after clamping both inputs.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.shape().expect_eq(&b.shape(), "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Formats a PSNR for CSV output; infinity becomes `inf`.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Anything that maps an LR image to an SR image.
pub trait Upscaler: Sync {
    fn sr_scale(&self) -> usize;
    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor>;
}

impl Upscaler for SrNetwork {
    fn sr_scale(&self) -> usize {
        self.config().sr_scale
    }

    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        self.infer(lr)
    }
}

/// Plain bicubic interpolation, the no-learning reference.
#[derive(Debug, Clone, Copy)]
pub struct BicubicUpscaler {
    pub scale: usize,
}

impl Upscaler for BicubicUpscaler {
    fn sr_scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        resize(lr, self.scale as f64, ResizeMode::Bicubic)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<(String, ImageTensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub kind: TestKind,
    pub dataset: String,
    pub mean_psnr: f64,
    pub per_image: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// `model,degradation,dataset,image,psnr_db`
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("model,degradation,dataset,image,psnr_db\n");
        for r in &self.rows {
            for (image, v) in &r.per_image {
                out.push_str(&format!("{},{},{},{},{}\n", r.model, r.kind, r.dataset, image, format_psnr(*v)));
            }
        }
        out
    }

    /// `model,degradation,dataset,mean_psnr_db,images`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,degradation,dataset,mean_psnr_db,images\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.model,
                r.kind,
                r.dataset,
                format_psnr(r.mean_psnr),
                r.per_image.len()
            ));
        }
        out
    }

    pub fn find(&self, kind: TestKind, dataset: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.kind == kind && r.dataset == dataset)
    }
}

/// Noise-stream seed for image `index` under `eval_seed`.
pub fn image_seed(eval_seed: u64, index: usize) -> u64 {
    derive_stream(eval_seed, index as u64).next_u64()
}

/// Degrade a center-cropped HR image with a test kind; returns `(lr, hr)`.
pub fn degrade_for_test(hr: &ImageTensor, kind: TestKind, s: usize, seed: u64) -> Result<(ImageTensor, ImageTensor)> {
    let hr = hr.crop_to_multiple(s)?;
    let lr = test_degradation(kind, s).with_seed(seed).apply(&hr)?;
    Ok((lr, hr))
}

/// Runs every `(dataset, kind)` cell: degrade each HR image, upscale in eval
/// mode, and score against the (cropped) HR.
pub fn evaluate_grid(
    net: &dyn Upscaler,
    model_tag: &str,
    datasets: &[Dataset],
    kinds: &[TestKind],
    eval_seed: u64,
) -> Result<EvalReport> {
    let s = net.sr_scale();
    let mut report = EvalReport::default();
    for ds in datasets {
        for &kind in kinds {
            let per_image = ds
                .images
                .par_iter()
                .enumerate()
                .map(|(i, (name, hr))| {
                    let (lr, hr) = degrade_for_test(hr, kind, s, image_seed(eval_seed, i))?;
                    let sr = net.upscale(&lr)?;
                    Ok((name.clone(), psnr(&sr, &hr)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let mean_psnr = per_image.iter().map(|(_, v)| v).sum::<f64>() / per_image.len().max(1) as f64;
            report.rows.push(EvalRow {
                model: model_tag.to_string(),
                kind,
                dataset: ds.name.clone(),
                mean_psnr,
                per_image,
            });
        }
    }
    Ok(report)
}
