//! Seeded synthesis of low-resolution images from high-resolution ones.
//!
//! Operators act in continuous `[0, 1]` space; quantization to 8 bits only
//! happens at file boundaries. A [`DegradationPipeline`] is an ordered list
//! of operators plus the seed of its noise stream, and serializes to a flat
//! text manifest with one operator per line.

mod blur;
mod jpeg;
mod resize;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

pub use blur::{apply_blur, gaussian_kernel, BlurKernel};
pub use jpeg::{fdct8x8, idct8x8, jpeg_roundtrip, quant_tables, scale_table, CHROMA_BASE, LUMA_BASE};
pub use resize::{keys_cubic, resize, resize_to, ResizeMode};

use crate::error::{Error, Result};
use crate::rng::{seed_rng, RngState};
use crate::ImageTensor;

/// `out = clamp(img + sigma255 / 255 * z, 0, 1)` with one standard normal
/// draw per entry, in storage order.
pub fn add_gaussian_noise(img: &ImageTensor, sigma255: f64, rng: &mut RngState) -> Result<ImageTensor> {
    if !(sigma255 >= 0.0) {
        return Err(Error::invalid("noise", format!("sigma must be >= 0, got {sigma255}")));
    }
    if sigma255 == 0.0 {
        return Ok(img.clone());
    }
    let sigma = sigma255 / 255.0;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + sigma * rng.next_gaussian()).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DegradationOp {
    Blur(BlurKernel),
    /// Resize relative to the current image.
    Resize { scale: f64, mode: ResizeMode },
    /// Resize to `scale` times the pipeline's input size.
    ResizeTo { scale: f64, mode: ResizeMode },
    Noise { sigma: f64 },
    Jpeg { quality: u8 },
}

impl DegradationOp {
    pub fn blur(size: usize, sigma_x: f64, sigma_y: f64, theta: f64) -> Result<Self> {
        Ok(DegradationOp::Blur(gaussian_kernel(size, sigma_x, sigma_y, theta)?))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DegradationOp::Blur(_) => Ok(()),
            DegradationOp::Resize { scale, .. } | DegradationOp::ResizeTo { scale, .. } => {
                if *scale > 0.0 && scale.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("resize", format!("scale must be positive, got {scale}")))
                }
            }
            DegradationOp::Noise { sigma } => {
                if *sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid("noise", format!("sigma must be >= 0, got {sigma}")))
                }
            }
            DegradationOp::Jpeg { quality } => quant_tables(*quality).map(|_| ()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DegradationOp::Blur(_) => "blur",
            DegradationOp::Resize { .. } => "resize",
            DegradationOp::ResizeTo { .. } => "resize_to",
            DegradationOp::Noise { .. } => "noise",
            DegradationOp::Jpeg { .. } => "jpeg",
        }
    }
}

impl fmt::Display for DegradationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegradationOp::Blur(k) => write!(
                f,
                "blur size={} sx={} sy={} theta={}",
                k.size(),
                k.sigma_x,
                k.sigma_y,
                k.theta
            ),
            DegradationOp::Resize { scale, mode } => write!(f, "resize scale={scale} mode={}", mode.as_str()),
            DegradationOp::ResizeTo { scale, mode } => {
                write!(f, "resize_to scale={scale} mode={}", mode.as_str())
            }
            DegradationOp::Noise { sigma } => write!(f, "noise sigma={sigma}"),
            DegradationOp::Jpeg { quality } => write!(f, "jpeg q={quality}"),
        }
    }
}

fn manifest_err(line: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("bad manifest line '{line}': {msg}"))
}

impl FromStr for DegradationOp {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(|| manifest_err(line, "empty"))?;
        let mut fields = Vec::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| manifest_err(line, "expected key=value"))?;
            fields.push((k, v));
        }
        let get = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| manifest_err(line, format!("missing {key}")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse::<f64>()
                .map_err(|e| manifest_err(line, format!("{key}: {e}")))
        };
        let expect = |keys: &[&str]| -> Result<()> {
            match fields.iter().find(|(k, _)| !keys.contains(k)) {
                Some((k, _)) => Err(manifest_err(line, format!("unknown key {k}"))),
                None => Ok(()),
            }
        };
        let mode = || -> Result<ResizeMode> {
            let m = get("mode")?;
            ResizeMode::parse(m).ok_or_else(|| manifest_err(line, format!("unknown mode {m}")))
        };
        let op = match name {
            "blur" => {
                expect(&["size", "sx", "sy", "theta"])?;
                let size = get("size")?
                    .parse::<usize>()
                    .map_err(|e| manifest_err(line, format!("size: {e}")))?;
                DegradationOp::blur(size, num("sx")?, num("sy")?, num("theta")?)?
            }
            "resize" => {
                expect(&["scale", "mode"])?;
                DegradationOp::Resize {
                    scale: num("scale")?,
                    mode: mode()?,
                }
            }
            "resize_to" => {
                expect(&["scale", "mode"])?;
                DegradationOp::ResizeTo {
                    scale: num("scale")?,
                    mode: mode()?,
                }
            }
            "noise" => {
                expect(&["sigma"])?;
                DegradationOp::Noise { sigma: num("sigma")? }
            }
            "jpeg" => {
                expect(&["q"])?;
                let q = get("q")?
                    .parse::<u8>()
                    .map_err(|e| manifest_err(line, format!("q: {e}")))?;
                DegradationOp::Jpeg { quality: q }
            }
            other => return Err(manifest_err(line, format!("unknown op {other}"))),
        };
        op.validate()?;
        Ok(op)
    }
}

/// Ordered operators, the SR factor they target, and the noise-stream seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationPipeline {
    pub stages: Vec<DegradationOp>,
    pub sr_scale: usize,
    pub seed: u64,
}

impl DegradationPipeline {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Runs every stage. The input size must be divisible by `sr_scale`, and
    /// the output is exactly `(H / s) x (W / s)`.
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let s = img.shape();
        let k = self.sr_scale;
        if k == 0 || s.h % k != 0 || s.w % k != 0 {
            return Err(Error::invalid(
                "degrade",
                format!("image {}x{} not divisible by scale {k}", s.h, s.w),
            ));
        }
        let mut rng = seed_rng(self.seed);
        let mut cur = img.clone();
        for op in &self.stages {
            cur = match op {
                DegradationOp::Blur(kernel) => {
                    let sh = cur.shape();
                    match kernel.fitted(sh.h.min(sh.w)) {
                        Some(kf) => apply_blur(&cur, &kf)?,
                        None => cur,
                    }
                }
                DegradationOp::Resize { scale, mode } => {
                    let sh = cur.shape();
                    let oh = ((sh.h as f64 * scale).round() as usize).max(1);
                    let ow = ((sh.w as f64 * scale).round() as usize).max(1);
                    resize_to(&cur, oh, ow, *mode)?
                }
                DegradationOp::ResizeTo { scale, mode } => {
                    let oh = ((s.h as f64 * scale).round() as usize).max(1);
                    let ow = ((s.w as f64 * scale).round() as usize).max(1);
                    resize_to(&cur, oh, ow, *mode)?
                }
                DegradationOp::Noise { sigma } => add_gaussian_noise(&cur, *sigma, &mut rng)?,
                DegradationOp::Jpeg { quality } => jpeg_roundtrip(&cur, *quality)?,
            };
        }
        let out = cur.shape();
        if out.h != s.h / k || out.w != s.w / k {
            return Err(Error::invalid(
                "degrade",
                format!(
                    "pipeline produced {}x{}, expected {}x{}",
                    out.h,
                    out.w,
                    s.h / k,
                    s.w / k
                ),
            ));
        }
        Ok(cur)
    }

    /// Flat text manifest: a header comment with scale and seed, then one op per line.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("# sr_scale={} seed={}\n", self.sr_scale, self.seed);
        for op in &self.stages {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses [`to_manifest`](Self::to_manifest) output. Without a header,
    /// `sr_scale` defaults to 1 and `seed` to 0.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut pipeline = DegradationPipeline {
            stages: Vec::new(),
            sr_scale: 1,
            seed: 0,
        };
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for field in comment.split_whitespace() {
                    match field.split_once('=') {
                        Some(("sr_scale", v)) => {
                            pipeline.sr_scale = v.parse().map_err(|e| manifest_err(line, e))?
                        }
                        Some(("seed", v)) => pipeline.seed = v.parse().map_err(|e| manifest_err(line, e))?,
                        _ => {}
                    }
                }
                continue;
            }
            pipeline.stages.push(line.parse()?);
        }
        Ok(pipeline)
    }
}

/// Test-time degradation combinations: `b` blur, `n` noise, `j` JPEG, all
/// around a bicubic downsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TestKind {
    Clean,
    B,
    N,
    J,
    BN,
    BJ,
    NJ,
    BNJ,
}

impl TestKind {
    pub const ALL: [TestKind; 8] = [
        TestKind::Clean,
        TestKind::B,
        TestKind::N,
        TestKind::J,
        TestKind::BN,
        TestKind::BJ,
        TestKind::NJ,
        TestKind::BNJ,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestKind::Clean => "clean",
            TestKind::B => "b",
            TestKind::N => "n",
            TestKind::J => "j",
            TestKind::BN => "b+n",
            TestKind::BJ => "b+j",
            TestKind::NJ => "n+j",
            TestKind::BNJ => "b+n+j",
        }
    }

    fn parts(&self) -> (bool, bool, bool) {
        match self {
            TestKind::Clean => (false, false, false),
            TestKind::B => (true, false, false),
            TestKind::N => (false, true, false),
            TestKind::J => (false, false, true),
            TestKind::BN => (true, true, false),
            TestKind::BJ => (true, false, true),
            TestKind::NJ => (false, true, true),
            TestKind::BNJ => (true, true, true),
        }
    }

    pub fn valid_tokens() -> String {
        Self::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestKind {
    type Err = Error;

    /// Accepts the canonical tokens plus `blur`, `noise` and `jpeg` as
    /// aliases for the single-component kinds.
    fn from_str(s: &str) -> Result<Self> {
        let token = s.trim().to_ascii_lowercase();
        let alias = match token.as_str() {
            "blur" => "b",
            "noise" => "n",
            "jpeg" => "j",
            t => t,
        };
        TestKind::ALL
            .into_iter()
            .find(|k| k.as_str() == alias)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown degradation kind '{s}' (valid kinds: {})",
                    TestKind::valid_tokens()
                ))
            })
    }
}

pub const TEST_BLUR_SIZE: usize = 21;
pub const TEST_BLUR_SIGMA: f64 = 2.0;
pub const TEST_NOISE_SIGMA: f64 = 20.0;
pub const TEST_JPEG_QUALITY: u8 = 50;

/// Fixed-parameter test pipeline, composed as blur -> bicubic -> noise -> jpeg
/// with absent components skipped. The seed is 0; use
/// [`DegradationPipeline::with_seed`] for per-image noise streams.
pub fn test_degradation(kind: TestKind, s: usize) -> DegradationPipeline {
    let (b, n, j) = kind.parts();
    let mut stages = Vec::new();
    if b {
        stages.push(
            DegradationOp::blur(TEST_BLUR_SIZE, TEST_BLUR_SIGMA, TEST_BLUR_SIGMA, 0.0)
                .expect("fixed kernel parameters are valid"),
        );
    }
    stages.push(DegradationOp::Resize {
        scale: 1.0 / s as f64,
        mode: ResizeMode::Bicubic,
    });
    if n {
        stages.push(DegradationOp::Noise {
            sigma: TEST_NOISE_SIGMA,
        });
    }
    if j {
        stages.push(DegradationOp::Jpeg {
            quality: TEST_JPEG_QUALITY,
        });
    }
    DegradationPipeline {
        stages,
        sr_scale: s,
        seed: 0,
    }
}

/// Parameter ranges for train-time pipeline sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRanges {
    pub blur_prob: f64,
    pub kernel_sizes: (usize, usize),
    pub sigma: (f64, f64),
    pub aniso_prob: f64,
    pub resize_scale: (f64, f64),
    pub noise_prob: f64,
    pub noise_sigma: (f64, f64),
    pub jpeg_quality: (u8, u8),
}

pub const STAGE1: StageRanges = StageRanges {
    blur_prob: 1.0,
    kernel_sizes: (7, 21),
    sigma: (0.2, 3.0),
    aniso_prob: 0.5,
    resize_scale: (0.15, 1.5),
    noise_prob: 1.0,
    noise_sigma: (1.0, 30.0),
    jpeg_quality: (30, 95),
};

/// Stage 2 ends with a bicubic resize to the target size, so
/// `resize_scale` is unused there.
pub const STAGE2: StageRanges = StageRanges {
    blur_prob: 0.8,
    kernel_sizes: (7, 21),
    sigma: (0.2, 1.5),
    aniso_prob: 0.5,
    resize_scale: (1.0, 1.0),
    noise_prob: 1.0,
    noise_sigma: (1.0, 25.0),
    jpeg_quality: (30, 95),
};

fn sample_blur(r: &StageRanges, rng: &mut RngState) -> DegradationOp {
    let n_sizes = (r.kernel_sizes.1 - r.kernel_sizes.0) / 2 + 1;
    let size = r.kernel_sizes.0 + 2 * rng.below(n_sizes as u64) as usize;
    let (sx, sy, theta) = if rng.bernoulli(r.aniso_prob) {
        (
            rng.uniform(r.sigma.0, r.sigma.1),
            rng.uniform(r.sigma.0, r.sigma.1),
            rng.uniform(0.0, PI),
        )
    } else {
        let s = rng.uniform(r.sigma.0, r.sigma.1);
        (s, s, 0.0)
    };
    DegradationOp::blur(size, sx, sy, theta).expect("sampled kernel parameters are valid")
}

fn sample_quality(r: &StageRanges, rng: &mut RngState) -> u8 {
    let span = (r.jpeg_quality.1 - r.jpeg_quality.0) as u64 + 1;
    r.jpeg_quality.0 + rng.below(span) as u8
}

/// Two-stage randomized pipeline: `[blur, resize, noise, jpeg]` then
/// `[blur?, bicubic resize to 1/s, noise, jpeg]`.
pub fn sample_train_pipeline(s: usize, rng: &mut RngState) -> Result<DegradationPipeline> {
    if !(s == 2 || s == 4) {
        return Err(Error::invalid("sample_train_pipeline", format!("scale must be 2 or 4, got {s}")));
    }
    let mut stages = Vec::with_capacity(8);
    if rng.bernoulli(STAGE1.blur_prob) {
        stages.push(sample_blur(&STAGE1, rng));
    }
    let mode = ResizeMode::ALL[rng.below(3) as usize];
    stages.push(DegradationOp::Resize {
        scale: rng.uniform(STAGE1.resize_scale.0, STAGE1.resize_scale.1),
        mode,
    });
    if rng.bernoulli(STAGE1.noise_prob) {
        stages.push(DegradationOp::Noise {
            sigma: rng.uniform(STAGE1.noise_sigma.0, STAGE1.noise_sigma.1),
        });
    }
    stages.push(DegradationOp::Jpeg {
        quality: sample_quality(&STAGE1, rng),
    });

    if rng.bernoulli(STAGE2.blur_prob) {
        stages.push(sample_blur(&STAGE2, rng));
    }
    stages.push(DegradationOp::ResizeTo {
        scale: 1.0 / s as f64,
        mode: ResizeMode::Bicubic,
    });
    if rng.bernoulli(STAGE2.noise_prob) {
        stages.push(DegradationOp::Noise {
            sigma: rng.uniform(STAGE2.noise_sigma.0, STAGE2.noise_sigma.1),
        });
    }
    stages.push(DegradationOp::Jpeg {
        quality: sample_quality(&STAGE2, rng),
    });
    Ok(DegradationPipeline {
        stages,
        sr_scale: s,
        seed: rng.next_u64(),
    })
}
