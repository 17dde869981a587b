//! Analysis tools over a frozen network's feature tap: channel saliency
//! maps, energy-normalized channel ablation, and degradation-representation
//! clustering scored by the Calinski-Harabasz index.

use std::str::FromStr;

use rayon::prelude::*;

use crate::degrade::TestKind;
use crate::error::{Error, Result};
use crate::evaluate::{degrade_for_test, image_seed, psnr};
use crate::model::TapNetwork;
use crate::nn::Graph;
use crate::tensor::Tensor4;
use crate::ImageTensor;

/// Rescale guard: ablated sums with `|Sum(F')| <= ABLATION_EPS * numel` are
/// left unscaled.
pub const ABLATION_EPS: f64 = 1e-6;
/// Gradient magnitudes at or below this count as all-zero in saliency maps.
pub const SALIENCY_EPS: f64 = 1e-12;

fn single_image(lr: &ImageTensor, op: &'static str) -> Result<()> {
    if lr.shape().n != 1 {
        return Err(Error::ShapeMismatch {
            op,
            dim: "N",
            expected: 1,
            found: lr.shape().n,
        });
    }
    Ok(())
}

/// Channel saliency of one image.
#[derive(Debug, Clone)]
pub struct SaliencyResult {
    /// Attribution target: summed absolute spatial gradient of the SR output.
    pub d_value: f64,
    /// `1 x C x H x W`, jointly min-max normalized to `[0, 1]`.
    pub maps: Tensor4<f32>,
    /// Mean of each channel's normalized map.
    pub channel_scores: Vec<f64>,
}

/// `|dD/dF|` at the tap, where `D` sums `|dx| + |dy|` forward differences
/// of the SR output, normalized over all channels together.
pub fn channel_saliency<N: TapNetwork + ?Sized>(net: &N, lr: &ImageTensor) -> Result<SaliencyResult> {
    single_image(lr, "channel_saliency")?;
    let features = net.features(lr)?;
    let mut g = Graph::new();
    let tap = g.param(features);
    let out = net.reconstruct(&mut g, tap, lr)?;
    let d = g.gradient_l1(out);
    g.backward(d)?;
    let d_value = g.value(d).data()[0] as f64;
    let shape = g.value(tap).shape();
    let grad = g
        .grad(tap)
        .cloned()
        .unwrap_or_else(|| Tensor4::zeros(shape))
        .map(|v| v.abs());
    let (lo, hi) = grad
        .data()
        .iter()
        .fold((f32::INFINITY, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let maps = if (hi as f64) <= SALIENCY_EPS {
        Tensor4::zeros(shape)
    } else if ((hi - lo) as f64) <= SALIENCY_EPS {
        Tensor4::filled(shape, 1.0)
    } else {
        grad.map(|v| (v - lo) / (hi - lo))
    };
    let channel_scores = (0..shape.c)
        .map(|c| maps.plane(0, c).iter().map(|&v| v as f64).sum::<f64>() / shape.plane() as f64)
        .collect();
    Ok(SaliencyResult {
        d_value,
        maps,
        channel_scores,
    })
}

/// Features with some channels zeroed and the rest rescaled to the original sum.
#[derive(Debug, Clone)]
pub struct AblatedFeatures {
    pub features: Tensor4<f32>,
    /// `Sum(F) / Sum(F')`, or 1 when the guard triggered.
    pub rescale: f64,
    /// True when `Sum(F')` was too close to zero to rescale.
    pub guarded: bool,
}

/// Zero `channels` in every sample and rescale by `Sum(F) / Sum(F')`.
pub fn ablate_features(features: &Tensor4<f32>, channels: &[usize]) -> Result<AblatedFeatures> {
    let s = features.shape();
    if let Some(&c) = channels.iter().find(|&&c| c >= s.c) {
        return Err(Error::invalid(
            "ablate",
            format!("channel {c} out of range for {} channels", s.c),
        ));
    }
    let total = features.sum_f64();
    let mut out = features.clone();
    for n in 0..s.n {
        for &c in channels {
            out.plane_mut(n, c).fill(0.0);
        }
    }
    let ablated = out.sum_f64();
    let eps = ABLATION_EPS * features.numel() as f64;
    if ablated.abs() <= eps {
        return Ok(AblatedFeatures {
            features: out,
            rescale: 1.0,
            guarded: true,
        });
    }
    let rescale = total / ablated;
    let factor = rescale as f32;
    out.data_mut().iter_mut().for_each(|v| *v *= factor);
    Ok(AblatedFeatures {
        features: out,
        rescale,
        guarded: false,
    })
}

fn reconstruct_value<N: TapNetwork + ?Sized>(net: &N, features: Tensor4<f32>, lr: &ImageTensor) -> Result<ImageTensor> {
    let mut g = Graph::new();
    let tap = g.input(features);
    let out = net.reconstruct(&mut g, tap, lr)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAblation {
    pub channel: usize,
    pub rescale: f64,
    pub psnr_after: f64,
    pub delta: f64,
    pub guarded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequentialPoint {
    /// Number of channels zeroed.
    pub k: usize,
    /// The channel added at this step.
    pub channel: usize,
    pub psnr: f64,
    pub rescale: f64,
    pub guarded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub baseline_psnr: f64,
    pub per_channel: Vec<ChannelAblation>,
    /// `k = 1..=C`.
    pub sequential: Vec<SequentialPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationOrder {
    ByIndex,
    BySaliencyDesc,
}

impl FromStr for AblationOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_index" | "index" => Ok(AblationOrder::ByIndex),
            "by_saliency_desc" | "saliency" => Ok(AblationOrder::BySaliencyDesc),
            other => Err(Error::Config(format!(
                "unknown ablation order '{other}' (expected by_index or by_saliency_desc)"
            ))),
        }
    }
}

/// Input, tap features and baseline PSNR for one `(lr, hr)` pair.
struct Prepared<'a> {
    lr: &'a ImageTensor,
    features: Tensor4<f32>,
    baseline: f64,
}

fn prepare<'a, N: TapNetwork + ?Sized>(net: &N, lr: &'a ImageTensor, hr: &ImageTensor) -> Result<Prepared<'a>> {
    single_image(lr, "ablation")?;
    let features = net.features(lr)?;
    let sr = reconstruct_value(net, features.clone(), lr)?;
    let baseline = psnr(&sr, hr)?;
    Ok(Prepared { lr, features, baseline })
}

fn ablated_psnr<N: TapNetwork + ?Sized>(
    net: &N,
    prep: &Prepared,
    channels: &[usize],
    hr: &ImageTensor,
) -> Result<(f64, AblatedFeatures)> {
    let ab = ablate_features(&prep.features, channels)?;
    let sr = reconstruct_value(net, ab.features.clone(), prep.lr)?;
    Ok((psnr(&sr, hr)?, ab))
}

/// Zero one channel, renormalize the layer's energy, finish the forward and
/// score against `hr`.
pub fn ablate_channel<N: TapNetwork + ?Sized>(
    net: &N,
    lr: &ImageTensor,
    hr: &ImageTensor,
    channel: usize,
) -> Result<ChannelAblation> {
    let prep = prepare(net, lr, hr)?;
    single_ablation(net, &prep, hr, channel)
}

fn single_ablation<N: TapNetwork + ?Sized>(
    net: &N,
    prep: &Prepared,
    hr: &ImageTensor,
    channel: usize,
) -> Result<ChannelAblation> {
    let (psnr_after, ab) = ablated_psnr(net, prep, &[channel], hr)?;
    Ok(ChannelAblation {
        channel,
        rescale: ab.rescale,
        psnr_after,
        delta: psnr_after - prep.baseline,
        guarded: ab.guarded,
    })
}

fn channel_order<N: TapNetwork + ?Sized>(net: &N, lr: &ImageTensor, c: usize, order: AblationOrder) -> Result<Vec<usize>> {
    Ok(match order {
        AblationOrder::ByIndex => (0..c).collect(),
        AblationOrder::BySaliencyDesc => {
            let scores = channel_saliency(net, lr)?.channel_scores;
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            idx
        }
    })
}

fn sequential_from<N: TapNetwork + ?Sized>(
    net: &N,
    prep: &Prepared,
    lr: &ImageTensor,
    hr: &ImageTensor,
    order: AblationOrder,
) -> Result<Vec<SequentialPoint>> {
    let c = prep.features.shape().c;
    let order = channel_order(net, lr, c, order)?;
    (1..=c)
        .map(|k| {
            let (psnr, ab) = ablated_psnr(net, prep, &order[..k], hr)?;
            Ok(SequentialPoint {
                k,
                channel: order[k - 1],
                psnr,
                rescale: ab.rescale,
                guarded: ab.guarded,
            })
        })
        .collect()
}

/// Cumulatively zero the first `k` channels of `order` for `k = 1..=C`.
pub fn sequential_ablation<N: TapNetwork + ?Sized>(
    net: &N,
    lr: &ImageTensor,
    hr: &ImageTensor,
    order: AblationOrder,
) -> Result<Vec<SequentialPoint>> {
    let prep = prepare(net, lr, hr)?;
    sequential_from(net, &prep, lr, hr, order)
}

/// Single-channel and sequential ablation of one image.
pub fn channel_ablation<N: TapNetwork + ?Sized>(
    net: &N,
    lr: &ImageTensor,
    hr: &ImageTensor,
    order: AblationOrder,
) -> Result<AblationResult> {
    let prep = prepare(net, lr, hr)?;
    let c = prep.features.shape().c;
    let per_channel = (0..c)
        .map(|ch| single_ablation(net, &prep, hr, ch))
        .collect::<Result<Vec<_>>>()?;
    let sequential = sequential_from(net, &prep, lr, hr, order)?;
    Ok(AblationResult {
        baseline_psnr: prep.baseline,
        per_channel,
        sequential,
    })
}

/// Mean sequential curve over several `(lr, hr)` pairs. Entry `k` (0-based)
/// holds the mean PSNR with `k` channels removed, so entry 0 is the
/// unablated baseline and the vector has `C + 1` entries.
pub fn mean_sequential_curve<N: TapNetwork + Sync + ?Sized>(
    net: &N,
    pairs: &[(ImageTensor, ImageTensor)],
    order: AblationOrder,
) -> Result<Vec<f64>> {
    let curves = pairs
        .par_iter()
        .map(|(lr, hr)| {
            let prep = prepare(net, lr, hr)?;
            let seq = sequential_from(net, &prep, lr, hr, order)?;
            let mut curve = vec![prep.baseline];
            curve.extend(seq.iter().map(|p| p.psnr));
            Ok(curve)
        })
        .collect::<Result<Vec<_>>>()?;
    let len = curves.first().map_or(0, Vec::len);
    Ok((0..len)
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64)
        .collect())
}

/// Pooled features of `images x kinds` degraded inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DdrFeatures {
    /// One `C`-vector per sample: the spatial mean of each tap channel.
    pub features: Vec<Vec<f64>>,
    /// Index into `kinds` for each sample.
    pub labels: Vec<usize>,
    pub image_index: Vec<usize>,
    pub kinds: Vec<TestKind>,
}

/// For each `(image, kind)`: degrade with the test pipeline (noise stream
/// keyed by `eval_seed` and the image index), run eval-mode to the tap, and
/// average every channel spatially.
pub fn ddr_features<N: TapNetwork + Sync + ?Sized>(
    net: &N,
    images: &[ImageTensor],
    kinds: &[TestKind],
    eval_seed: u64,
) -> Result<DdrFeatures> {
    if kinds.len() < 2 {
        return Err(Error::invalid("ddr", "need ≥ 2 degradation kinds"));
    }
    if images.len() < 2 {
        return Err(Error::invalid("ddr", "need >= 2 images per kind"));
    }
    let s = net.sr_scale();
    let jobs: Vec<(usize, usize)> = (0..kinds.len())
        .flat_map(|k| (0..images.len()).map(move |i| (k, i)))
        .collect();
    let features = jobs
        .par_iter()
        .map(|&(k, i)| {
            let (lr, _) = degrade_for_test(&images[i], kinds[k], s, image_seed(eval_seed, i))?;
            let tap = net.features(&lr)?;
            Ok(spatial_means(&tap))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DdrFeatures {
        features,
        labels: jobs.iter().map(|&(k, _)| k).collect(),
        image_index: jobs.iter().map(|&(_, i)| i).collect(),
        kinds: kinds.to_vec(),
    })
}

fn spatial_means(t: &Tensor4<f32>) -> Vec<f64> {
    let s = t.shape();
    (0..s.c)
        .map(|c| {
            let total: f64 = (0..s.n).flat_map(|n| t.plane(n, c)).map(|&v| v as f64).sum();
            total / (s.n * s.plane()) as f64
        })
        .collect()
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let d = features.first().map_or(0, Vec::len);
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::ShapeMismatch {
            op: "features",
            dim: "feature length",
            expected: d,
            found: bad.len(),
        });
    }
    Ok(d)
}

/// Calinski-Harabasz index `(SSB / (k - 1)) / (SSW / (n - k))`. Labels must
/// cover `0..k` with no gaps. `SSW = 0` (with `SSB > 0`) gives infinity.
pub fn chi(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    const OP: &str = "chi";
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: OP,
            dim: "label count",
            expected: features.len(),
            found: labels.len(),
        });
    }
    let d = check_features(features)?;
    let n = features.len();
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    if k < 2 {
        return Err(Error::invalid(OP, format!("need >= 2 clusters, got {k}")));
    }
    if n <= k {
        return Err(Error::invalid(OP, format!("need more samples ({n}) than clusters ({k})")));
    }
    let mut counts = vec![0usize; k];
    let mut centroids = vec![vec![0.0; d]; k];
    let mut mean = vec![0.0; d];
    for (x, &l) in features.iter().zip(labels) {
        counts[l] += 1;
        for j in 0..d {
            centroids[l][j] += x[j];
            mean[j] += x[j];
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(OP, format!("cluster {empty} is empty")));
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= cnt as f64);
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let ssb: f64 = centroids
        .iter()
        .zip(&counts)
        .map(|(c, &cnt)| cnt as f64 * c.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let ssw: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &l)| x.iter().zip(&centroids[l]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    if ssw == 0.0 {
        return Ok(if ssb == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((ssb / (k - 1) as f64) / (ssw / (n - k) as f64))
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 1000;

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn top_eigenvector(cov: &[Vec<f64>]) -> Option<Vec<f64>> {
    let d = cov.len();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 / (i + 1) as f64).collect();
    normalize(&mut v);
    for _ in 0..PCA_MAX_ITERS {
        let mut next: Vec<f64> = cov.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        if normalize(&mut next) <= f64::MIN_POSITIVE {
            return None;
        }
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if diff < PCA_TOL {
            break;
        }
    }
    Some(v)
}

/// Projection onto the top two principal directions (power iteration with
/// deflation). Each direction's first non-negligible loading is positive.
pub fn project_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 3 {
        return Err(Error::invalid("project_2d", format!("need >= 3 points, got {n}")));
    }
    let d = check_features(features)?;
    let mut mean = vec![0.0; d];
    for x in features {
        for j in 0..d {
            mean[j] += x[j] / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for x in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += x[i] * x[j] / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let scale = cov.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if trace <= 0.0 || scale == 0.0 {
        return Ok(vec![[0.0, 0.0]; n]);
    }
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let dir = match top_eigenvector(&cov) {
            Some(mut v) => {
                let lambda: f64 = (0..d)
                    .map(|i| v[i] * (0..d).map(|j| cov[i][j] * v[j]).sum::<f64>())
                    .sum();
                if lambda <= scale * 1e-15 {
                    vec![0.0; d]
                } else {
                    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
                        if *first < 0.0 {
                            v.iter_mut().for_each(|x| *x = -*x);
                        }
                    }
                    for i in 0..d {
                        for j in 0..d {
                            cov[i][j] -= lambda * v[i] * v[j];
                        }
                    }
                    v
                }
            }
            None => vec![0.0; d],
        };
        dirs.push(dir);
    }
    Ok(centered
        .iter()
        .map(|x| {
            let p = |dir: &[f64]| x.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>();
            [p(&dirs[0]), p(&dirs[1])]
        })
        .collect())
}

/// Features, labels, CHI in feature space, and the 2-D projection.
#[derive(Debug, Clone)]
pub struct DdrResult {
    pub features: DdrFeatures,
    pub chi: f64,
    pub projection: Vec<[f64; 2]>,
}

pub fn ddr_analysis<N: TapNetwork + Sync + ?Sized>(
    net: &N,
    images: &[ImageTensor],
    kinds: &[TestKind],
    eval_seed: u64,
) -> Result<DdrResult> {
    let features = ddr_features(net, images, kinds, eval_seed)?;
    let chi = chi(&features.features, &features.labels)?;
    let projection = project_2d(&features.features)?;
    Ok(DdrResult {
        features,
        chi,
        projection,
    })
}

/// Binary PGM (P5) of a `[0, 1]` map.
pub fn to_pgm(map: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
