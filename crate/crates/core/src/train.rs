//! Patch sampling with on-the-fly degradation, the L1 + Adam training loop,
//! and the binary checkpoint format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::degrade::{resize_to, sample_train_pipeline, DegradationPipeline, ResizeMode, TestKind};
use crate::error::{Error, Result};
use crate::evaluate::{degrade_for_test, image_seed, psnr};
use crate::model::{ModelConfig, SrNetwork};
use crate::nn::{adam_step, cosine_lr, AdamState, Mode};
use crate::rng::derive_stream;
use crate::tensor::{Shape4, Tensor4};
use crate::ImageTensor;

/// Mixed into the seed for the per-iteration dropout streams.
const DROPOUT_SALT: u64 = 0xD50F_0A11_7E57_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradationMode {
    /// Bicubic downsampling only.
    Single,
    /// Randomly sampled two-stage pipelines.
    Multi,
}

impl DegradationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DegradationMode::Single => "single",
            DegradationMode::Multi => "multi",
        }
    }
}

impl FromStr for DegradationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_degradation" => Ok(DegradationMode::Single),
            "multi" | "multi_degradation" => Ok(DegradationMode::Multi),
            other => Err(Error::Config(format!(
                "unknown degradation mode '{other}' (expected single or multi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr_patch: usize,
    pub iters: u64,
    pub lr0: f64,
    pub seed: u64,
    pub mode: DegradationMode,
    /// Validate every this many iterations (0: only after the last one).
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            lr_patch: 32,
            iters: 10_000,
            lr0: 2e-4,
            seed: 0,
            mode: DegradationMode::Multi,
            val_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.lr_patch == 0 {
            return Err(Error::Config("batch and lr_patch must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Aligned `(lr, hr)` patches for one iteration.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    /// The sampled pipeline of each sample (multi mode only).
    pub pipelines: Vec<Option<DegradationPipeline>>,
}

/// Per sample `i`, draws from `derive_stream(seed, iter * batch + i)`: an
/// image, a `(lr_patch * s)^2` crop, and (multi mode) a degradation pipeline.
pub fn sample_batch(corpus: &[ImageTensor], cfg: &TrainConfig, s: usize, iter: u64) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(Error::invalid("sample_batch", "empty corpus"));
    }
    let hp = cfg.lr_patch * s;
    for (i, img) in corpus.iter().enumerate() {
        let sh = img.shape();
        if sh.n != 1 || sh.c != 3 {
            return Err(Error::invalid("sample_batch", format!("corpus image {i} is not a single RGB image")));
        }
        if sh.h < hp || sh.w < hp {
            return Err(Error::invalid(
                "sample_batch",
                format!("corpus image {i} is {}x{}, smaller than the {hp}x{hp} patch", sh.h, sh.w),
            ));
        }
    }
    let samples = (0..cfg.batch)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_stream(cfg.seed, iter * cfg.batch as u64 + i as u64);
            let img = &corpus[rng.below(corpus.len() as u64) as usize];
            let sh = img.shape();
            let top = rng.below((sh.h - hp + 1) as u64) as usize;
            let left = rng.below((sh.w - hp + 1) as u64) as usize;
            let hr = img.crop(top, left, hp, hp)?;
            match cfg.mode {
                DegradationMode::Single => {
                    let lr = resize_to(&hr, cfg.lr_patch, cfg.lr_patch, ResizeMode::Bicubic)?;
                    Ok((lr, hr, None))
                }
                DegradationMode::Multi => {
                    let pipe = sample_train_pipeline(s, &mut rng)?;
                    let lr = pipe.apply(&hr)?;
                    Ok((lr, hr, Some(pipe)))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut lrs = Vec::with_capacity(cfg.batch);
    let mut hrs = Vec::with_capacity(cfg.batch);
    let mut pipelines = Vec::with_capacity(cfg.batch);
    for (lr, hr, p) in samples {
        lrs.push(lr);
        hrs.push(hr);
        pipelines.push(p);
    }
    Ok(Batch {
        lr: Tensor4::stack(&lrs)?,
        hr: Tensor4::stack(&hrs)?,
        pipelines,
    })
}

/// Fixed `(lr, hr)` pairs scored in eval mode during training.
#[derive(Debug, Clone, Default)]
pub struct ValidationSet {
    pub pairs: Vec<(ImageTensor, ImageTensor)>,
}

impl ValidationSet {
    /// Every image under every kind, noise streams keyed by `eval_seed`.
    pub fn from_images(images: &[ImageTensor], kinds: &[TestKind], s: usize, eval_seed: u64) -> Result<Self> {
        let mut pairs = Vec::with_capacity(images.len() * kinds.len());
        for &kind in kinds {
            for (i, img) in images.iter().enumerate() {
                pairs.push(degrade_for_test(img, kind, s, image_seed(eval_seed, i))?);
            }
        }
        Ok(ValidationSet { pairs })
    }

    /// Mean PSNR of the eval-mode outputs.
    pub fn mean_psnr(&self, net: &SrNetwork) -> Result<f64> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("validation", "empty validation set"));
        }
        let vals = self
            .pairs
            .par_iter()
            .map(|(lr, hr)| psnr(&net.infer(lr)?, hr))
            .collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// Zero-based iteration index of the step.
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iter,lr,loss,val_psnr\n");
    for r in rows {
        let val = r.val_psnr.map(crate::evaluate::format_psnr).unwrap_or_default();
        let _ = writeln!(out, "{},{:e},{:.9},{}", r.iter, r.lr, r.loss, val);
    }
    out
}

/// Network, optimizer state and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: SrNetwork,
    pub adam: AdamState<f32>,
    pub iteration: u64,
    pub cfg: TrainConfig,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(net: SrNetwork, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(net.params());
        Ok(Trainer {
            net,
            adam,
            iteration: 0,
            cfg,
            log: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            net: ckpt.net,
            adam: ckpt.adam,
            iteration: ckpt.iteration,
            cfg,
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
        }
    }

    /// One forward, L1, backward and Adam update. Returns the loss.
    pub fn step(&mut self, corpus: &[ImageTensor]) -> Result<f64> {
        let iter = self.iteration;
        let s = self.net.config().sr_scale;
        let batch = sample_batch(corpus, &self.cfg, s, iter)?;
        let mut rng = derive_stream(self.cfg.seed ^ DROPOUT_SALT, iter);
        let mut fwd = self.net.forward(&batch.lr, Mode::Train, &mut rng, true)?;
        let loss_node = fwd.graph.l1_loss(fwd.output, &batch.hr)?;
        let loss = fwd.graph.value(loss_node).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter });
        }
        fwd.graph.backward(loss_node)?;
        let grads: Vec<Tensor4<f32>> = fwd
            .params
            .iter()
            .zip(self.net.params())
            .map(|(&id, p)| fwd.graph.grad(id).cloned().unwrap_or_else(|| Tensor4::zeros(p.shape())))
            .collect();
        let lr = cosine_lr(iter, self.cfg.iters, self.cfg.lr0);
        adam_step(self.net.params_mut(), &grads, &mut self.adam, lr)?;
        self.iteration += 1;
        self.log.push(LogRow {
            iter,
            lr,
            loss,
            val_psnr: None,
        });
        Ok(loss)
    }

    fn due_for_validation(&self) -> bool {
        let done = self.iteration;
        done == self.cfg.iters || (self.cfg.val_every > 0 && done % self.cfg.val_every == 0)
    }

    /// Steps until `target` iterations have completed (capped at `cfg.iters`).
    pub fn run_until(&mut self, corpus: &[ImageTensor], val: Option<&ValidationSet>, target: u64) -> Result<()> {
        let target = target.min(self.cfg.iters);
        while self.iteration < target {
            self.step(corpus)?;
            if let Some(val) = val {
                if self.due_for_validation() {
                    let v = val.mean_psnr(&self.net)?;
                    if let Some(row) = self.log.last_mut() {
                        row.val_psnr = Some(v);
                    }
                }
            }
        }
        Ok(())
    }

    /// Most recent validation PSNR in the log.
    pub fn last_val_psnr(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.val_psnr)
    }
}

/// Runs the full schedule of `cfg` from scratch.
pub fn train_loop(
    net: SrNetwork,
    corpus: &[ImageTensor],
    cfg: &TrainConfig,
    val: Option<&ValidationSet>,
) -> Result<Trainer> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    trainer.run_until(corpus, val, cfg.iters)?;
    Ok(trainer)
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SRDK1";

/// Network weights, Adam moments and iteration count.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: SrNetwork,
    pub adam: AdamState<f32>,
    pub iteration: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_values(out: &mut Vec<u8>, t: &Tensor4<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn values(&mut self, shape: Shape4, what: &str) -> Result<Tensor4<f32>> {
        let raw = self.take(shape.numel() * 4, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor4::from_vec(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let cfg = self.net.config().to_text();
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_u32(&mut out, self.net.params().len())?;
        for (name, t) in self.net.param_names().iter().zip(self.net.params()) {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().dims() {
                put_u32(&mut out, d)?;
            }
            put_values(&mut out, t);
        }
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        for v in [self.adam.beta1, self.adam.beta2, self.adam.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_values(&mut out, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?} (expected \"SRDK1\")",
                String::from_utf8_lossy(magic)
            )));
        }
        let cfg_len = r.u32("config length")?;
        let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let cfg = ModelConfig::from_text(cfg_text)?;
        let iteration = r.u64("iteration")?;
        let count = r.u32("tensor count")?;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32("tensor name length")?;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("tensor shape")?;
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
            let t = r.values(shape, &name)?;
            named.push((name, t));
        }
        let net = SrNetwork::from_params(cfg, named)?;
        let t = r.u64("adam step")?;
        let beta1 = r.f64("adam beta1")?;
        let beta2 = r.f64("adam beta2")?;
        let eps = r.f64("adam eps")?;
        let mut adam = AdamState::with_betas(net.params(), beta1, beta2, eps);
        adam.t = t;
        for (i, p) in net.params().iter().enumerate() {
            adam.m[i] = r.values(p.shape(), "adam m")?;
        }
        for (i, p) in net.params().iter().enumerate() {
            adam.v[i] = r.values(p.shape(), "adam v")?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { net, adam, iteration })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::resize_to;
    use crate::model::build_model;
    use crate::rng::seed_rng;
    use crate::synth::synthetic_corpus;

    fn toy_cfg(mode: DegradationMode, iters: u64) -> TrainConfig {
        TrainConfig {
            batch: 2,
            lr_patch: 8,
            iters,
            lr0: 2e-4,
            seed: 11,
            mode,
            val_every: 0,
        }
    }

    fn tiny_net() -> SrNetwork {
        let cfg = ModelConfig {
            n_blocks: 1,
            n_feats: 8,
            ..ModelConfig::default()
        };
        build_model(cfg, &mut seed_rng(3)).unwrap()
    }

    #[test]
    fn batches_are_deterministic_and_aligned() {
        let corpus = synthetic_corpus(1, 3, 40, 40);
        let cfg = toy_cfg(DegradationMode::Multi, 10);
        let a = sample_batch(&corpus, &cfg, 2, 4).unwrap();
        let b = sample_batch(&corpus, &cfg, 2, 4).unwrap();
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.hr.shape(), Shape4::new(2, 3, 16, 16));
        assert_eq!(a.lr.shape(), Shape4::new(2, 3, 8, 8));
        assert_ne!(sample_batch(&corpus, &cfg, 2, 5).unwrap().lr, a.lr);
    }

    #[test]
    fn single_mode_is_plain_bicubic() {
        let corpus = synthetic_corpus(2, 2, 32, 32);
        let b = sample_batch(&corpus, &toy_cfg(DegradationMode::Single, 1), 2, 0).unwrap();
        for i in 0..2 {
            let want = resize_to(&b.hr.sample(i), 8, 8, ResizeMode::Bicubic).unwrap();
            assert_eq!(b.lr.sample(i), want);
        }
        assert!(b.pipelines.iter().all(Option::is_none));
    }

    #[test]
    fn small_corpus_rejected() {
        let corpus = synthetic_corpus(2, 1, 12, 40);
        assert!(sample_batch(&corpus, &toy_cfg(DegradationMode::Single, 1), 2, 0).is_err());
        assert!(sample_batch(&[], &toy_cfg(DegradationMode::Single, 1), 2, 0).is_err());
    }

    #[test]
    fn lr_trace_follows_cosine() {
        let corpus = synthetic_corpus(4, 2, 24, 24);
        let cfg = toy_cfg(DegradationMode::Single, 6);
        let t = train_loop(tiny_net(), &corpus, &cfg, None).unwrap();
        assert_eq!(t.log.len(), 6);
        for row in &t.log {
            assert_eq!(row.lr, cosine_lr(row.iter, 6, 2e-4));
        }
        assert_eq!(t.log[0].lr, 2e-4);
    }

    #[test]
    fn validation_rows() {
        let corpus = synthetic_corpus(4, 2, 24, 24);
        let val = ValidationSet::from_images(&corpus, &[TestKind::Clean], 2, 0).unwrap();
        let mut cfg = toy_cfg(DegradationMode::Single, 5);
        cfg.val_every = 2;
        let t = train_loop(tiny_net(), &corpus, &cfg, Some(&val)).unwrap();
        let with_val: Vec<u64> = t.log.iter().filter(|r| r.val_psnr.is_some()).map(|r| r.iter).collect();
        assert_eq!(with_val, vec![1, 3, 4]);
        let csv = log_csv(&t.log);
        assert!(csv.starts_with("iter,lr,loss,val_psnr\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let corpus = synthetic_corpus(4, 2, 24, 24);
        let t = train_loop(tiny_net(), &corpus, &toy_cfg(DegradationMode::Multi, 3), None).unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, t.checkpoint());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let bytes = Checkpoint {
            net: tiny_net(),
            adam: AdamState::new(tiny_net().params()),
            iteration: 0,
        }
        .to_bytes()
        .unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(m)) if m.contains("truncated")
        ));
    }
}
