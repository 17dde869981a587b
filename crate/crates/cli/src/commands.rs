use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;

use dropsr::degrade::{sample_train_pipeline, test_degradation, DegradationPipeline, TestKind};
use dropsr::evaluate::{degrade_for_test, evaluate_grid, format_psnr, image_seed, Dataset, EVAL_SEED};
use dropsr::interpret::{channel_ablation, channel_saliency, ddr_analysis, to_pgm, AblationOrder};
use dropsr::model::build_model;
use dropsr::rng::{derive_stream, seed_rng};
use dropsr::synth::synthetic_corpus;
use dropsr::train::{load_checkpoint, log_csv, save_checkpoint, Trainer, ValidationSet};
use dropsr::{Error, ImageTensor};

use crate::config::{parse_kinds, ConfigFile};
use crate::imageio::{list_pngs, read_dir_images, read_png, stem, write_png};

/// Exit 1 for usage and config problems, 2 for everything else.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn kinds_arg(list: &str) -> Result<Vec<TestKind>, Failure> {
    parse_kinds(list).map_err(|e| Failure::Usage(e.to_string()))
}

#[derive(Args)]
pub struct DegradeArgs {
    /// Directory of HR PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fixed test degradation (clean, b, n, j, b+n, b+j, n+j, b+n+j).
    #[arg(long, conflicts_with = "sample")]
    kind: Option<String>,
    /// Draw a randomized training pipeline per image instead.
    #[arg(long)]
    sample: bool,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional config supplying `degrade.*` defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn degrade(a: DegradeArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let scale = a.scale.or(cfg.degrade_scale()?).unwrap_or(4);
    let seed = a.seed.or(cfg.degrade_seed()?).unwrap_or(0);
    let kind = match &a.kind {
        Some(k) => Some(k.parse::<TestKind>().map_err(|e| Failure::Usage(e.to_string()))?),
        None if a.sample => None,
        None => Some(cfg.degrade_kind()?.ok_or_else(|| {
            Failure::Usage(format!(
                "give --kind <{}> or --sample",
                TestKind::valid_tokens()
            ))
        })?),
    };
    if scale == 0 {
        return Err(Failure::Usage("--scale must be positive".into()));
    }
    let paths = list_pngs(&a.input)?;
    create_dir(&a.out)?;
    let tag = kind.map_or("sample", |k| k.as_str());
    paths
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let hr = read_png(path)?.crop_to_multiple(scale)?;
            let pipe: DegradationPipeline = match kind {
                Some(k) => test_degradation(k, scale).with_seed(image_seed(seed, i)),
                None => sample_train_pipeline(scale, &mut derive_stream(seed, i as u64))?,
            };
            let lr = pipe.apply(&hr)?;
            let name = format!("{}_{tag}", stem(path));
            write_png(&a.out.join(format!("{name}.png")), &lr)?;
            fs::write(a.out.join(format!("{name}.txt")), pipe.to_manifest())?;
            Ok(())
        })
        .collect::<Result<Vec<()>, Error>>()?;
    println!("degraded {} images into {}", paths.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV (default: `<out>.log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = ConfigFile::load(&a.config)?;
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let corpus_dir = cfg.corpus()?;
    if !corpus_dir.is_dir() {
        return Err(Failure::Runtime(format!("corpus directory not found: {}", corpus_dir.display())));
    }
    let corpus: Vec<ImageTensor> = read_dir_images(&corpus_dir)?.into_iter().map(|(_, img)| img).collect();
    let val = match cfg.val_dir() {
        Some(dir) => {
            let images: Vec<ImageTensor> = read_dir_images(&dir)?.into_iter().map(|(_, img)| img).collect();
            Some(ValidationSet::from_images(&images, &cfg.val_kinds()?, model_cfg.sr_scale, cfg.eval_seed()?)?)
        }
        None => None,
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.net.config() != &model_cfg {
                return Err(Failure::Runtime(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(ckpt, train_cfg.clone())?
        }
        None => Trainer::new(build_model(model_cfg, &mut seed_rng(cfg.init_seed()?))?, train_cfg.clone())?,
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    let outcome = trainer.run_until(&corpus, val.as_ref(), train_cfg.iters);
    write_file(&log_path, log_csv(&trainer.log))?;
    outcome?;
    save_checkpoint(&trainer.checkpoint(), &a.out)?;
    let last = trainer.log.last();
    println!(
        "trained to iteration {}; last loss {}; validation psnr {}",
        trainer.iteration,
        last.map_or("n/a".into(), |r| format!("{:.6}", r.loss)),
        trainer.last_val_psnr().map_or("n/a".into(), format_psnr)
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated HR dataset directories.
    #[arg(long, value_delimiter = ',', required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long, default_value = "clean")]
    kinds: String,
    /// Directory for `per_image.csv` and `summary.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = EVAL_SEED)]
    seed: u64,
    /// Model label in the CSVs (default: checkpoint file stem).
    #[arg(long)]
    tag: Option<String>,
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let kinds = kinds_arg(&a.kinds)?;
    let net = load_checkpoint(&a.ckpt)?.net;
    let datasets = a
        .datasets
        .iter()
        .map(|d| {
            Ok(Dataset {
                name: dataset_name(d),
                images: read_dir_images(d)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let tag = a.tag.clone().unwrap_or_else(|| stem(&a.ckpt));
    let report = evaluate_grid(&net, &tag, &datasets, &kinds, a.seed)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("per_image.csv"), report.per_image_csv())?;
    let summary = report.summary_csv();
    write_file(&a.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AnalyzeMode {
    Csm,
    Ablate,
    Ddr,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum OrderArg {
    ByIndex,
    BySaliencyDesc,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    mode: AnalyzeMode,
    /// Directory of HR PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Degradation kinds; csm and ablate use the first one.
    #[arg(long, default_value = "clean")]
    kinds: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "by-index")]
    order: OrderArg,
    #[arg(long, default_value_t = EVAL_SEED)]
    seed: u64,
}

pub fn analyze(a: AnalyzeArgs) -> CmdResult {
    let kinds = kinds_arg(&a.kinds)?;
    if matches!(a.mode, AnalyzeMode::Ddr) && kinds.len() < 2 {
        return Err(Failure::Usage("need ≥ 2 degradation kinds".into()));
    }
    let net = load_checkpoint(&a.ckpt)?.net;
    let images = read_dir_images(&a.input)?;
    create_dir(&a.out)?;
    let s = net.config().sr_scale;
    let pairs = |kind: TestKind| -> Result<Vec<(ImageTensor, ImageTensor)>, Error> {
        images
            .iter()
            .enumerate()
            .map(|(i, (_, img))| degrade_for_test(img, kind, s, image_seed(a.seed, i)))
            .collect()
    };
    match a.mode {
        AnalyzeMode::Csm => {
            let pairs = pairs(kinds[0])?;
            let results = pairs
                .par_iter()
                .map(|(lr, _)| channel_saliency(&net, lr))
                .collect::<Result<Vec<_>, Error>>()?;
            let c = net.config().n_feats;
            let mut csv = String::from("channel,score\n");
            for ch in 0..c {
                let mean = results.iter().map(|r| r.channel_scores[ch]).sum::<f64>() / results.len() as f64;
                let _ = writeln!(csv, "{ch},{mean:.9}");
            }
            for ((name, _), r) in images.iter().zip(&results) {
                let sh = r.maps.shape();
                for ch in 0..c {
                    let pgm = to_pgm(r.maps.plane(0, ch), sh.h, sh.w);
                    write_file(&a.out.join(format!("{name}_ch{ch:03}.pgm")), pgm)?;
                }
            }
            write_file(&a.out.join("csm_scores.csv"), csv)?;
        }
        AnalyzeMode::Ablate => {
            let order = match a.order {
                OrderArg::ByIndex => AblationOrder::ByIndex,
                OrderArg::BySaliencyDesc => AblationOrder::BySaliencyDesc,
            };
            let pairs = pairs(kinds[0])?;
            let results = pairs
                .par_iter()
                .map(|(lr, hr)| channel_ablation(&net, lr, hr, order))
                .collect::<Result<Vec<_>, Error>>()?;
            let n = results.len() as f64;
            let c = net.config().n_feats;
            let baseline = results.iter().map(|r| r.baseline_psnr).sum::<f64>() / n;
            let mut seq = String::from("k,psnr_db,delta_db\n");
            let _ = writeln!(seq, "0,{baseline:.6},0.000000");
            for k in 1..=c {
                let mean = results.iter().map(|r| r.sequential[k - 1].psnr).sum::<f64>() / n;
                let _ = writeln!(seq, "{k},{mean:.6},{:.6}", mean - baseline);
            }
            let mut single = String::from("channel,rescale,psnr_db,delta_db\n");
            for ch in 0..c {
                let mean = |f: &dyn Fn(&dropsr::interpret::ChannelAblation) -> f64| {
                    results.iter().map(|r| f(&r.per_channel[ch])).sum::<f64>() / n
                };
                let _ = writeln!(
                    single,
                    "{ch},{:.9},{:.6},{:.6}",
                    mean(&|r| r.rescale),
                    mean(&|r| r.psnr_after),
                    mean(&|r| r.delta)
                );
            }
            write_file(&a.out.join("ablation_sequential.csv"), seq)?;
            write_file(&a.out.join("ablation_channels.csv"), single)?;
        }
        AnalyzeMode::Ddr => {
            let hr: Vec<ImageTensor> = images.iter().map(|(_, img)| img.clone()).collect();
            let res = ddr_analysis(&net, &hr, &kinds, a.seed)?;
            let mut csv = String::from("image,kind,x,y\n");
            for (i, p) in res.projection.iter().enumerate() {
                let name = &images[res.features.image_index[i]].0;
                let kind = kinds[res.features.labels[i]];
                let _ = writeln!(csv, "{name},{kind},{:.9},{:.9}", p[0], p[1]);
            }
            write_file(&a.out.join("ddr_projection.csv"), csv)?;
            println!("chi {} (feature space, {} samples, {} kinds)", format_psnr(res.chi), res.projection.len(), kinds.len());
        }
    }
    Ok(())
}

pub fn synth(out: &Path, count: usize, size: usize, seed: u64) -> CmdResult {
    if count == 0 || size < 8 {
        return Err(Failure::Usage("--count must be positive and --size at least 8".into()));
    }
    create_dir(out)?;
    for (i, img) in synthetic_corpus(seed, count, size, size).iter().enumerate() {
        write_png(&out.join(format!("img_{i:04}.png")), img)?;
    }
    println!("wrote {count} images to {}", out.display());
    Ok(())
}
