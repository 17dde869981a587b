//! Shared oracles for the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod degrade_checks;
pub mod stubs;

use dropsr::nn::{DropoutDim, DropoutSpec, Graph, Mode, NodeId};
use dropsr::rng::{seed_rng, RngState};
use dropsr::tensor::{Shape4, Tensor4};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Leaves plus a closure building a scalar from them. The closure must be
/// deterministic so it can be replayed for finite differences.
pub struct GradCase {
    pub name: &'static str,
    pub leaves: Vec<Tensor4<f64>>,
    pub build: Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId>,
}

fn eval(case: &GradCase, leaves: &[Tensor4<f64>]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &ids);
    g.value(out).data()[0]
}

/// Largest relative error between the tape gradient and central differences.
/// The denominator is floored at `1e-6 * max(1, |f|)`, the scale below which
/// central differences are dominated by rounding in `f`.
pub fn max_rel_error(case: &GradCase) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case.leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &ids);
    g.backward(out).unwrap();
    let floor = 1e-6 * g.value(out).data()[0].abs().max(1.0);
    let analytic: Vec<Tensor4<f64>> = ids
        .iter()
        .zip(&case.leaves)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor4::zeros(t.shape())))
        .collect();
    let mut worst = 0.0f64;
    let mut leaves = case.leaves.clone();
    for li in 0..leaves.len() {
        for e in 0..leaves[li].numel() {
            let orig = leaves[li].data()[e];
            leaves[li].data_mut()[e] = orig + FD_STEP;
            let plus = eval(case, &leaves);
            leaves[li].data_mut()[e] = orig - FD_STEP;
            let minus = eval(case, &leaves);
            leaves[li].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[li].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn gaussian(shape: Shape4, rng: &mut RngState) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.next_gaussian())
}

/// Gaussian entries pushed at least `margin` away from zero.
fn away_from_zero(shape: Shape4, rng: &mut RngState, margin: f64) -> Tensor4<f64> {
    gaussian(shape, rng).map(|v| if v.abs() < margin { margin.copysign(v) } else { v })
}

/// A random image whose forward differences all exceed `margin` in size.
fn ragged(shape: Shape4, rng: &mut RngState, margin: f64) -> Tensor4<f64> {
    loop {
        let t = gaussian(shape, rng);
        let ok = (0..shape.n).all(|n| {
            (0..shape.c).all(|c| {
                let p = t.plane(n, c);
                (0..shape.h).all(|h| {
                    (0..shape.w).all(|w| {
                        let v = p[h * shape.w + w];
                        (w + 1 == shape.w || (p[h * shape.w + w + 1] - v).abs() > margin)
                            && (h + 1 == shape.h || (p[(h + 1) * shape.w + w] - v).abs() > margin)
                    })
                })
            })
        });
        if ok {
            return t;
        }
    }
}

/// One case per differentiable op, plus a composite chain, drawn from `seed`.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = seed_rng(seed);
    let mut cases = Vec::new();
    let x = Shape4::new(2, 3, 5, 5);

    for (stride, padding) in [(1, 1), (2, 0)] {
        let ws = gaussian(Shape4::new(2, 4, 5, 5), &mut rng);
        let name = if stride == 1 { "conv2d" } else { "conv2d_stride2" };
        cases.push(GradCase {
            name,
            leaves: vec![
                gaussian(x, &mut rng),
                gaussian(Shape4::new(4, 3, 3, 3), &mut rng).map(|v| v * 0.3),
                gaussian(Shape4::new(1, 4, 1, 1), &mut rng),
            ],
            build: Box::new(move |g, l| {
                let y = g.conv2d(l[0], l[1], l[2], stride, padding).unwrap();
                let ws = if stride == 1 { ws.clone() } else { ws.crop(0, 0, 2, 2).unwrap() };
                g.weighted_sum(y, &ws).unwrap()
            }),
        });
    }

    let ws = gaussian(x, &mut rng);
    cases.push(GradCase {
        name: "leaky_relu",
        leaves: vec![away_from_zero(x, &mut rng, 1e-3)],
        build: Box::new(move |g, l| {
            let y = g.leaky_relu(l[0], 0.2);
            g.weighted_sum(y, &ws).unwrap()
        }),
    });

    let ws = gaussian(Shape4::new(1, 2, 6, 6), &mut rng);
    cases.push(GradCase {
        name: "pixel_shuffle",
        leaves: vec![gaussian(Shape4::new(1, 8, 3, 3), &mut rng)],
        build: Box::new(move |g, l| {
            let y = g.pixel_shuffle(l[0], 2).unwrap();
            g.weighted_sum(y, &ws).unwrap()
        }),
    });

    for (name, dim) in [("dropout_element", DropoutDim::Element), ("dropout_channel", DropoutDim::Channel)] {
        let ws = gaussian(x, &mut rng);
        let mask_seed = rng.next_u64();
        cases.push(GradCase {
            name,
            leaves: vec![gaussian(x, &mut rng)],
            build: Box::new(move |g, l| {
                let spec = DropoutSpec::new(dim, 0.4).unwrap();
                let y = g.dropout(l[0], spec, Mode::Train, &mut seed_rng(mask_seed));
                g.weighted_sum(y, &ws).unwrap()
            }),
        });
    }

    let ws = gaussian(x, &mut rng);
    cases.push(GradCase {
        name: "add",
        leaves: vec![gaussian(x, &mut rng), gaussian(x, &mut rng)],
        build: Box::new(move |g, l| {
            let y = g.add(l[0], l[1]).unwrap();
            let y = g.add(y, l[0]).unwrap();
            g.weighted_sum(y, &ws).unwrap()
        }),
    });

    let target = gaussian(x, &mut rng);
    let offset = away_from_zero(x, &mut rng, 1e-3);
    let pred = Tensor4::from_fn(x, |n, c, h, w| target.get(n, c, h, w) + offset.get(n, c, h, w));
    cases.push(GradCase {
        name: "l1_loss",
        leaves: vec![pred],
        build: Box::new(move |g, l| g.l1_loss(l[0], &target).unwrap()),
    });

    cases.push(GradCase {
        name: "gradient_l1",
        leaves: vec![ragged(Shape4::new(1, 2, 4, 4), &mut rng, 1e-3)],
        build: Box::new(|g, l| g.gradient_l1(l[0])),
    });

    let ws = gaussian(x, &mut rng);
    cases.push(GradCase {
        name: "weighted_sum",
        leaves: vec![gaussian(x, &mut rng)],
        build: Box::new(move |g, l| g.weighted_sum(l[0], &ws).unwrap()),
    });

    let ws = gaussian(Shape4::new(1, 1, 8, 8), &mut rng);
    let mask_seed = rng.next_u64();
    cases.push(GradCase {
        name: "composite",
        leaves: vec![
            gaussian(Shape4::new(1, 2, 4, 4), &mut rng),
            gaussian(Shape4::new(4, 2, 3, 3), &mut rng).map(|v| v * 0.4),
            gaussian(Shape4::new(1, 4, 1, 1), &mut rng).map(|v| v * 0.1),
        ],
        build: Box::new(move |g, l| {
            let y = g.conv2d(l[0], l[1], l[2], 1, 1).unwrap();
            let y = g.leaky_relu(y, 0.2);
            let spec = DropoutSpec::channel(0.25).unwrap();
            let y = g.dropout(y, spec, Mode::Train, &mut seed_rng(mask_seed));
            let y = g.pixel_shuffle(y, 2).unwrap();
            g.weighted_sum(y, &ws).unwrap()
        }),
    });
    cases
}

/// Checks the per-entry mean of `trials` train-mode outputs against `x`
/// within `3 sd / sqrt(trials)`. Returns the worst `|dev| / bound`.
pub fn dropout_expectation(dim: DropoutDim, p: f64, trials: usize, seed: u64) -> f64 {
    let shape = Shape4::new(2, 4, 3, 3);
    let x = Tensor4::from_fn(shape, |n, c, h, w| 0.25 + (n + 2 * c + 3 * h + 5 * w) as f32 * 0.05);
    let spec = DropoutSpec::new(dim, p).unwrap();
    let mut rng = seed_rng(seed);
    let mut sum = vec![0.0f64; shape.numel()];
    for _ in 0..trials {
        let mut g = Graph::<f32>::new();
        let id = g.input(x.clone());
        let y = g.dropout(id, spec, Mode::Train, &mut rng);
        for (s, &v) in sum.iter_mut().zip(g.value(y).data()) {
            *s += v as f64;
        }
    }
    let sd_factor = (p / (1.0 - p)).sqrt();
    x.data()
        .iter()
        .zip(&sum)
        .map(|(&xv, &s)| {
            let mean = s / trials as f64;
            let bound = 3.0 * sd_factor * (xv as f64).abs() / (trials as f64).sqrt();
            (mean - xv as f64).abs() / bound
        })
        .fold(0.0, f64::max)
}

/// Eval mode and `p = 0` leave the input bitwise unchanged.
pub fn dropout_identity_holds(seed: u64) -> bool {
    let shape = Shape4::new(2, 3, 4, 4);
    let mut rng = seed_rng(seed);
    let x = Tensor4::from_fn(shape, |_, _, _, _| rng.next_gaussian() as f32);
    [DropoutDim::Element, DropoutDim::Channel].iter().all(|&dim| {
        [0.0, 0.1, 0.5, 0.9].iter().all(|&p| {
            let spec = DropoutSpec::new(dim, p).unwrap();
            let mut g = Graph::new();
            let id = g.input(x.clone());
            let mut r = seed_rng(seed);
            let eval = g.dropout(id, spec, Mode::Eval, &mut r);
            let eval_ok = g.value(eval).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            let zero_ok = p != 0.0 || {
                let t = g.dropout(id, spec, Mode::Train, &mut r);
                g.value(t) == &x
            };
            eval_ok && zero_ok
        })
    })
}

/// CHI from pairwise distances: `SS_set = sum_{i,j} |x_i - x_j|^2 / (2 n)`
/// gives SST and each SSW_c; `SSB = SST - SSW`.
pub fn chi_bruteforce(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let pair_ss = |idx: &[usize]| -> f64 {
        let mut s = 0.0;
        for &i in idx {
            for &j in idx {
                s += x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        s / (2.0 * idx.len() as f64)
    };
    let n = x.len();
    let k = labels.iter().max().unwrap() + 1;
    let all: Vec<usize> = (0..n).collect();
    let sst = pair_ss(&all);
    let ssw: f64 = (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            pair_ss(&idx)
        })
        .sum();
    ((sst - ssw) / (k - 1) as f64) / (ssw / (n - k) as f64)
}

/// Random instance with `n <= 50`, `d <= 8`, every class non-empty.
pub fn random_cluster_instance(rng: &mut RngState) -> (Vec<Vec<f64>>, Vec<usize>) {
    let k = 2 + rng.below(4) as usize;
    let n = k + 1 + rng.below((50 - k) as u64) as usize;
    let d = 1 + rng.below(8) as usize;
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.uniform(-3.0, 3.0)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.below(k as u64) as usize }).collect();
    let x = labels
        .iter()
        .map(|&l| centers[l].iter().map(|c| c + rng.next_gaussian()).collect())
        .collect();
    (x, labels)
}

/// Worst relative CHI disagreement over `count` random instances.
pub fn chi_oracle_worst(count: usize, seed: u64) -> f64 {
    let mut rng = seed_rng(seed);
    (0..count)
        .map(|_| {
            let (x, l) = random_cluster_instance(&mut rng);
            let got = dropsr::interpret::chi(&x, &l).unwrap();
            let want = chi_bruteforce(&x, &l);
            (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

pub mod training {
    use dropsr::model::{build_model, DropoutPosition, ModelConfig};
    use dropsr::nn::DropoutSpec;
    use dropsr::rng::seed_rng;
    use dropsr::synth::synthetic_corpus;
    use dropsr::train::{train_loop, Checkpoint, DegradationMode, TrainConfig, Trainer};
    use dropsr::ImageTensor;

    pub fn toy_corpus() -> Vec<ImageTensor> {
        synthetic_corpus(17, 4, 32, 32)
    }

    pub fn toy_config(iters: u64, mode: DegradationMode) -> TrainConfig {
        TrainConfig {
            batch: 4,
            lr_patch: 8,
            iters,
            lr0: 2e-4,
            seed: 99,
            mode,
            val_every: 0,
        }
    }

    /// A small network with last-conv dropout so the dropout streams are
    /// part of what resume must reproduce.
    pub fn toy_net() -> dropsr::model::SrNetwork {
        let cfg = ModelConfig {
            n_blocks: 2,
            n_feats: 8,
            ..ModelConfig::default()
        }
        .with_dropout(DropoutPosition::LastConv, DropoutSpec::channel(0.25).unwrap());
        build_model(cfg, &mut seed_rng(5)).unwrap()
    }

    /// Checkpoint bytes after 100 straight iterations and after 50 + save/load + 50.
    pub fn resume_pair() -> (Vec<u8>, Vec<u8>) {
        let corpus = toy_corpus();
        let cfg = toy_config(100, DegradationMode::Multi);
        let straight = train_loop(toy_net(), &corpus, &cfg, None).unwrap();
        let mut first = Trainer::new(toy_net(), cfg.clone()).unwrap();
        first.run_until(&corpus, None, 50).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap(), cfg).unwrap();
        resumed.run_until(&corpus, None, 100).unwrap();
        let mut log = first.log.clone();
        log.extend(resumed.log.iter().copied());
        assert_eq!(log, straight.log, "resumed loss log differs");
        (
            straight.checkpoint().to_bytes().unwrap(),
            resumed.checkpoint().to_bytes().unwrap(),
        )
    }
}
