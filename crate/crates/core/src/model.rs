//! SRResNet-lite with configurable dropout placement.
//!
//! Layout: head conv, `n_blocks` residual blocks (conv, leaky-ReLU, conv,
//! skip), trunk-exit conv with a long skip from the head, one
//! conv + pixel-shuffle + leaky-ReLU stage per factor of two, and a final
//! conv to RGB added onto a bilinear upsampling of the input. The input of
//! that final conv is the feature tap used by every analysis in
//! [`crate::interpret`].

use std::fmt;
use std::str::FromStr;

use crate::degrade::{resize_to, ResizeMode};
use crate::error::{Error, Result};
use crate::nn::{DropoutDim, DropoutSpec, Graph, Mode, NodeId};
use crate::rng::RngState;
use crate::tensor::{Shape4, Tensor4};
use crate::ImageTensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_SCALE: f64 = 0.1;
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropoutPosition {
    None,
    /// Immediately before the final conv.
    LastConv,
    /// After residual block `n_blocks * f` (1-based), `f` in {0.25, 0.5, 0.75, 1}.
    AfterBlock(f64),
    /// The last `ceil(n_blocks * f)` blocks apply dropout after their skip
    /// addition, `f` in {0.25, 0.5, 1}.
    DroppedBlocks(f64),
}

impl fmt::Display for DropoutPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropoutPosition::None => f.write_str("none"),
            DropoutPosition::LastConv => f.write_str("last_conv"),
            DropoutPosition::AfterBlock(x) => write!(f, "after_block:{x}"),
            DropoutPosition::DroppedBlocks(x) => write!(f, "dropped_blocks:{x}"),
        }
    }
}

impl FromStr for DropoutPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown dropout position '{s}' (expected none, last_conv, after_block:<f>, dropped_blocks:<f>)"
            ))
        };
        match s.split_once(':') {
            None => match s {
                "none" => Ok(DropoutPosition::None),
                "last_conv" => Ok(DropoutPosition::LastConv),
                _ => Err(bad()),
            },
            Some((kind, frac)) => {
                let f: f64 = frac.parse().map_err(|_| bad())?;
                match kind {
                    "after_block" => Ok(DropoutPosition::AfterBlock(f)),
                    "dropped_blocks" => Ok(DropoutPosition::DroppedBlocks(f)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub n_feats: usize,
    pub sr_scale: usize,
    pub dropout: DropoutSpec,
    pub position: DropoutPosition,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 4,
            n_feats: 16,
            sr_scale: 2,
            dropout: DropoutSpec::disabled(),
            position: DropoutPosition::None,
        }
    }
}

impl ModelConfig {
    pub fn with_dropout(mut self, position: DropoutPosition, dropout: DropoutSpec) -> Self {
        self.position = position;
        self.dropout = dropout;
        self
    }

    pub fn upsample_stages(&self) -> usize {
        self.sr_scale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_feats == 0 {
            return Err(Error::Config("n_blocks and n_feats must be positive".into()));
        }
        if self.sr_scale < 2 || !self.sr_scale.is_power_of_two() {
            return Err(Error::Config(format!(
                "sr_scale must be a power of two >= 2, got {}",
                self.sr_scale
            )));
        }
        match self.position {
            DropoutPosition::AfterBlock(f) => {
                if ![0.25, 0.5, 0.75, 1.0].contains(&f) {
                    return Err(Error::Config(format!("after_block fraction {f} not in {{0.25, 0.5, 0.75, 1}}")));
                }
                let k = self.n_blocks as f64 * f;
                if k.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "after_block:{f} needs n_blocks * f to be an integer (n_blocks = {})",
                        self.n_blocks
                    )));
                }
            }
            DropoutPosition::DroppedBlocks(f) => {
                if ![0.25, 0.5, 1.0].contains(&f) {
                    return Err(Error::Config(format!("dropped_blocks fraction {f} not in {{0.25, 0.5, 1}}")));
                }
            }
            DropoutPosition::None | DropoutPosition::LastConv => {}
        }
        Ok(())
    }

    /// 1-based block index followed by the single dropout layer, if any.
    pub fn dropout_after_block(&self) -> Option<usize> {
        match self.position {
            DropoutPosition::AfterBlock(f) => Some((self.n_blocks as f64 * f).ceil() as usize),
            _ => None,
        }
    }

    /// 0-based indices of the dropped residual blocks.
    pub fn dropped_blocks(&self) -> std::ops::Range<usize> {
        match self.position {
            DropoutPosition::DroppedBlocks(f) => {
                let count = ((self.n_blocks as f64 * f).ceil() as usize).min(self.n_blocks);
                self.n_blocks - count..self.n_blocks
            }
            _ => 0..0,
        }
    }

    /// `key=value` lines, used as the checkpoint config echo.
    pub fn to_text(&self) -> String {
        format!(
            "n_blocks={}\nn_feats={}\nsr_scale={}\ndropout_dim={}\ndropout_p={}\nposition={}\n",
            self.n_blocks,
            self.n_feats,
            self.sr_scale,
            self.dropout.dim.as_str(),
            self.dropout.p(),
            self.position
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut dim = DropoutDim::Channel;
        let mut p = 0.0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad model config line '{line}'")))?;
            let num = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("bad integer for {k}: '{v}'")))
            };
            match k {
                "n_blocks" => cfg.n_blocks = num(v)?,
                "n_feats" => cfg.n_feats = num(v)?,
                "sr_scale" => cfg.sr_scale = num(v)?,
                "dropout_dim" => dim = DropoutDim::parse(v)?,
                "dropout_p" => {
                    p = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad dropout_p '{v}'")))?
                }
                "position" => cfg.position = v.parse()?,
                other => return Err(Error::Config(format!("unknown model key '{other}'"))),
            }
        }
        cfg.dropout = DropoutSpec::new(dim, p)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A network whose analysis layer can be read out and re-entered.
pub trait TapNetwork {
    fn sr_scale(&self) -> usize;

    /// Eval-mode features at the tap for `lr`.
    fn features(&self, lr: &ImageTensor) -> Result<ImageTensor>;

    /// Eval-mode map from a tap node to the SR output node for input `lr`.
    fn reconstruct(&self, g: &mut Graph<f32>, tap: NodeId, lr: &ImageTensor) -> Result<NodeId>;
}

/// Output of one graph-building forward pass.
pub struct Forward {
    pub graph: Graph<f32>,
    pub output: NodeId,
    /// Input of the final conv (before the last-conv dropout, if any).
    pub tap: NodeId,
    /// Parameter nodes, in [`SrNetwork::param_names`] order.
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrNetwork {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor4<f32>>,
}

fn conv_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let f = cfg.n_feats;
    let mut convs = vec![("head".to_string(), 3, f)];
    for i in 0..cfg.n_blocks {
        convs.push((format!("trunk.{i}.conv1"), f, f));
        convs.push((format!("trunk.{i}.conv2"), f, f));
    }
    convs.push(("trunk_exit".into(), f, f));
    for j in 0..cfg.upsample_stages() {
        convs.push((format!("up.{j}"), f, 4 * f));
    }
    convs.push(("tail".into(), f, 3));
    convs
}

/// Builds a network with fan-in scaled uniform weights and zero biases.
pub fn build_model(cfg: ModelConfig, rng: &mut RngState) -> Result<SrNetwork> {
    cfg.validate()?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, c_in, c_out) in conv_shapes(&cfg) {
        let fan_in = (c_in * KERNEL * KERNEL) as f64;
        let bound = (6.0 / fan_in).sqrt() * INIT_SCALE;
        let w = Tensor4::from_fn(Shape4::new(c_out, c_in, KERNEL, KERNEL), |_, _, _, _| {
            rng.uniform(-bound, bound) as f32
        });
        names.push(format!("{name}.weight"));
        params.push(w);
        names.push(format!("{name}.bias"));
        params.push(Tensor4::zeros(Shape4::new(1, c_out, 1, 1)));
    }
    Ok(SrNetwork { cfg, names, params })
}

impl SrNetwork {
    /// Rebuilds a network from named tensors, checking names and shapes
    /// against the layout `cfg` implies.
    pub fn from_params(cfg: ModelConfig, named: Vec<(String, Tensor4<f32>)>) -> Result<Self> {
        cfg.validate()?;
        let mut expected = Vec::new();
        for (name, c_in, c_out) in conv_shapes(&cfg) {
            expected.push((format!("{name}.weight"), Shape4::new(c_out, c_in, KERNEL, KERNEL)));
            expected.push((format!("{name}.bias"), Shape4::new(1, c_out, 1, 1)));
        }
        if expected.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((ename, eshape), (name, t)) in expected.into_iter().zip(named) {
            if ename != name {
                return Err(Error::Format(format!("expected parameter '{ename}', found '{name}'")));
            }
            if eshape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter '{name}' has shape {:?}, config implies {:?}",
                    t.shape(),
                    eshape
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(SrNetwork { cfg, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor4<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor4<f32>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Same weights, different dropout setting.
    pub fn with_dropout(&self, position: DropoutPosition, dropout: DropoutSpec) -> Result<Self> {
        let cfg = self.cfg.with_dropout(position, dropout);
        cfg.validate()?;
        Ok(SrNetwork { cfg, ..self.clone() })
    }

    fn insert_params(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.input(p.clone()) })
            .collect()
    }

    fn conv(&self, g: &mut Graph<f32>, p: &[NodeId], layer: usize, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, p[2 * layer], p[2 * layer + 1], 1, KERNEL / 2)
    }

    fn body(
        &self,
        g: &mut Graph<f32>,
        p: &[NodeId],
        lr: NodeId,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<NodeId> {
        let shape = g.value(lr).shape();
        if shape.c != 3 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                dim: "C",
                expected: 3,
                found: shape.c,
            });
        }
        let spec = self.cfg.dropout;
        let dropped = self.cfg.dropped_blocks();
        let after = self.cfg.dropout_after_block();
        let mut layer = 0;
        let head = self.conv(g, p, layer, lr)?;
        let head = g.leaky_relu(head, LEAKY_SLOPE);
        layer += 1;
        let mut h = head;
        for i in 0..self.cfg.n_blocks {
            let r = self.conv(g, p, layer, h)?;
            let r = g.leaky_relu(r, LEAKY_SLOPE);
            let r = self.conv(g, p, layer + 1, r)?;
            layer += 2;
            h = g.add(h, r)?;
            if dropped.contains(&i) {
                h = g.dropout(h, spec, mode, rng);
            }
            if after == Some(i + 1) {
                h = g.dropout(h, spec, mode, rng);
            }
        }
        let t = self.conv(g, p, layer, h)?;
        layer += 1;
        h = g.add(t, head)?;
        for _ in 0..self.cfg.upsample_stages() {
            let u = self.conv(g, p, layer, h)?;
            layer += 1;
            let u = g.pixel_shuffle(u, 2)?;
            h = g.leaky_relu(u, LEAKY_SLOPE);
        }
        Ok(h)
    }

    fn tail(
        &self,
        g: &mut Graph<f32>,
        p: &[NodeId],
        tap: NodeId,
        lr: &ImageTensor,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<NodeId> {
        let mut h = tap;
        if self.cfg.position == DropoutPosition::LastConv {
            h = g.dropout(h, self.cfg.dropout, mode, rng);
        }
        let tail_layer = p.len() / 2 - 1;
        let out = self.conv(g, p, tail_layer, h)?;
        self.add_base(g, out, lr)
    }

    fn add_base(&self, g: &mut Graph<f32>, out: NodeId, lr: &ImageTensor) -> Result<NodeId> {
        let s = lr.shape();
        let base = resize_to(lr, s.h * self.cfg.sr_scale, s.w * self.cfg.sr_scale, ResizeMode::Bilinear)?;
        let base = g.input(base);
        g.add(out, base)
    }

    /// Builds the full graph. With `trainable`, parameters are gradient leaves.
    pub fn forward(&self, lr: &ImageTensor, mode: Mode, rng: &mut RngState, trainable: bool) -> Result<Forward> {
        let mut graph = Graph::new();
        let params = self.insert_params(&mut graph, trainable);
        let x = graph.input(lr.clone());
        let tap = self.body(&mut graph, &params, x, mode, rng)?;
        let output = self.tail(&mut graph, &params, tap, lr, mode, rng)?;
        Ok(Forward {
            graph,
            output,
            tap,
            params,
        })
    }

    /// Eval-mode SR output.
    pub fn infer(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        let mut rng = RngState::new(0);
        let f = self.forward(lr, Mode::Eval, &mut rng, false)?;
        Ok(f.graph.value(f.output).clone())
    }
}

impl TapNetwork for SrNetwork {
    fn sr_scale(&self) -> usize {
        self.cfg.sr_scale
    }

    fn features(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        let mut rng = RngState::new(0);
        let mut g = Graph::new();
        let p = self.insert_params(&mut g, false);
        let x = g.input(lr.clone());
        let tap = self.body(&mut g, &p, x, Mode::Eval, &mut rng)?;
        Ok(g.value(tap).clone())
    }

    fn reconstruct(&self, g: &mut Graph<f32>, tap: NodeId, lr: &ImageTensor) -> Result<NodeId> {
        let n = self.params.len();
        let w = g.input(self.params[n - 2].clone());
        let b = g.input(self.params[n - 1].clone());
        let out = g.conv2d(tap, w, b, 1, KERNEL / 2)?;
        self.add_base(g, out, lr)
    }
}
