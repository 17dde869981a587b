use super::conv::{conv_backward, conv_forward_geom, pixel_shuffle_tensor, pixel_unshuffle_tensor, ConvGeometry};
use super::{DropoutDim, DropoutSpec, Mode};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Shape4, Tensor4};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    PixelShuffle {
        input: NodeId,
        r: usize,
    },
    /// `mask` holds the scaled keep factor, per element or per `(n, c)`.
    Dropout {
        input: NodeId,
        mask: Vec<T>,
        dim: DropoutDim,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    L1Loss {
        pred: NodeId,
        target: Tensor4<T>,
    },
    GradientL1 {
        input: NodeId,
    },
    WeightedSum {
        input: NodeId,
        weights: Tensor4<T>,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    grad: Option<Tensor4<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar<T: Real>(v: T) -> Tensor4<T> {
    Tensor4::filled(Shape4::new(1, 1, 1, 1), v)
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn input(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf; gradients accumulate on backward.
    pub fn param(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor4<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.needs(id)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = ConvGeometry::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
        let y = conv_forward_geom(&geom, x, w, b);
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            y,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise (slope in `[0, 1]`).
    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        debug_assert!((0.0..=1.0).contains(&slope));
        let s = T::lit(slope);
        let y = self
            .value(input)
            .map(|x| if x >= T::zero() { x } else { s * x });
        let rg = self.needs(input);
        self.push(y, rg, Op::LeakyRelu { input, slope: s })
    }

    pub fn pixel_shuffle(&mut self, input: NodeId, r: usize) -> Result<NodeId> {
        let y = pixel_shuffle_tensor(self.value(input), r)?;
        let rg = self.needs(input);
        Ok(self.push(y, rg, Op::PixelShuffle { input, r }))
    }

    /// Inverted dropout. Eval mode and `p = 0` return `input` unchanged
    /// without drawing from `rng`.
    pub fn dropout(&mut self, input: NodeId, spec: DropoutSpec, mode: Mode, rng: &mut RngState) -> NodeId {
        let p = spec.p();
        if mode == Mode::Eval || p == 0.0 {
            return input;
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let x = self.value(input);
        let shape = x.shape();
        let draws = match spec.dim {
            DropoutDim::Element => shape.numel(),
            DropoutDim::Channel => shape.n * shape.c,
        };
        let mask: Vec<T> = (0..draws)
            .map(|_| if rng.next_f64() >= p { scale } else { T::zero() })
            .collect();
        let mut y = x.clone();
        apply_mask(y.data_mut(), &mask, spec.dim, shape.plane());
        let rg = self.needs(input);
        self.push(
            y,
            rg,
            Op::Dropout {
                input,
                mask,
                dim: spec.dim,
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.shape().expect_eq(&vb.shape(), "add")?;
        let mut y = va.clone();
        for (o, &v) in y.data_mut().iter_mut().zip(vb.data()) {
            *o = *o + v;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, rg, Op::Add { a, b }))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: NodeId, target: &Tensor4<T>) -> Result<NodeId> {
        let p = self.value(pred);
        p.shape().expect_eq(&target.shape(), "l1_loss")?;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .sum();
        let loss = T::lit(total / p.numel() as f64);
        let rg = self.needs(pred);
        Ok(self.push(
            scalar(loss),
            rg,
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Sum of absolute forward differences along both spatial axes.
    pub fn gradient_l1(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let s = x.shape();
        let mut total = 0.0f64;
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = x.plane(n, c);
                for h in 0..s.h {
                    for w in 0..s.w {
                        let v = plane[h * s.w + w];
                        if w + 1 < s.w {
                            total += (plane[h * s.w + w + 1] - v).abs().as_f64();
                        }
                        if h + 1 < s.h {
                            total += (plane[(h + 1) * s.w + w] - v).abs().as_f64();
                        }
                    }
                }
            }
        }
        let rg = self.needs(input);
        self.push(scalar(T::lit(total)), rg, Op::GradientL1 { input })
    }

    /// `sum(x * weights)`, a scalar.
    pub fn weighted_sum(&mut self, input: NodeId, weights: &Tensor4<T>) -> Result<NodeId> {
        let x = self.value(input);
        x.shape().expect_eq(&weights.shape(), "weighted_sum")?;
        let total: T = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.needs(input);
        Ok(self.push(
            scalar(total),
            rg,
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar `root`. Gradients of all earlier nodes are
    /// reset first, so calling backward twice gives the same result.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let numel = self.value(root).numel();
        if numel != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                dim: "root numel",
                expected: 1,
                found: numel,
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(scalar(T::one()));
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(dy) = node.grad.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backprop_node(before, node, dy);
        }
        Ok(())
    }
}

fn apply_mask<T: Real>(data: &mut [T], mask: &[T], dim: DropoutDim, plane: usize) {
    match dim {
        DropoutDim::Element => {
            for (v, &m) in data.iter_mut().zip(mask) {
                *v = *v * m;
            }
        }
        DropoutDim::Channel => {
            for (chunk, &m) in data.chunks_mut(plane.max(1)).zip(mask) {
                for v in chunk {
                    *v = *v * m;
                }
            }
        }
    }
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], id: NodeId, f: impl FnOnce(&mut [T])) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    let shape = node.value.shape();
    let g = node.grad.get_or_insert_with(|| Tensor4::zeros(shape));
    f(g.data_mut());
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop_node<T: Real>(nodes: &mut [Node<T>], node: &Node<T>, dy: &Tensor4<T>) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let need_input = nodes[input.0].requires_grad;
            let grads = conv_backward(geom, &nodes[input.0].value, &nodes[weight.0].value, dy, need_input);
            if let Some(dx) = grads.input {
                accumulate(nodes, *input, |g| add_into(g, &dx));
            }
            accumulate(nodes, *weight, |g| add_into(g, &grads.weight));
            accumulate(nodes, *bias, |g| add_into(g, &grads.bias));
        }
        Op::LeakyRelu { input, slope } => {
            let x = nodes[input.0].value.data();
            let dx: Vec<T> = x
                .iter()
                .zip(dy.data())
                .map(|(&x, &d)| if x >= T::zero() { d } else { *slope * d })
                .collect();
            accumulate(nodes, *input, |g| add_into(g, &dx));
        }
        Op::PixelShuffle { input, r } => {
            let dx = pixel_unshuffle_tensor(dy, *r).expect("shape validated in forward");
            accumulate(nodes, *input, |g| add_into(g, dx.data()));
        }
        Op::Dropout { input, mask, dim } => {
            let mut dx = dy.clone();
            apply_mask(dx.data_mut(), mask, *dim, dy.shape().plane());
            accumulate(nodes, *input, |g| add_into(g, dx.data()));
        }
        Op::Add { a, b } => {
            accumulate(nodes, *a, |g| add_into(g, dy.data()));
            accumulate(nodes, *b, |g| add_into(g, dy.data()));
        }
        Op::L1Loss { pred, target } => {
            let up = dy.data()[0] / T::lit(target.numel() as f64);
            let p = &nodes[pred.0].value;
            let dx: Vec<T> = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| sign(a - b) * up)
                .collect();
            accumulate(nodes, *pred, |g| add_into(g, &dx));
        }
        Op::GradientL1 { input } => {
            let up = dy.data()[0];
            let x = &nodes[input.0].value;
            let s = x.shape();
            let mut dx = vec![T::zero(); x.numel()];
            for (plane, dplane) in x.data().chunks(s.plane()).zip(dx.chunks_mut(s.plane())) {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let i = h * s.w + w;
                        if w + 1 < s.w {
                            let d = sign(plane[i + 1] - plane[i]) * up;
                            dplane[i + 1] = dplane[i + 1] + d;
                            dplane[i] = dplane[i] - d;
                        }
                        if h + 1 < s.h {
                            let j = i + s.w;
                            let d = sign(plane[j] - plane[i]) * up;
                            dplane[j] = dplane[j] + d;
                            dplane[i] = dplane[i] - d;
                        }
                    }
                }
            }
            accumulate(nodes, *input, |g| add_into(g, &dx));
        }
        Op::WeightedSum { input, weights } => {
            let up = dy.data()[0];
            accumulate(nodes, *input, |g| {
                for (d, &w) in g.iter_mut().zip(weights.data()) {
                    *d = *d + w * up;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    fn t(shape: Shape4, v: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v).unwrap()
    }

    #[test]
    fn conv_counts_overlapping_taps() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor4::filled(Shape4::new(1, 1, 3, 3), 1.0));
        let w = g.param(Tensor4::filled(Shape4::new(1, 1, 3, 3), 1.0));
        let b = g.param(Tensor4::zeros(Shape4::new(1, 1, 1, 1)));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), Shape4::new(1, 1, 3, 3));
        assert_eq!(out.get(0, 0, 1, 1), 9.0);
        assert_eq!(out.get(0, 0, 0, 0), 4.0);
        assert_eq!(out.get(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = seed_rng(1);
        let xv = Tensor4::from_fn(Shape4::new(2, 1, 4, 5), |_, _, _, _| rng.next_f64());
        let mut g = Graph::<f64>::new();
        let x = g.input(xv.clone());
        let w = g.param(Tensor4::filled(Shape4::new(1, 1, 1, 1), 1.0));
        let b = g.param(Tensor4::zeros(Shape4::new(1, 1, 1, 1)));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn conv_stride_output_size() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor4::zeros(Shape4::new(1, 2, 7, 6)));
        let w = g.param(Tensor4::zeros(Shape4::new(3, 2, 3, 3)));
        let b = g.param(Tensor4::zeros(Shape4::new(1, 3, 1, 1)));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), Shape4::new(1, 3, 4, 3));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor4::zeros(Shape4::new(1, 2, 4, 4)));
        let w = g.param(Tensor4::zeros(Shape4::new(3, 5, 3, 3)));
        let b = g.param(Tensor4::zeros(Shape4::new(1, 3, 1, 1)));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(Shape4::new(1, 1, 1, 3), vec![-2.0, 0.0, 3.0]));
        let y = g.leaky_relu(x, 0.2);
        let v = g.value(y).data();
        assert!((v[0] + 0.4).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 3.0);
        let id = g.leaky_relu(x, 1.0);
        assert_eq!(g.value(id), g.value(x));
    }

    #[test]
    fn pixel_shuffle_2x2() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(Shape4::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), Shape4::new(1, 1, 2, 2));
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let x3 = g.input(Tensor4::zeros(Shape4::new(1, 3, 1, 1)));
        assert!(g.pixel_shuffle(x3, 2).is_err());
    }

    #[test]
    fn l1_loss_value() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(Shape4::new(1, 1, 1, 4), vec![1.0, -1.0, 2.0, 0.0]));
        let loss = g.l1_loss(p, &Tensor4::zeros(Shape4::new(1, 1, 1, 4))).unwrap();
        assert_eq!(g.value(loss).data()[0], 1.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[0.25, -0.25, 0.25, 0.0]);
        let same = g.l1_loss(p, &g.value(p).clone()).unwrap();
        assert_eq!(g.value(same).data()[0], 0.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(Shape4::new(1, 1, 1, 3), vec![0.5, -1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.weighted_sum(y, &Tensor4::filled(Shape4::new(1, 1, 1, 3), 1.0)).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor4::zeros(Shape4::new(1, 1, 2, 2)));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = seed_rng(0);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor4::filled(Shape4::new(2, 3, 4, 4), 0.7));
        let p0 = g.dropout(x, DropoutSpec::channel(0.0).unwrap(), Mode::Train, &mut rng);
        assert_eq!(p0, x);
        let ev = g.dropout(x, DropoutSpec::element(0.9).unwrap(), Mode::Eval, &mut rng);
        assert_eq!(ev, x);
        assert_eq!(rng, seed_rng(0));
    }

    #[test]
    fn channel_dropout_drops_whole_planes() {
        let mut rng = seed_rng(3);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor4::filled(Shape4::new(2, 8, 3, 3), 1.0));
        let y = g.dropout(x, DropoutSpec::channel(0.5).unwrap(), Mode::Train, &mut rng);
        let v = g.value(y);
        for n in 0..2 {
            for c in 0..8 {
                let plane = v.plane(n, c);
                assert!(plane.iter().all(|&e| e == plane[0]));
                assert!(plane[0] == 0.0 || plane[0] == 2.0);
            }
        }
    }

    #[test]
    fn gradient_l1_of_ramp() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor4::from_fn(Shape4::new(1, 1, 2, 3), |_, _, _, w| w as f64));
        let d = g.gradient_l1(x);
        assert_eq!(g.value(d).data()[0], 4.0);
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
    }
}
