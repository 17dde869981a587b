//! Hand-built tap networks with known saliency and ablation behaviour.

use dropsr::interpret::channel_saliency;
use dropsr::model::TapNetwork;
use dropsr::nn::{Graph, NodeId};
use dropsr::tensor::{Shape4, Tensor4};
use dropsr::{ImageTensor, Result};

/// Tap = the LR image itself; output = `gain * F[channel]` replicated to RGB.
pub struct LinearStub {
    pub channel: usize,
    pub gain: f32,
}

impl TapNetwork for LinearStub {
    fn sr_scale(&self) -> usize {
        1
    }

    fn features(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        Ok(lr.clone())
    }

    fn reconstruct(&self, g: &mut Graph<f32>, tap: NodeId, _lr: &ImageTensor) -> Result<NodeId> {
        let c = g.value(tap).shape().c;
        let w = Tensor4::from_fn(Shape4::new(3, c, 1, 1), |_, ci, _, _| if ci == self.channel { self.gain } else { 0.0 });
        let w = g.input(w);
        let b = g.input(Tensor4::zeros(Shape4::new(1, 3, 1, 1)));
        g.conv2d(tap, w, b, 1, 0)
    }
}

/// Output is a constant bias regardless of the features.
pub struct ConstantStub;

impl TapNetwork for ConstantStub {
    fn sr_scale(&self) -> usize {
        1
    }

    fn features(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        Ok(lr.clone())
    }

    fn reconstruct(&self, g: &mut Graph<f32>, tap: NodeId, _lr: &ImageTensor) -> Result<NodeId> {
        let c = g.value(tap).shape().c;
        let w = g.input(Tensor4::zeros(Shape4::new(3, c, 1, 1)));
        let b = g.input(Tensor4::filled(Shape4::new(1, 3, 1, 1), 0.4));
        g.conv2d(tap, w, b, 1, 0)
    }
}

pub fn ramp(h: usize, w: usize) -> ImageTensor {
    Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, _, x| (x as f32 + 1.0) * 0.05 + c as f32 * 0.1)
}

/// With forward differences, D = gain * 3 * sum|dx F|; on a horizontal ramp
/// the interior contributions cancel and only the first and last columns
/// carry gradient magnitude `3 * gain`.
pub fn linear_stub_check() -> std::result::Result<(), String> {
    let img = ramp(5, 6);
    let res = channel_saliency(&LinearStub { channel: 1, gain: 2.0 }, &img).map_err(|e| e.to_string())?;
    let expected_d = 2.0 * 3.0 * 5.0 * 5.0 * 0.05;
    if (res.d_value - expected_d).abs() >= 1e-5 {
        return Err(format!("D = {}, expected {expected_d}", res.d_value));
    }
    for c in 0..3 {
        for h in 0..5 {
            for w in 0..6 {
                let want = if c == 1 && (w == 0 || w == 5) { 1.0 } else { 0.0 };
                if res.maps.get(0, c, h, w) != want {
                    return Err(format!("map c{c} h{h} w{w} = {}", res.maps.get(0, c, h, w)));
                }
            }
        }
    }
    if res.channel_scores != vec![0.0, 2.0 / 6.0, 0.0] {
        return Err(format!("scores {:?}", res.channel_scores));
    }
    Ok(())
}
