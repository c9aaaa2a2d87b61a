//! Deep-feature image distances.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;

use crate::error::Result;
use crate::frame::Frame;
use crate::rng::{normal, seeded};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feature-space image distance.
///
/// The distance is the sum over feature layers of the mean squared feature
/// difference, so it is symmetric and zero for identical inputs.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;

    /// Feature maps of a `[3,S,S]` image.
    fn features_on(&self, tape: &Tape, image: Var) -> Vec<Var>;

    fn features(&self, frame: &Frame) -> Vec<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(frame.to_tensor());
        self.features_on(&tape, x).into_iter().map(|v| tape.value(v)).collect()
    }

    /// Distance from `image` to precomputed target features.
    fn distance_to_features_on(&self, tape: &Tape, image: Var, target: &[Tensor]) -> Var {
        let fa = self.features_on(tape, image);
        assert_eq!(fa.len(), target.len(), "feature layer count");
        let mut total: Option<Var> = None;
        for (a, t) in fa.into_iter().zip(target) {
            let b = tape.constant(t.clone());
            let d = tape.mse(a, b);
            total = Some(match total {
                Some(acc) => tape.add(acc, d),
                None => d,
            });
        }
        total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
    }

    fn distance_on(&self, tape: &Tape, a: Var, b: Var) -> Var {
        let fa = self.features_on(tape, a);
        let fb = self.features_on(tape, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = tape.mse(x, y);
            total = Some(match total {
                Some(acc) => tape.add(acc, d),
                None => d,
            });
        }
        total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
    }

    fn distance(&self, a: &Frame, b: &Frame) -> Result<f64> {
        a.check_same_size(b)?;
        let tape = Tape::new();
        let (x, y) = (tape.constant(a.to_tensor()), tape.constant(b.to_tensor()));
        let d = self.distance_on(&tape, x, y);
        Ok(tape.scalar(d))
    }
}

/// Three stride-2 `3x3` convolutions with fixed random weights and `tanh`.
#[derive(Clone, Debug)]
pub struct ToyPerceptual {
    layers: Vec<(Tensor, Tensor)>,
}

impl ToyPerceptual {
    pub const CHANNELS: [usize; 4] = [3, 8, 8, 8];

    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let layers = Self::CHANNELS
            .windows(2)
            .map(|c| {
                let fan_in = (c[0] * 9) as f64;
                let std = 1.5 / fan_in.sqrt();
                let w = Tensor::from_fn(&[c[1], c[0], 3, 3], |_| normal(&mut rng) * std);
                let b = Tensor::from_fn(&[c[1]], |_| normal(&mut rng) * 0.1);
                (w, b)
            })
            .collect();
        Self { layers }
    }

    /// Total feature width: per-layer channel counts summed.
    pub fn feature_channels(&self) -> usize {
        Self::CHANNELS[1..].iter().sum()
    }
}

impl Default for ToyPerceptual {
    fn default() -> Self {
        Self::new(0x5eed_f00d)
    }
}

impl PerceptualMetric for ToyPerceptual {
    fn name(&self) -> &str {
        "toy"
    }

    fn features_on(&self, tape: &Tape, image: Var) -> Vec<Var> {
        let mut x = tape.add_scalar(tape.scale(image, 2.0), -1.0);
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            let y = tape.conv2d(x, tape.constant(w.clone()), 2, 1);
            let y = tape.channel_bias(y, tape.constant(b.clone()));
            x = tape.tanh(y);
            out.push(x);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero_and_symmetric() {
        let m = ToyPerceptual::default();
        let a = Frame::new(8, (0..192).map(|i| (i % 7) as f64 / 7.0).collect(), 0).unwrap();
        let b = Frame::new(8, (0..192).map(|i| (i % 5) as f64 / 5.0).collect(), 0).unwrap();
        assert_eq!(m.distance(&a, &a).unwrap(), 0.0);
        assert_eq!(m.distance(&a, &b).unwrap(), m.distance(&b, &a).unwrap());
        assert!(m.distance(&a, &b).unwrap() > 0.0);
    }
}
