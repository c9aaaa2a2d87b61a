//! Square RGB frames and face crop alignment.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use crate::error::{shape_err, Error, Result};
use crate::geometry::Affine2;
use crate::landmarks::{canonical_eye_anchors, LandmarkSet};
use crate::tensor::Tensor;

/// Square RGB image with values in `[0, 1]`, stored planar as `[3, S, S]`.
///
/// `crop_transform` maps crop pixel coordinates `(x, y)` back to the pixel
/// coordinates of the source frame the crop was cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    size: usize,
    pixels: Vec<f64>,
    pub crop_transform: Affine2,
    pub index: usize,
}

impl Frame {
    pub fn new(size: usize, pixels: Vec<f64>, index: usize) -> Result<Self> {
        if size == 0 || !size.is_power_of_two() {
            return shape_err(format!("frame side {size} is not a power of two"));
        }
        if pixels.len() != 3 * size * size {
            return shape_err(format!("frame {size}x{size} needs {} values, got {}", 3 * size * size, pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { size, pixels, crop_transform: Affine2::IDENTITY, index })
    }

    /// Solid color frame.
    pub fn filled(size: usize, rgb: [f64; 3], index: usize) -> Result<Self> {
        let mut px = vec![0.0; 3 * size * size];
        for c in 0..3 {
            px[c * size * size..(c + 1) * size * size].fill(rgb[c]);
        }
        Self::new(size, px, index)
    }

    /// Builds a frame from a `[3,S,S]` tensor, clamping into `[0,1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        match t.shape() {
            [3, h, w] if h == w => {
                Self::new(*h, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(), index)
            }
            s => shape_err(format!("frame tensor must be [3,S,S], got {s:?}")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.size, self.size], self.pixels.clone()).expect("frame tensor")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let s = self.size;
        self.pixels[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
    }

    pub fn with_transform(mut self, t: Affine2) -> Self {
        self.crop_transform = t;
        self
    }

    /// Bilinear sample at pixel coordinates with edge clamping.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let max = (self.size - 1) as f64;
        let x = x.clamp(0.0, max);
        let y = y.clamp(0.0, max);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.size - 1), (y0 + 1).min(self.size - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let p = |yy, xx| self.get(c, yy, xx);
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.size * self.size;
        self.pixels[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64
    }

    pub fn check_same_size(&self, other: &Frame) -> Result<()> {
        if self.size != other.size {
            return shape_err(format!("frame sizes {} vs {}", self.size, other.size));
        }
        Ok(())
    }

    /// Resamples the whole frame to another power-of-two side.
    pub fn resized(&self, size: usize) -> Result<Frame> {
        let scale = self.size as f64 / size as f64;
        let mut px = vec![0.0; 3 * size * size];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let sx = (x as f64 + 0.5) * scale - 0.5;
                    let sy = (y as f64 + 0.5) * scale - 0.5;
                    px[(c * size + y) * size + x] = self.sample(c, sx, sy);
                }
            }
        }
        let mut f = Frame::new(size, px, self.index)?;
        f.crop_transform = self.crop_transform;
        Ok(f)
    }

    /// Maps landmarks normalized to `source_size` into this crop's normalized space.
    pub fn landmarks_to_crop(&self, landmarks: &LandmarkSet, source_size: usize) -> Result<LandmarkSet> {
        let inv = self.crop_transform.inverse()?;
        let (ss, cs) = (source_size as f64, self.size as f64);
        let pts = landmarks
            .points()
            .iter()
            .map(|p| {
                let q = inv.apply([p[0] * ss, p[1] * ss]);
                [q[0] / cs, q[1] / cs]
            })
            .collect();
        LandmarkSet::new(pts)
    }
}

/// Ordered frames with consecutive indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    pub fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        for w in frames.windows(2) {
            if w[1].index != w[0].index + 1 {
                return Err(Error::Shape(format!("frame indices {} then {}", w[0].index, w[1].index)));
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Cuts an `output_size` crop whose eye centers land on the canonical anchors.
///
/// `landmarks` are normalized to `frame`. The returned frame's `crop_transform`
/// maps crop pixels to `frame` pixels.
pub fn crop_align_face(frame: &Frame, landmarks: &LandmarkSet, output_size: usize) -> Result<Frame> {
    let s = frame.size() as f64;
    let le = landmarks.left_eye()?;
    let re = landmarks.right_eye()?;
    let src = [[le[0] * s, le[1] * s], [re[0] * s, re[1] * s]];
    let dx = src[1][0] - src[0][0];
    let dy = src[1][1] - src[0][1];
    if (dx * dx + dy * dy).sqrt() < 1e-9 {
        return Err(Error::Geometry("zero inter-ocular distance".into()));
    }
    let anchors = canonical_eye_anchors(output_size as f64);
    let t = Affine2::from_point_pairs(anchors, src)?;
    let mut px = vec![0.0; 3 * output_size * output_size];
    for y in 0..output_size {
        for x in 0..output_size {
            let p = t.apply([x as f64, y as f64]);
            for c in 0..3 {
                px[(c * output_size + y) * output_size + x] = frame.sample(c, p[0], p[1]);
            }
        }
    }
    Ok(Frame::new(output_size, px, frame.index)?.with_transform(t))
}
