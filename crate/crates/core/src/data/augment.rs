use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::Raster;

use super::FrameSequence;

pub const MAX_ROTATION_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugmentOp {
    HFlip,
    /// In-plane rotation about the image centre, degrees counter-clockwise.
    Rotate(f64),
}

/// One random training-time transform, applied identically to every frame
/// of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub angle_deg: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        hflip: false,
        angle_deg: 0.0,
    };

    /// Flip with probability 1/2, angle uniform in ±10°.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            hflip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.angle_deg == 0.0
    }

    pub fn ops(&self) -> Vec<AugmentOp> {
        let mut ops = Vec::new();
        if self.hflip {
            ops.push(AugmentOp::HFlip);
        }
        if self.angle_deg != 0.0 {
            ops.push(AugmentOp::Rotate(self.angle_deg));
        }
        ops
    }

    /// Hashable identity of the transform.
    pub fn key(&self) -> (bool, u64) {
        (self.hflip, self.angle_deg.to_bits())
    }

    pub fn apply(&self, seq: &FrameSequence) -> FrameSequence {
        augment(seq, &self.ops())
    }
}

/// Applies `ops` in order to every frame; annotations are untouched.
pub fn augment(seq: &FrameSequence, ops: &[AugmentOp]) -> FrameSequence {
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            ops.iter().fold(f.clone(), |acc, op| match *op {
                AugmentOp::HFlip => hflip(&acc),
                AugmentOp::Rotate(deg) => rotate(&acc, deg),
            })
        })
        .collect();
    FrameSequence {
        frames,
        ..seq.clone_meta()
    }
}

impl FrameSequence {
    fn clone_meta(&self) -> FrameSequence {
        FrameSequence {
            id: self.id.clone(),
            frames: Vec::new(),
            subject_id: self.subject_id.clone(),
            label: self.label,
            onset: self.onset,
            apex: self.apex,
            offset: self.offset,
        }
    }
}

pub fn hflip(r: &Raster) -> Raster {
    let mut out = r.clone();
    for c in 0..r.channels {
        for y in 0..r.height {
            for x in 0..r.width {
                out.data[(c * r.height + y) * r.width + x] = r.at(c, y, r.width - 1 - x);
            }
        }
    }
    out
}

/// Bilinear sample with coordinates clamped to the image border.
fn sample_bilinear(r: &Raster, c: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (r.height - 1) as f64);
    let x = x.clamp(0.0, (r.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(r.height - 1), (x0 + 1).min(r.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v00 = f64::from(r.at(c, y0, x0));
    let v01 = f64::from(r.at(c, y0, x1));
    let v10 = f64::from(r.at(c, y1, x0));
    let v11 = f64::from(r.at(c, y1, x1));
    let top = v00 + (v01 - v00) * fx;
    let bottom = v10 + (v11 - v10) * fx;
    (top + (bottom - top) * fy) as f32
}

pub fn rotate(r: &Raster, degrees: f64) -> Raster {
    let theta = degrees.to_radians();
    let (s, co) = theta.sin_cos();
    let cy = (r.height as f64 - 1.0) / 2.0;
    let cx = (r.width as f64 - 1.0) / 2.0;
    let mut out = r.clone();
    for c in 0..r.channels {
        for y in 0..r.height {
            for x in 0..r.width {
                // inverse map: rotate the output coordinate by -theta
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sx = co * dx - s * dy + cx;
                let sy = s * dx + co * dy + cy;
                out.data[(c * r.height + y) * r.width + x] = sample_bilinear(r, c, sy, sx);
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centres.
pub fn resize(r: &Raster, height: usize, width: usize) -> Raster {
    assert!(height >= 1 && width >= 1, "resize target must be at least 1x1");
    if height == r.height && width == r.width {
        return r.clone();
    }
    let sy = r.height as f64 / height as f64;
    let sx = r.width as f64 / width as f64;
    let mut data = Vec::with_capacity(r.channels * height * width);
    for c in 0..r.channels {
        for y in 0..height {
            for x in 0..width {
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                data.push(sample_bilinear(r, c, src_y, src_x));
            }
        }
    }
    Raster {
        channels: r.channels,
        height,
        width,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Raster {
        Raster::new(
            c,
            h,
            w,
            (0..c * h * w).map(|i| (i as f32 * 0.37).sin() * 0.5 + 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn hflip_is_involution() {
        let r = ramp(2, 5, 7);
        assert_eq!(hflip(&hflip(&r)), r);
        assert_ne!(hflip(&r), r);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let r = ramp(1, 9, 8);
        let out = rotate(&r, 0.0);
        for (a, b) in out.data.iter().zip(&r.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let mut r = Raster::zeros(1, 3, 3);
        r.data[2] = 1.0; // top-right
        let out = rotate(&r, 90.0);
        // counter-clockwise: top-right -> top-left
        assert!((out.at(0, 0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resize_cases() {
        let r = ramp(3, 6, 5);
        assert_eq!(resize(&r, 6, 5), r);
        let k = Raster::filled(1, 4, 4, 0.3);
        assert!(resize(&k, 7, 3).data.iter().all(|&v| (v - 0.3).abs() < 1e-7));
        let checker = Raster::new(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let one = resize(&checker, 1, 1);
        assert_eq!(one.data, vec![0.5]);
        let quad = Raster::new(1, 2, 2, vec![0.1, 0.2, 0.7, 0.4]).unwrap();
        assert!((resize(&quad, 1, 1).data[0] - 0.35).abs() < 1e-7);
    }

    #[test]
    fn augment_preserves_annotations_and_shape() {
        let seq = FrameSequence {
            id: "a".into(),
            frames: vec![ramp(1, 6, 6); 5],
            subject_id: "s".into(),
            label: 2,
            onset: 0,
            apex: 2,
            offset: 4,
        };
        let out = AugmentDraw {
            hflip: true,
            angle_deg: 7.0,
        }
        .apply(&seq);
        assert_eq!(out.frames.len(), 5);
        assert_eq!((out.onset, out.apex, out.offset, out.label), (0, 2, 4, 2));
        assert!(out.frames.iter().all(|f| f.shape() == [1, 6, 6]));
        assert_eq!(augment(&augment(&seq, &[AugmentOp::HFlip]), &[AugmentOp::HFlip]), seq);
    }
}
