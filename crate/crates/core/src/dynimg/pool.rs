use serde::{Deserialize, Serialize};

use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Full,
    OnsetApex,
    ApexOffset,
}

impl Phase {
    pub fn direction(self) -> Direction {
        match self {
            Phase::Full | Phase::OnsetApex => Direction::Forward,
            Phase::ApexOffset => Direction::Reversed,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Full => "full",
            Phase::OnsetApex => "onset",
            Phase::ApexOffset => "offset",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reversed,
}

/// Rank-pooled summary of a frame segment. The raster is the raw pooled
/// sum, not yet normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicImage {
    pub phase: Phase,
    pub raster: Raster,
    pub source_id: String,
}

/// A run of at least two equally shaped frames.
#[derive(Debug, Clone, Copy)]
pub struct PhaseSegment<'a> {
    frames: &'a [Raster],
    role: Phase,
    source_id: &'a str,
}

impl<'a> PhaseSegment<'a> {
    pub fn new(frames: &'a [Raster], role: Phase, source_id: &'a str) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::SegmentTooShort { len: frames.len() });
        }
        let expected = frames[0].shape();
        if let Some((index, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != expected) {
            return Err(Error::FrameShapeMismatch {
                index,
                expected,
                found: f.shape(),
            });
        }
        Ok(PhaseSegment {
            frames,
            role,
            source_id,
        })
    }

    pub fn frames(&self) -> &'a [Raster] {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn role(&self) -> Phase {
        self.role
    }
}

/// Integer pooling weights for a segment of `len` frames.
pub fn arp_weights(len: usize, direction: Direction) -> Result<Vec<i64>> {
    if len < 2 {
        return Err(Error::SegmentTooShort { len });
    }
    let t_len = len as i64;
    Ok((1..=t_len)
        .map(|t| match direction {
            Direction::Forward => 2 * t - t_len - 1,
            Direction::Reversed => t_len + 1 - 2 * t,
        })
        .collect())
}

/// Single streaming pass `Σ_t w_t · F_t` in ascending `t`.
///
/// Accumulation is in `f64`: each product of an `f32` pixel with a small
/// integer weight is exact there, so the sum does not depend on the order
/// of the frames and rounds to `f32` once at the end.
pub fn pool(segment: &PhaseSegment<'_>, direction: Direction) -> Result<DynamicImage> {
    if segment.role.direction() != direction {
        return Err(Error::PhaseDirectionMismatch {
            role: segment.role,
            direction,
        });
    }
    let weights = arp_weights(segment.len(), direction)?;
    let first = &segment.frames[0];
    let expected = first.shape();
    let mut acc = vec![0.0_f64; first.data.len()];
    for (index, (frame, &w)) in segment.frames.iter().zip(&weights).enumerate() {
        if frame.shape() != expected {
            return Err(Error::FrameShapeMismatch {
                index,
                expected,
                found: frame.shape(),
            });
        }
        let w = w as f64;
        for (a, &p) in acc.iter_mut().zip(&frame.data) {
            *a += w * f64::from(p);
        }
    }
    let raster = first.with_data(acc.into_iter().map(|v| v as f32).collect());
    Ok(DynamicImage {
        phase: segment.role,
        raster,
        source_id: segment.source_id.to_string(),
    })
}

/// Splits at the apex; the apex frame belongs to both segments.
pub fn split_phases(seq: &FrameSequence) -> Result<(PhaseSegment<'_>, PhaseSegment<'_>)> {
    let (onset, apex, offset) = (seq.onset, seq.apex, seq.offset);
    let len = seq.frames.len();
    if !(onset <= apex && apex <= offset && offset < len) {
        return Err(Error::BadPhaseIndices {
            onset,
            apex,
            offset,
            len,
        });
    }
    if apex == onset {
        return Err(Error::OnsetDegenerate { index: apex });
    }
    if apex == offset {
        return Err(Error::OffsetDegenerate { index: apex });
    }
    let rising = PhaseSegment::new(&seq.frames[onset..=apex], Phase::OnsetApex, &seq.id)?;
    let falling = PhaseSegment::new(&seq.frames[apex..=offset], Phase::ApexOffset, &seq.id)?;
    Ok((rising, falling))
}

pub fn di_onset(seq: &FrameSequence) -> Result<DynamicImage> {
    let (rising, _) = split_phases(seq)?;
    pool(&rising, Direction::Forward)
}

pub fn di_offset(seq: &FrameSequence) -> Result<DynamicImage> {
    let (_, falling) = split_phases(seq)?;
    pool(&falling, Direction::Reversed)
}

/// Forward pooling over every frame of the clip.
pub fn di_full(seq: &FrameSequence) -> Result<DynamicImage> {
    let whole = PhaseSegment::new(&seq.frames, Phase::Full, &seq.id)?;
    pool(&whole, Direction::Forward)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: &[f32]) -> Raster {
        Raster::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn weights_by_hand() {
        assert_eq!(arp_weights(5, Direction::Forward).unwrap(), vec![-4, -2, 0, 2, 4]);
        assert_eq!(arp_weights(5, Direction::Reversed).unwrap(), vec![4, 2, 0, -2, -4]);
        assert_eq!(arp_weights(2, Direction::Forward).unwrap(), vec![-1, 1]);
        assert!(matches!(
            arp_weights(1, Direction::Forward),
            Err(Error::SegmentTooShort { len: 1 })
        ));
        assert!(arp_weights(0, Direction::Reversed).is_err());
    }

    #[test]
    fn two_frames_forward_is_difference() {
        let frames = [frame(&[0.25, 0.5]), frame(&[1.0, 0.125])];
        let seg = PhaseSegment::new(&frames, Phase::OnsetApex, "x").unwrap();
        let di = pool(&seg, Direction::Forward).unwrap();
        assert_eq!(di.raster.data, vec![0.75, -0.375]);
        assert_eq!(di.phase, Phase::OnsetApex);
    }

    #[test]
    fn identical_frames_pool_to_zero() {
        let frames = vec![frame(&[0.3, 0.7, 0.1]); 7];
        let seg = PhaseSegment::new(&frames, Phase::Full, "x").unwrap();
        let di = pool(&seg, Direction::Forward).unwrap();
        assert!(di.raster.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn role_direction_pairing_enforced() {
        let frames = vec![frame(&[0.0]); 3];
        let seg = PhaseSegment::new(&frames, Phase::ApexOffset, "x").unwrap();
        assert!(matches!(
            pool(&seg, Direction::Forward),
            Err(Error::PhaseDirectionMismatch { .. })
        ));
    }

    #[test]
    fn segment_validation() {
        let one = [frame(&[0.0])];
        assert!(PhaseSegment::new(&one, Phase::Full, "x").is_err());
        let mixed = [frame(&[0.0]), frame(&[0.0, 1.0])];
        assert!(matches!(
            PhaseSegment::new(&mixed, Phase::Full, "x"),
            Err(Error::FrameShapeMismatch { index: 1, .. })
        ));
    }

    fn seq(len: usize, onset: usize, apex: usize, offset: usize) -> FrameSequence {
        FrameSequence {
            id: "s".into(),
            frames: (0..len).map(|i| frame(&[i as f32 / len as f32])).collect(),
            subject_id: "s01".into(),
            label: 0,
            onset,
            apex,
            offset,
        }
    }

    #[test]
    fn split_lengths() {
        let s = seq(7, 0, 3, 6);
        let (a, b) = split_phases(&s).unwrap();
        assert_eq!((a.len(), b.len()), (4, 4));
        let s = seq(3, 0, 1, 2);
        let (a, b) = split_phases(&s).unwrap();
        assert_eq!((a.len(), b.len()), (2, 2));
    }

    #[test]
    fn split_degenerate_sides_named() {
        let s = seq(8, 2, 2, 5);
        assert!(matches!(split_phases(&s), Err(Error::OnsetDegenerate { index: 2 })));
        let s = seq(8, 1, 5, 5);
        assert!(matches!(split_phases(&s), Err(Error::OffsetDegenerate { index: 5 })));
        let s = seq(4, 0, 2, 9);
        assert!(matches!(split_phases(&s), Err(Error::BadPhaseIndices { .. })));
    }
}
