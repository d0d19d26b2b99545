//! Synthetic micro-expression clips.
//!
//! Frame `t` of a sample is
//! `base_subject + amplitude · m(t) · pattern_class + noise`, where `m` is an
//! asymmetric Gaussian bell peaking at the apex. The subject texture is
//! static, so every zero-sum pooling removes it exactly and the resulting
//! dynamic images separate the classes by pattern alone.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::seed::rng_for;

use super::{Dataset, FrameSequence};

/// Motion below this fraction of the peak counts as neutral when placing
/// onset and offset.
const ONSET_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub n_classes: usize,
    /// Frame height and width.
    pub frame_size: usize,
    pub sequence_length: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 10,
            samples_per_subject: 20,
            n_classes: 3,
            frame_size: 16,
            sequence_length: 12,
            noise_std: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(format!("synth config: {m}")));
        if self.n_classes < 2 {
            return fail("n_classes must be >= 2");
        }
        if self.sequence_length < 5 {
            return fail("sequence_length must be >= 5");
        }
        if self.frame_size < 8 {
            return fail("frame_size must be >= 8");
        }
        if self.n_subjects == 0 || self.samples_per_subject == 0 {
            return fail("need at least one subject and one sample per subject");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative");
        }
        Ok(())
    }
}

/// Per-sample generative parameters, exposed for analytic checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthLatent {
    pub amplitude: f64,
    /// Gaussian width of the rising flank, in frames.
    pub rise: f64,
    /// Gaussian width of the falling flank, in frames.
    pub fall: f64,
}

/// Asymmetric bell, 1 at the apex.
pub fn bell_profile(t: usize, apex: usize, latent: &SynthLatent) -> f64 {
    let d = t as f64 - apex as f64;
    let width = if d < 0.0 { latent.rise } else { latent.fall };
    (-0.5 * (d / width).powi(2)).exp()
}

/// Class-specific motion pattern, peak magnitude 1. Class `k` has polarity
/// `(-1)^k` and shape `(k / 2) % 4`: a Gaussian blob, a vertical dipole, a
/// ring, or a quadrupole, all under the same Gaussian envelope. Every shape
/// is symmetric about the vertical midline, so a horizontal flip leaves it
/// unchanged.
pub fn class_pattern(cfg: &SynthConfig, class: usize) -> Raster {
    let s = cfg.frame_size as f64;
    let polarity = if class.is_multiple_of(2) { 1.0 } else { -1.0 };
    let cy = (s - 1.0) / 2.0;
    let cx = (s - 1.0) / 2.0;
    let sigma = s / 5.0;
    let n = cfg.frame_size;
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let (dy, dx) = (((i / n) as f64 - cy) / sigma, ((i % n) as f64 - cx) / sigma);
            let r2 = dy * dy + dx * dx;
            let envelope = (-r2 / 2.0).exp();
            let shape = match (class / 2) % 4 {
                0 => 1.0,
                1 => dy,
                2 => 1.0 - r2 / 2.0,
                _ => dx * dx - dy * dy,
            };
            polarity * envelope * shape
        })
        .collect();
    let peak = raw.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    Raster::new(1, n, n, raw.iter().map(|v| (v / peak) as f32).collect()).expect("square pattern")
}

fn subject_texture<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.1..0.6),
                rng.random_range(0.1..0.6),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let smooth: f64 = waves
                .iter()
                .map(|&(fy, fx, ph)| (fy * y + fx * x + ph).sin())
                .sum::<f64>()
                / 3.0;
            0.475 + 0.075 * smooth + rng.random_range(-0.05..0.05)
        })
        .collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    synth_generate_with_latents(cfg).map(|(ds, _)| ds)
}

/// Deterministic in `cfg`: every random draw comes from a stream keyed by
/// the seed and the subject/sample index.
pub fn synth_generate_with_latents(cfg: &SynthConfig) -> Result<(Dataset, Vec<SynthLatent>)> {
    cfg.validate()?;
    let n = cfg.frame_size;
    let len = cfg.sequence_length;
    let patterns: Vec<Raster> = (0..cfg.n_classes).map(|k| class_pattern(cfg, k)).collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let apex_lo = (len / 4).max(1);
    let apex_hi = (len - 1 - (len / 3).max(1)).max(apex_lo);
    let reach = (2.0 * (1.0 / ONSET_THRESHOLD).ln()).sqrt();

    let mut sequences = Vec::with_capacity(cfg.n_subjects * cfg.samples_per_subject);
    let mut latents = Vec::with_capacity(sequences.capacity());
    for s in 0..cfg.n_subjects {
        let subject_id = format!("s{:02}", s + 1);
        let base = subject_texture(n, &mut rng_for(cfg.seed, &format!("texture/{subject_id}")));
        for i in 0..cfg.samples_per_subject {
            let mut rng = rng_for(cfg.seed, &format!("sample/{subject_id}/{i}"));
            let label = i % cfg.n_classes;
            let latent = SynthLatent {
                amplitude: rng.random_range(0.22..0.3),
                rise: rng.random_range(1.0..1.6),
                fall: rng.random_range(1.4..2.4),
            };
            let apex = rng.random_range(apex_lo..=apex_hi);
            let onset = apex.saturating_sub((latent.rise * reach).ceil() as usize).min(apex - 1);
            let offset = (apex + (latent.fall * reach).ceil() as usize)
                .min(len - 1)
                .max(apex + 1);
            let pattern = &patterns[label];
            let frames = (0..len)
                .map(|t| {
                    let m = latent.amplitude * bell_profile(t, apex, &latent);
                    let data = base
                        .iter()
                        .zip(&pattern.data)
                        .map(|(&b, &p)| {
                            let mut v = b + m * f64::from(p);
                            if cfg.noise_std > 0.0 {
                                v += noise.sample(&mut rng);
                            }
                            v.clamp(0.0, 1.0) as f32
                        })
                        .collect();
                    Raster::new(1, n, n, data).expect("square frame")
                })
                .collect();
            sequences.push(FrameSequence {
                id: format!("{subject_id}/e{:02}", i + 1),
                frames,
                subject_id: subject_id.clone(),
                label,
                onset,
                apex,
                offset,
            });
            latents.push(latent);
        }
    }
    let class_names = (0..cfg.n_classes).map(|k| format!("class{k}")).collect();
    Ok((Dataset { sequences, class_names }, latents))
}
