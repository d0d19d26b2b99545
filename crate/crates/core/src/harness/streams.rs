use std::fmt;

use crate::data::{resize, FrameSequence};
use crate::dynimg::{di_full, di_offset, di_onset, normalize, DynamicImage, NormalizeMode, Phase};
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Turns an (augmented) sequence into the per-stream network inputs.
pub trait StreamInputs: Send + Sync {
    fn name(&self) -> &'static str;

    /// Phases fed to streams 1 and 2, in order.
    fn phases(&self) -> &'static [Phase];

    /// Row label in the input-mode ablation table.
    fn table_label(&self) -> &'static str;

    fn streams(&self) -> usize {
        self.phases().len()
    }

    fn inputs(&self, seq: &FrameSequence, side: Option<usize>) -> Result<Vec<Raster>> {
        let mut out: Vec<Raster> = Vec::with_capacity(self.streams());
        for (i, &phase) in self.phases().iter().enumerate() {
            // dual-full repeats a phase; pool it once
            if let Some(j) = self.phases()[..i].iter().position(|&p| p == phase) {
                out.push(out[j].clone());
                continue;
            }
            out.push(prepare(&dynamic_image(seq, phase)?.raster, side));
        }
        Ok(out)
    }
}

pub fn dynamic_image(seq: &FrameSequence, phase: Phase) -> Result<DynamicImage> {
    match phase {
        Phase::Full => di_full(seq),
        Phase::OnsetApex => di_onset(seq),
        Phase::ApexOffset => di_offset(seq),
    }
}

/// Per-channel min-max normalisation, then bilinear resize to `side × side`.
pub fn prepare(raster: &Raster, side: Option<usize>) -> Raster {
    let n = normalize(raster, NormalizeMode::MinMaxPerChannel);
    match side {
        Some(s) if (s, s) != (n.height, n.width) => resize(&n, s, s),
        _ => n,
    }
}

macro_rules! stream_mode {
    ($ty:ident, $name:literal, $label:literal, [$($phase:ident),+]) => {
        #[derive(Debug, Clone, Copy, Default)]
        pub struct $ty;

        impl $ty {
            pub const NAME: &'static str = $name;
        }

        impl StreamInputs for $ty {
            fn name(&self) -> &'static str {
                Self::NAME
            }

            fn phases(&self) -> &'static [Phase] {
                &[$(Phase::$phase),+]
            }

            fn table_label(&self) -> &'static str {
                $label
            }
        }
    };
}

stream_mode!(DualPhase, "dual-phase", "DI-Onset + DI-Offset", [OnsetApex, ApexOffset]);
stream_mode!(DualFull, "dual-full", "Dynamic image", [Full, Full]);
stream_mode!(SingleFull, "single-full", "Dynamic image", [Full]);
stream_mode!(SingleOnset, "single-onset", "DI-Onset", [OnsetApex]);
stream_mode!(SingleOffset, "single-offset", "DI-Offset", [ApexOffset]);

type Factory = fn() -> Box<dyn StreamInputs>;

/// Name → input-mode constructor.
pub struct StreamRegistry {
    entries: Vec<(&'static str, Factory)>,
}

impl fmt::Debug for StreamRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl Default for StreamRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl StreamRegistry {
    pub fn empty() -> Self {
        StreamRegistry { entries: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(DualPhase::NAME, || Box::new(DualPhase));
        r.register(DualFull::NAME, || Box::new(DualFull));
        r.register(SingleFull::NAME, || Box::new(SingleFull));
        r.register(SingleOnset::NAME, || Box::new(SingleOnset));
        r.register(SingleOffset::NAME, || Box::new(SingleOffset));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn StreamInputs>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "stream mode",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}
