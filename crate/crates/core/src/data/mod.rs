//! Annotated frame sequences: on-disk corpora, a synthetic generator,
//! augmentation and leave-one-subject-out splits.

mod augment;
mod loso;
mod manifest;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::raster::Raster;

pub use augment::{augment, hflip, resize, rotate, AugmentDraw, AugmentOp, MAX_ROTATION_DEG};
pub use loso::{check_fold, loso_splits, Fold, VAL_FRACTION};
pub use manifest::{
    load_dataset, load_manifest, load_sequence, write_dataset, DatasetManifest, ManifestEntry, MANIFEST_HEADER,
};
pub use synth::{bell_profile, class_pattern, synth_generate, synth_generate_with_latents, SynthConfig, SynthLatent};

/// One annotated clip. Indices are positions in `frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<Raster>,
    pub subject_id: String,
    pub label: usize,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
}

impl FrameSequence {
    pub fn frame_shape(&self) -> Option<[usize; 3]> {
        self.frames.first().map(Raster::shape)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub sequences: Vec<FrameSequence>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.sequences.iter().map(|s| s.subject_id.as_str()).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.sequences {
            if s.label < counts.len() {
                counts[s.label] += 1;
            }
        }
        counts
    }

    /// Drops classes with fewer than `min_count` samples and renumbers the
    /// survivors contiguously in their original order.
    pub fn filter_min_class_count(self, min_count: usize) -> Dataset {
        let counts = self.class_counts();
        let mut remap = BTreeMap::new();
        let mut names = Vec::new();
        for (label, name) in self.class_names.iter().enumerate() {
            if counts[label] >= min_count {
                remap.insert(label, names.len());
                names.push(name.clone());
            }
        }
        let sequences = self
            .sequences
            .into_iter()
            .filter_map(|mut s| {
                remap.get(&s.label).map(|&l| {
                    s.label = l;
                    s
                })
            })
            .collect();
        Dataset {
            sequences,
            class_names: names,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(label: usize) -> FrameSequence {
        FrameSequence {
            id: format!("x{label}"),
            frames: vec![],
            subject_id: "s".into(),
            label,
            onset: 0,
            apex: 0,
            offset: 0,
        }
    }

    #[test]
    fn class_filter_renumbers() {
        let ds = Dataset {
            sequences: vec![seq(0), seq(1), seq(1), seq(2), seq(2), seq(2)],
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let f = ds.filter_min_class_count(2);
        assert_eq!(f.class_names, vec!["b", "c"]);
        assert_eq!(
            f.sequences.iter().map(|s| s.label).collect::<Vec<_>>(),
            vec![0, 0, 1, 1, 1]
        );
    }
}
