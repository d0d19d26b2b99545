//! Dynamic images by approximate rank pooling.
//!
//! A dynamic image is the weighted frame sum `Σ_t w_t · F_t` with the
//! linear, zero-sum weights `w_t = 2t − T − 1` (forward) or their mirror
//! `w_t = T + 1 − 2t` (reversed), `t = 1..T`. The phase-aware variants pool
//! the onset→apex segment forward and the apex→offset segment reversed, so
//! both put their largest weight next to the apex.

mod io;
mod normalize;
mod pool;

pub use io::{decode_dir1, encode_dir1, export_png, read_dir1, write_dir1, DIR1_MAGIC};
pub use normalize::{normalize, NormalizeMode};
pub use pool::{
    arp_weights, di_full, di_offset, di_onset, pool, split_phases, Direction, DynamicImage, Phase, PhaseSegment,
};
