//! `DIR1` raster files: the 4-byte magic `DIR1`, three little-endian `u32`
//! extents `C, H, W`, then `C·H·W` little-endian `f32` values, channel-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::raster::Raster;

use super::{normalize, NormalizeMode};

pub const DIR1_MAGIC: &[u8; 4] = b"DIR1";

pub fn encode_dir1(raster: &Raster) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * raster.data.len());
    buf.extend_from_slice(DIR1_MAGIC);
    for e in raster.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in &raster.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_dir1(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |message: String| Error::Format {
        format: "DIR1",
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..4] != DIR1_MAGIC {
        return Err(bad("missing DIR1 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| bad("extent overflow".into()))?;
    if bytes.len() != 16 + 4 * n {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            4 * n,
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Raster::new(c, h, w, data).map_err(|e| bad(e.to_string()))
}

pub fn write_dir1(path: &Path, raster: &Raster) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_dir1(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_dir1(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dir1(&bytes, path)
}

/// 8-bit PNG of the min-max normalised raster (grey for one channel, RGB
/// for three).
pub fn export_png(path: &Path, raster: &Raster, mode: NormalizeMode) -> Result<()> {
    let n = normalize(raster, mode);
    let (h, w) = (n.height as u32, n.width as u32);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let res = match n.channels {
        1 => GrayImage::from_fn(w, h, |x, y| image::Luma([q(n.at(0, y as usize, x as usize))])).save(path),
        3 => {
            ImageBuffer::<Rgb<u8>, _>::from_fn(w, h, |x, y| Rgb([0, 1, 2].map(|c| q(n.at(c, y as usize, x as usize)))))
                .save(path)
        }
        c => {
            return Err(Error::InvalidArgument(format!(
                "PNG export supports 1 or 3 channels, got {c}"
            )))
        }
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let r = Raster::new(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let b = encode_dir1(&r);
        assert_eq!(&b[..4], b"DIR1");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn truncated_payload_rejected() {
        let r = Raster::new(1, 2, 2, vec![0.0; 4]).unwrap();
        let mut b = encode_dir1(&r);
        b.pop();
        assert!(decode_dir1(&b, Path::new("x")).is_err());
        assert!(decode_dir1(b"DIRX", Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn dir1_roundtrip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::seed::rng_for(seed, "dir1");
            let data = (0..c * h * w).map(|_| rng.random_range(-50.0f32..50.0)).collect();
            let r = Raster::new(c, h, w, data).unwrap();
            let back = decode_dir1(&encode_dir1(&r), Path::new("mem")).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
