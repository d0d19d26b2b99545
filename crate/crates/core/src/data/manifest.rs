//! On-disk corpora: `manifest.csv` with header `dir,subject,label,onset,apex,offset`,
//! one folder of numbered frame images per row, and an optional
//! `classes.txt` (one class name per line) next to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

use super::{Dataset, FrameSequence};

pub const MANIFEST_HEADER: [&str; 6] = ["dir", "subject", "label", "onset", "apex", "offset"];
const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub subject: String,
    pub label: usize,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bad = |message: String| Error::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => bad(e.to_string()),
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(bad(format!(
            "expected header `{}`, found `{}`",
            MANIFEST_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = Vec::new();
    for (row, rec) in reader.deserialize::<ManifestEntry>().enumerate() {
        let e = rec?;
        if e.subject.is_empty() {
            return Err(bad(format!("row {}: empty subject id", row + 1)));
        }
        entries.push(e);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let classes_path = root.join(CLASSES_FILE);
    let class_names = if classes_path.is_file() {
        fs::read_to_string(&classes_path)
            .map_err(|e| Error::io(&classes_path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        let n = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        (0..n).map(|i| i.to_string()).collect::<Vec<_>>()
    };
    if let Some(e) = entries.iter().find(|e| e.label >= class_names.len()) {
        return Err(bad(format!(
            "label {} of {} exceeds the {} declared classes",
            e.label,
            e.dir,
            class_names.len()
        )));
    }
    Ok(DatasetManifest {
        root,
        entries,
        class_names,
    })
}

fn is_frame_file(p: &Path) -> Option<u64> {
    let ext = p.extension()?.to_str()?.to_ascii_lowercase();
    if !matches!(ext.as_str(), "png" | "pgm" | "ppm" | "pnm") {
        return None;
    }
    p.file_stem()?.to_str()?.parse().ok()
}

fn decode_frame(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c];
            }
        }
        Raster::new(3, h, w, data)
    } else {
        Raster::new(1, h, w, img.to_luma32f().into_raw())
    }
}

/// Reads the frames of one manifest row; frame files are numbered images
/// (`0000.png`, `0001.pgm`, ...) with no gaps.
pub fn load_sequence(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<FrameSequence> {
    let dir = manifest.root.join(&entry.dir);
    if !dir.is_dir() {
        return Err(Error::MissingFrame(dir));
    }
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter_map(|p| is_frame_file(&p).map(|n| (n, p)))
        .collect();
    files.sort();
    for (i, pair) in files.windows(2).enumerate() {
        if pair[1].0 != pair[0].0 + 1 {
            let missing = dir.join(format!("{:04}.png", pair[0].0 + 1));
            log::debug!("gap after frame {i} in {}", dir.display());
            return Err(Error::MissingFrame(missing));
        }
    }
    let len = files.len();
    for (what, index) in [("onset", entry.onset), ("apex", entry.apex), ("offset", entry.offset)] {
        if index >= len {
            return Err(Error::IndexOutOfRange {
                what,
                index,
                len,
                path: dir,
            });
        }
    }
    if !(entry.onset <= entry.apex && entry.apex <= entry.offset) {
        return Err(Error::BadPhaseIndices {
            onset: entry.onset,
            apex: entry.apex,
            offset: entry.offset,
            len,
        });
    }
    let frames = files.iter().map(|(_, p)| decode_frame(p)).collect::<Result<Vec<_>>>()?;
    if let Some(first) = frames.first() {
        let expected = first.shape();
        if let Some((index, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != expected) {
            return Err(Error::FrameShapeMismatch {
                index,
                expected,
                found: f.shape(),
            });
        }
    }
    Ok(FrameSequence {
        id: entry.dir.clone(),
        frames,
        subject_id: entry.subject.clone(),
        label: entry.label,
        onset: entry.onset,
        apex: entry.apex,
        offset: entry.offset,
    })
}

/// Loads every row; fails on the first bad sequence.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let sequences = manifest
        .entries
        .iter()
        .map(|e| load_sequence(manifest, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        sequences,
        class_names: manifest.class_names.clone(),
    })
}

fn save_frame(path: &Path, r: &Raster) -> Result<()> {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let (w, h) = (r.width as u32, r.height as u32);
    let res = match r.channels {
        1 => ImageBuffer::<Luma<u16>, _>::from_fn(w, h, |x, y| Luma([q(r.at(0, y as usize, x as usize))])).save(path),
        3 => {
            ImageBuffer::<Rgb<u16>, _>::from_fn(w, h, |x, y| Rgb([0, 1, 2].map(|c| q(r.at(c, y as usize, x as usize)))))
                .save(path)
        }
        c => {
            return Err(Error::InvalidArgument(format!(
                "frames must have 1 or 3 channels to be written, got {c}"
            )))
        }
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a corpus in the manifest layout (16-bit PNG frames), so
/// synthetic and real data load through the same path.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join("manifest.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&manifest_path)?;
    w.write_record(MANIFEST_HEADER)?;
    for seq in &dataset.sequences {
        let dir = out_dir.join(&seq.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, f) in seq.frames.iter().enumerate() {
            save_frame(&dir.join(format!("{i:04}.png")), f)?;
        }
        w.serialize(ManifestEntry {
            dir: seq.id.clone(),
            subject: seq.subject_id.clone(),
            label: seq.label,
            onset: seq.onset,
            apex: seq.apex,
            offset: seq.offset,
        })?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    let classes = out_dir.join(CLASSES_FILE);
    fs::write(&classes, dataset.class_names.join("\n") + "\n").map_err(|e| Error::io(&classes, e))?;
    Ok(manifest_path)
}
