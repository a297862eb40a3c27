//! Dataset layout, sample loading and batching.
//!
//! A dataset root holds `images/<stem>.png` and `masks/<stem>.png`, paired
//! by stem. An optional `manifest.txt` lists explicit pairs instead, one
//! `image mask` pair of root-relative paths per line (`#` starts a comment).

pub mod synth;
pub mod transform;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LabelMap;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Multi-organ, 9 classes.
    #[default]
    Organ,
    /// Binary vessel segmentation on patches.
    Vessel,
}

impl Mode {
    pub fn default_classes(self) -> usize {
        match self {
            Mode::Organ => 9,
            Mode::Vessel => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub mode: Mode,
    pub num_classes: usize,
    /// `(image, mask)` paths in lexicographic stem order.
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<Sample> {
        let (img, mask) = &self.pairs[i];
        let s = Sample::read(img, mask)?;
        check_labels(&s.mask, self.num_classes, mask)?;
        Ok(s)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn check_labels(mask: &[u8], k: usize, path: &Path) -> Result<()> {
    match mask.iter().find(|&&l| l as usize >= k) {
        Some(l) => Err(Error::data(format!("{}: label {l} overflows class count {k}", path.display()))),
        None => Ok(()),
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs images with masks under `root` (or `root/<split>` when that
/// directory exists) and validates every mask against `num_classes`.
pub fn load_manifest(root: &Path, split: Split, mode: Mode, num_classes: usize) -> Result<DatasetManifest> {
    let split_dir = root.join(split.dir_name());
    let dir = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
    let list = dir.join("manifest.txt");
    let pairs = if list.is_file() {
        let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::data(format!("{}:{}: expected `image mask`", list.display(), n + 1)));
            }
            pairs.push((dir.join(parts[0]), dir.join(parts[1])));
        }
        let missing: Vec<String> = pairs.iter().flat_map(|(a, b)| [a, b]).filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
        if !missing.is_empty() {
            return Err(Error::data(format!("manifest lists missing files: {}", missing.join(", "))));
        }
        pairs
    } else {
        let images = png_stems(&dir.join("images"))?;
        let masks = png_stems(&dir.join("masks"))?;
        let mut orphans: Vec<String> = images.keys().filter(|s| !masks.contains_key(*s)).map(|s| format!("image {s}")).collect();
        orphans.extend(masks.keys().filter(|s| !images.contains_key(*s)).map(|s| format!("mask {s}")));
        if !orphans.is_empty() {
            return Err(Error::data(format!("unpaired files: {}", orphans.join(", "))));
        }
        images.into_iter().map(|(s, p)| (p, masks[&s].clone())).collect()
    };
    if pairs.is_empty() {
        return Err(Error::data(format!("no image/mask pairs under {}", dir.display())));
    }
    let m = DatasetManifest { root: dir, split, mode, num_classes, pairs };
    for (img, mask) in &m.pairs {
        let l = image::open(mask).map_err(|e| Error::Image { path: mask.clone(), source: e })?.to_luma8();
        check_labels(l.as_raw(), num_classes, mask)?;
        if !img.is_file() {
            return Err(Error::data(format!("unreadable image {}", img.display())));
        }
    }
    Ok(m)
}

/// One image (`[3, H, W]` planes, row-major) with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub h: usize,
    pub w: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(h: usize, w: usize, image: Vec<f32>, mask: Vec<u8>) -> Result<Self> {
        if image.len() != 3 * h * w || mask.len() != h * w {
            return Err(Error::shape(format!("sample {h}x{w} needs {} image and {} mask values", 3 * h * w, h * w)));
        }
        Ok(Self { h, w, image, mask })
    }

    /// Reads an 8-bit PNG pair; grayscale images are replicated to three
    /// channels and masks are read as single-channel labels.
    pub fn read(image_path: &Path, mask_path: &Path) -> Result<Self> {
        let img = image::open(image_path).map_err(|e| Error::Image { path: image_path.to_path_buf(), source: e })?.to_rgb8();
        let mask = image::open(mask_path).map_err(|e| Error::Image { path: mask_path.to_path_buf(), source: e })?.to_luma8();
        if img.dimensions() != mask.dimensions() {
            return Err(Error::data(format!("{} and {} differ in size", image_path.display(), mask_path.display())));
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::new(h, w, planar(img.as_raw(), h * w), mask.into_raw())
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.image[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// Interleaved RGB bytes to `[3, H, W]` planes.
pub fn planar(rgb: &[u8], pixels: usize) -> Vec<f32> {
    let mut out = vec![0.0; 3 * pixels];
    for (p, px) in rgb.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * pixels + p] = px[c] as f32;
        }
    }
    out
}

/// Images `[N, 3, h, w]` and labels `[N, h, w]`.
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: LabelMap,
}

pub fn collate<T: Scalar>(samples: &[Sample]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::data("empty batch"))?;
    let (h, w) = (first.h, first.w);
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut lab = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.h, s.w) != (h, w) {
            return Err(Error::shape(format!("batch mixes {h}x{w} and {}x{} samples", s.h, s.w)));
        }
        img.extend(s.image.iter().map(|&v| T::of(v as f64)));
        lab.extend_from_slice(&s.mask);
    }
    Ok(Batch { images: Tensor::new(&[samples.len(), 3, h, w], img)?, labels: LabelMap::new(samples.len(), h, w, lab)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, stem: &str, label: u8) {
        fs::create_dir_all(dir.join("images")).unwrap();
        fs::create_dir_all(dir.join("masks")).unwrap();
        image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30])).save(dir.join(format!("images/{stem}.png"))).unwrap();
        image::GrayImage::from_pixel(4, 4, image::Luma([label])).save(dir.join(format!("masks/{stem}.png"))).unwrap();
    }

    #[test]
    fn pairs_by_stem() {
        let d = tempfile::tempdir().unwrap();
        for s in ["c", "a", "b"] {
            write_pair(d.path(), s, 1);
        }
        let m = load_manifest(d.path(), Split::Train, Mode::Organ, 9).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.pairs[0].0.ends_with("images/a.png"));
        let s = m.load(2).unwrap();
        assert_eq!((s.h, s.w), (4, 4));
        assert_eq!(s.channel(2)[0], 30.0);
    }

    #[test]
    fn orphan_is_named() {
        let d = tempfile::tempdir().unwrap();
        write_pair(d.path(), "b", 1);
        image::RgbImage::new(4, 4).save(d.path().join("images/a.png")).unwrap();
        let e = load_manifest(d.path(), Split::Train, Mode::Organ, 9).unwrap_err().to_string();
        assert!(e.contains("image a"), "{e}");
    }

    #[test]
    fn label_overflow() {
        let d = tempfile::tempdir().unwrap();
        write_pair(d.path(), "a", 9);
        let e = load_manifest(d.path(), Split::Train, Mode::Organ, 9).unwrap_err().to_string();
        assert!(e.contains("label 9 overflows"), "{e}");
        assert!(load_manifest(d.path(), Split::Train, Mode::Organ, 10).is_ok());
    }

    #[test]
    fn explicit_manifest_file() {
        let d = tempfile::tempdir().unwrap();
        write_pair(d.path(), "x", 0);
        write_pair(d.path(), "y", 0);
        fs::write(d.path().join("manifest.txt"), "# subset\nimages/y.png masks/y.png\n").unwrap();
        let m = load_manifest(d.path(), Split::Train, Mode::Vessel, 2).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.pairs[0].0.ends_with("images/y.png"));
    }
}
