//! Seeded synthetic datasets: soft-edged organ layouts and branching
//! vessel trees, written in the standard directory layout.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{load_manifest, DatasetManifest, Mode, Split};
use crate::error::{Error, Result};

/// One generated image with its exact label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image: RgbImage,
    pub mask: GrayImage,
}

fn texture(rng: &mut ChaCha8Rng, size: usize, base: [f64; 3], amp: f64, noise: f64) -> Vec<[f64; 3]> {
    let (fx, fy) = (rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0));
    let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let n = Normal::new(0.0, noise).expect("valid std");
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let t = amp * ((x as f64 / fx + px).sin() * (y as f64 / fy + py).cos());
            let e = n.sample(rng);
            out.push([base[0] + t + e, base[1] + t + e, base[2] + 0.5 * t + e]);
        }
    }
    out
}

fn to_rgb(px: &[[f64; 3]], size: usize) -> RgbImage {
    let raw = px.iter().flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8)).collect();
    RgbImage::from_raw(size as u32, size as u32, raw).expect("buffer matches size")
}

fn organ_color(c: u8) -> [f64; 3] {
    let c = c as f64;
    [40.0 + 24.0 * c, 225.0 - 21.0 * c, 60.0 + 90.0 * ((c * 2.4).sin() + 1.0)]
}

/// 1..=8 ellipses with distinct organ labels; later ellipses occlude
/// earlier ones. Image intensity fades near each edge, the mask is exact.
pub fn organ_image(rng: &mut ChaCha8Rng, size: usize) -> SynthImage {
    let mut px = texture(rng, size, [70.0, 70.0, 70.0], 12.0, 5.0);
    let mut mask = vec![0u8; size * size];
    let mut labels: Vec<u8> = (1..=8).collect();
    labels.shuffle(rng);
    let count = rng.gen_range(1..=8);
    let s = size as f64;
    for &label in &labels[..count] {
        let (cy, cx) = (rng.gen_range(0.15..0.85) * s, rng.gen_range(0.15..0.85) * s);
        let (a, b) = (rng.gen_range(0.08..0.25) * s, rng.gen_range(0.08..0.25) * s);
        let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let color = organ_color(label);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = dx * th.cos() + dy * th.sin();
                let v = -dx * th.sin() + dy * th.cos();
                let d = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                if d <= 1.0 {
                    let i = y * size + x;
                    mask[i] = label;
                    let alpha = ((1.0 - d) / 0.2).min(1.0) * 0.6 + 0.4;
                    for c in 0..3 {
                        px[i][c] = alpha * color[c] + (1.0 - alpha) * px[i][c];
                    }
                }
            }
        }
    }
    SynthImage { image: to_rgb(&px, size), mask: GrayImage::from_raw(size as u32, size as u32, mask).expect("buffer matches size") }
}

struct Tree<'a> {
    size: usize,
    mask: &'a mut [u8],
}

impl Tree<'_> {
    fn inside(&self, y: i64, x: i64) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.size && (x as usize) < self.size
    }

    fn stamp(&mut self, y: i64, x: i64, r: f64) {
        let ri = r.floor() as i64;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dy * dy + dx * dx) as f64) <= r * r && self.inside(y + dy, x + dx) {
                    self.mask[(y + dy) as usize * self.size + (x + dx) as usize] = 1;
                }
            }
        }
    }

    /// Bresenham segment stamped with discs; stops at the image edge.
    fn segment(&mut self, (y0, x0): (i64, i64), (y1, x1): (i64, i64), r: f64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if !self.inside(y, x) {
                return;
            }
            self.stamp(y, x, r);
            if x == x1 && y == y1 {
                return;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn branch(&mut self, rng: &mut ChaCha8Rng, from: (i64, i64), angle: f64, len: f64, r: f64, depth: usize) {
        let to = ((from.0 as f64 + len * angle.sin()).round() as i64, (from.1 as f64 + len * angle.cos()).round() as i64);
        self.segment(from, to, r);
        if depth == 0 || !self.inside(to.0, to.1) {
            return;
        }
        let child_r = if depth <= 2 { 0.0 } else { (r - 0.6).max(0.0) };
        for side in [-1.0, 1.0] {
            let turn = side * rng.gen_range(0.3..0.9);
            let child_len = len * rng.gen_range(0.55..0.8);
            self.branch(rng, to, angle + turn, child_len, child_r, depth - 1);
        }
    }
}

/// A branching tree grown from an interior root in two opposite trunks.
/// Trunks are several pixels wide; the last generations are 1-px lines.
/// Every vessel pixel is 8-connected to the root.
pub fn vessel_image(rng: &mut ChaCha8Rng, size: usize) -> (SynthImage, (usize, usize)) {
    let mut px = texture(rng, size, [170.0, 95.0, 55.0], 14.0, 6.0);
    let mut mask = vec![0u8; size * size];
    let s = size as i64;
    let root = (rng.gen_range(s / 3..=2 * s / 3), rng.gen_range(s / 3..=2 * s / 3));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let len = size as f64 * rng.gen_range(0.25..0.35);
    let mut tree = Tree { size, mask: &mut mask };
    for dir in [0.0, std::f64::consts::PI] {
        tree.branch(rng, root, angle + dir, len, 2.2, 4);
    }
    for (p, &m) in px.iter_mut().zip(&mask) {
        if m == 1 {
            for v in p.iter_mut() {
                *v *= 0.45;
            }
        }
    }
    let image = SynthImage { image: to_rgb(&px, size), mask: GrayImage::from_raw(size as u32, size as u32, mask).expect("buffer matches size") };
    (image, (root.0 as usize, root.1 as usize))
}

/// Writes `n` images of `size x size` under `root/{images,masks}` and
/// returns the loaded manifest. Output is a pure function of the arguments.
pub fn synth_generate(root: &Path, mode: Mode, n: usize, seed: u64, size: usize) -> Result<DatasetManifest> {
    if n == 0 || size < 8 {
        return Err(Error::config(format!("synthetic set needs n > 0 and size >= 8, got n = {n}, size = {size}")));
    }
    for d in ["images", "masks"] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let s = match mode {
            Mode::Organ => organ_image(&mut rng, size),
            Mode::Vessel => vessel_image(&mut rng, size).0,
        };
        let stem = format!("synth_{i:04}");
        let ip = root.join("images").join(format!("{stem}.png"));
        let mp = root.join("masks").join(format!("{stem}.png"));
        s.image.save(&ip).map_err(|e| Error::Image { path: ip.clone(), source: e })?;
        s.mask.save(&mp).map_err(|e| Error::Image { path: mp.clone(), source: e })?;
    }
    load_manifest(root, Split::Train, mode, mode.default_classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn component_size(mask: &[u8], size: usize, start: (usize, usize)) -> usize {
        let mut seen = vec![false; mask.len()];
        let mut stack = vec![start];
        seen[start.0 * size + start.1] = true;
        let mut count = 0;
        while let Some((y, x)) = stack.pop() {
            count += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= size as i64 || nx >= size as i64 {
                        continue;
                    }
                    let i = ny as usize * size + nx as usize;
                    if mask[i] == 1 && !seen[i] {
                        seen[i] = true;
                        stack.push((ny as usize, nx as usize));
                    }
                }
            }
        }
        count
    }

    #[test]
    fn vessel_trees_are_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let (img, root) = vessel_image(&mut rng, 64);
            let m = img.mask.as_raw();
            assert_eq!(m[root.0 * 64 + root.1], 1);
            let total = m.iter().filter(|&&v| v == 1).count();
            assert_eq!(component_size(m, 64, root), total);
        }
    }

    #[test]
    fn organ_labels_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let s = organ_image(&mut rng, 48);
            assert!(s.mask.as_raw().iter().all(|&l| l <= 8));
            assert!(s.mask.as_raw().iter().any(|&l| l > 0));
        }
    }
}
