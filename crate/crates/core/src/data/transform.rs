//! Resizing, normalization, patch sampling and label-exact augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

/// Bilinear resize of one `h x w` plane (half-pixel centers, edge clamp).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let at = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    out
}

/// Nearest-neighbour resize (pixel centers).
pub fn resize_nearest<V: Copy>(src: &[V], h: usize, w: usize, oh: usize, ow: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Zero mean, unit standard deviation per channel.
pub fn standardize(s: &mut Sample) {
    let hw = s.h * s.w;
    for plane in s.image.chunks_mut(hw) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let sd = var.sqrt().max(1e-6);
        for v in plane.iter_mut() {
            *v = ((*v as f64 - mean) / sd) as f32;
        }
    }
}

pub fn resize(s: &Sample, oh: usize, ow: usize) -> Sample {
    let image = s.image.chunks(s.h * s.w).flat_map(|p| resize_bilinear(p, s.h, s.w, oh, ow)).collect();
    Sample { h: oh, w: ow, image, mask: resize_nearest(&s.mask, s.h, s.w, oh, ow) }
}

/// Resize to `size x size` and standardize.
pub fn preprocess_organ(s: &Sample, size: usize) -> Sample {
    let mut out = resize(s, size, size);
    standardize(&mut out);
    out
}

pub fn crop(s: &Sample, y: usize, x: usize, size: usize) -> Sample {
    let mut image = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane = s.channel(c);
        for r in y..y + size {
            image.extend_from_slice(&plane[r * s.w + x..r * s.w + x + size]);
        }
    }
    let mut mask = Vec::with_capacity(size * size);
    for r in y..y + size {
        mask.extend_from_slice(&s.mask[r * s.w + x..r * s.w + x + size]);
    }
    Sample { h: size, w: size, image, mask }
}

/// Top-left corners drawn uniformly so every patch lies inside the image.
pub fn patch_corners<R: Rng>(h: usize, w: usize, size: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if h < size || w < size {
        return Err(Error::data(format!("{h}x{w} image is smaller than the {size}x{size} patch")));
    }
    Ok((0..count).map(|_| (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size))).collect())
}

pub fn sample_patches<R: Rng>(s: &Sample, size: usize, count: usize, rng: &mut R) -> Result<Vec<Sample>> {
    Ok(patch_corners(s.h, s.w, size, count, rng)?.into_iter().map(|(y, x)| crop(s, y, x, size)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aug {
    Hflip,
    Vflip,
    Rot90,
    Rot180,
    Rot270,
}

impl Aug {
    pub const ALL: [Aug; 5] = [Aug::Hflip, Aug::Vflip, Aug::Rot90, Aug::Rot180, Aug::Rot270];

    /// Source index for output pixel `(y, x)` of an output `oh x ow` grid
    /// taken from an `h x w` input.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> usize {
        let (sy, sx) = match self {
            Aug::Hflip => (y, w - 1 - x),
            Aug::Vflip => (h - 1 - y, x),
            // Counter-clockwise: output is w x h.
            Aug::Rot90 => (x, w - 1 - y),
            Aug::Rot180 => (h - 1 - y, w - 1 - x),
            Aug::Rot270 => (h - 1 - x, y),
        };
        sy * w + sx
    }

    fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Aug::Rot90 | Aug::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    fn plane<V: Copy>(self, src: &[V], h: usize, w: usize) -> Vec<V> {
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                out.push(src[self.source(y, x, h, w)]);
            }
        }
        out
    }

    pub fn apply(self, s: &Sample) -> Sample {
        let (oh, ow) = self.out_dims(s.h, s.w);
        let image = s.image.chunks(s.h * s.w).flat_map(|p| self.plane(p, s.h, s.w)).collect();
        Sample { h: oh, w: ow, image, mask: self.plane(&s.mask, s.h, s.w) }
    }
}

/// Applies one operation drawn uniformly from the policy plus the identity.
pub fn augment<R: Rng>(s: &Sample, rng: &mut R, policy: &[Aug]) -> Sample {
    let pick = rng.gen_range(0..=policy.len());
    match policy.get(pick) {
        Some(op) => op.apply(s),
        None => s.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Sample {
        let image = (0..3 * h * w).map(|i| i as f32).collect();
        let mask = (0..h * w).map(|i| (i % 3) as u8).collect();
        Sample::new(h, w, image, mask).unwrap()
    }

    #[test]
    fn resize_same_size_is_identity() {
        let s = ramp(5, 7);
        assert_eq!(resize(&s, 5, 7), s);
    }

    #[test]
    fn organ_resize_shape_and_labels() {
        let s = ramp(512, 512);
        let p = preprocess_organ(&s, 224);
        assert_eq!((p.h, p.w, p.image.len(), p.mask.len()), (224, 224, 3 * 224 * 224, 224 * 224));
        assert!(p.mask.iter().all(|&l| l < 3));
        let mean: f64 = p.channel(1).iter().map(|&v| v as f64).sum::<f64>() / (224.0 * 224.0);
        assert!(mean.abs() < 1e-4);
    }

    #[test]
    fn bilinear_midpoint() {
        let out = resize_bilinear(&[0.0, 4.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn patches_are_in_bounds_and_seeded() {
        let s = ramp(60, 70);
        let a = patch_corners(60, 70, 48, 64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = patch_corners(60, 70, 48, 64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&(y, x)| y + 48 <= 60 && x + 48 <= 70));
        let p = sample_patches(&s, 48, 64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(p.len(), 64);
        assert_eq!(p[0].mask.len(), 48 * 48);
        let (y, x) = a[0];
        assert_eq!(p[0].mask[0], s.mask[y * 70 + x]);
        assert!(sample_patches(&ramp(40, 60), 48, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn geometric_ops() {
        let s = ramp(3, 4);
        assert_eq!(Aug::Hflip.apply(&Aug::Hflip.apply(&s)), s);
        assert_eq!(Aug::Vflip.apply(&Aug::Vflip.apply(&s)), s);
        let r = Aug::Rot90.apply(&s);
        assert_eq!((r.h, r.w), (4, 3));
        assert_eq!(Aug::Rot270.apply(&r), s);
        assert_eq!(Aug::Rot90.apply(&r), Aug::Rot180.apply(&s));
        // top-right corner moves to top-left under a counter-clockwise turn
        assert_eq!(r.mask[0], s.mask[3]);
    }

    proptest::proptest! {
        #[test]
        fn geometric_ops_permute_pixels(h in 1usize..7, w in 1usize..7, op in 0usize..5) {
            let s = ramp(h, w);
            let ops = [Aug::Hflip, Aug::Vflip, Aug::Rot90, Aug::Rot180, Aug::Rot270];
            let t = ops[op].apply(&s);
            proptest::prop_assert_eq!(t.h * t.w, h * w);
            let mut a = s.image.clone();
            let mut b = t.image.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            proptest::prop_assert_eq!(a, b);
            let four = (0..4).fold(s.clone(), |x, _| Aug::Rot90.apply(&x));
            proptest::prop_assert_eq!(four, s);
        }

        #[test]
        fn nearest_resize_keeps_label_set(h in 1usize..12, w in 1usize..12, oh in 1usize..30, ow in 1usize..30) {
            let s = ramp(h, w);
            let r = resize_nearest(&s.mask, h, w, oh, ow);
            proptest::prop_assert_eq!(r.len(), oh * ow);
            proptest::prop_assert!(r.iter().all(|l| s.mask.contains(l)));
        }
    }
}
