//! WebAssembly bindings for the browser demo in `www/`.

use mcpa::data::synth::{organ_image, vessel_image, SynthImage};
use mcpa::harness::schedule_curves;
use mcpa::pdbs::rce;
use mcpa::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: mcpa::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `f(E)` sampled every `step` epochs over `[0, e1 + 10]`.
#[wasm_bindgen]
pub fn schedule_values(e0: f64, e1: f64, rho: f64, step: f64) -> Result<Vec<f64>, JsError> {
    let c = schedule_curves(e0, e1, &[rho], step).map_err(js)?;
    Ok(c.values.into_iter().next().unwrap_or_default())
}

/// A generated image with its mask and a stand-in confidence map.
#[wasm_bindgen]
pub struct Synth {
    size: usize,
    rgb: Vec<u8>,
    mask: Vec<u8>,
    confidence: Vec<f64>,
}

const PALETTE: [[u8; 3]; 9] =
    [[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]];

fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Foreground indicator smoothed by three 5x5 box passes: highest in the
/// middle of large structures, like a trained branch's response.
pub fn blurred_foreground(mask: &[u8], size: usize) -> Vec<f64> {
    let mut v: Vec<f64> = mask.iter().map(|&m| if m > 0 { 1.0 } else { 0.0 }).collect();
    for _ in 0..3 {
        let prev = v.clone();
        for y in 0..size {
            for x in 0..size {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(2)..(y + 3).min(size) {
                    for xx in x.saturating_sub(2)..(x + 3).min(size) {
                        s += prev[yy * size + xx];
                        n += 1.0;
                    }
                }
                v[y * size + x] = s / n;
            }
        }
    }
    v
}

impl Synth {
    pub fn generate(mode: &str, seed: u64, size: usize) -> mcpa::Result<Self> {
        if !(16..=512).contains(&size) {
            return Err(mcpa::Error::config(format!("size must lie in 16..=512, got {size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let SynthImage { image, mask } = match mode {
            "organ" => organ_image(&mut rng, size),
            "vessel" => vessel_image(&mut rng, size).0,
            _ => return Err(mcpa::Error::config(format!("unknown mode `{mode}` (expected organ or vessel)"))),
        };
        let mask = mask.into_raw();
        let confidence = blurred_foreground(&mask, size);
        Ok(Self { size, rgb: image.into_raw(), mask, confidence })
    }

    /// The image with the `ceil(k * N)` most confident pixels zeroed, and
    /// the number of erased pixels.
    pub fn erase(&self, k: f64) -> mcpa::Result<(Vec<u8>, usize)> {
        let n = self.size * self.size;
        let planes: Vec<f32> = (0..3).flat_map(|c| self.rgb.iter().skip(c).step_by(3).map(|&v| v as f32)).collect();
        let t = Tensor::new(&[1, 3, self.size, self.size], planes)?;
        let (out, idx) = rce(&t, &self.confidence, k)?;
        let d = out.data();
        let rgb: Vec<u8> = (0..n).flat_map(|p| [d[p], d[n + p], d[2 * n + p]].map(|v| v as u8)).collect();
        Ok((rgba(&rgb), idx[0].len()))
    }
}

#[wasm_bindgen]
impl Synth {
    #[wasm_bindgen(constructor)]
    pub fn new(mode: &str, seed: u64, size: usize) -> Result<Synth, JsError> {
        Self::generate(mode, seed, size).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA pixels of the image.
    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.rgb)
    }

    /// RGBA pixels of the label mask, one colour per class.
    pub fn mask_rgba(&self) -> Vec<u8> {
        self.mask
            .iter()
            .flat_map(|&c| {
                let [r, g, b] = PALETTE[c as usize % PALETTE.len()];
                [r, g, b, 255]
            })
            .collect()
    }

    /// RGBA pixels of the confidence map in grey.
    pub fn confidence_rgba(&self) -> Vec<u8> {
        self.confidence
            .iter()
            .flat_map(|&v| {
                let g = (v * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }

    /// RGBA pixels after erasing; the count is read with `erased_count`.
    pub fn erased_rgba(&self, k: f64) -> Result<Vec<u8>, JsError> {
        self.erase(k).map(|(p, _)| p).map_err(js)
    }

    pub fn erased_count(&self, k: f64) -> Result<usize, JsError> {
        self.erase(k).map(|(_, n)| n).map_err(js)
    }

    pub fn classes_present(&self) -> usize {
        let mut seen = [false; 256];
        self.mask.iter().for_each(|&c| seen[c as usize] = true);
        seen.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erase_counts_and_zeroes() {
        let s = Synth::generate("vessel", 3, 48).unwrap();
        let (px, n) = s.erase(0.15).unwrap();
        assert_eq!(n, 346);
        let black = px.chunks(4).filter(|p| p[..3] == [0, 0, 0]).count();
        assert!(black >= 346);
        assert_eq!(px.len(), 48 * 48 * 4);
    }

    #[test]
    fn erased_pixels_are_the_most_confident() {
        let s = Synth::generate("organ", 1, 32).unwrap();
        let (px, n) = s.erase(0.2).unwrap();
        let erased: Vec<usize> = (0..32 * 32).filter(|&p| px[4 * p..4 * p + 3] == [0, 0, 0] && s.rgb[3 * p..3 * p + 3] != [0, 0, 0]).collect();
        assert_eq!(erased.len(), n);
        let lo = erased.iter().map(|&p| s.confidence[p]).fold(f64::INFINITY, f64::min);
        let kept_hi = (0..32 * 32).filter(|p| !erased.contains(p)).map(|p| s.confidence[p]).fold(0.0, f64::max);
        assert!(lo >= kept_hi);
    }

    #[test]
    fn schedule_endpoints() {
        let v = schedule_values(5.0, 25.0, 4.0, 0.5).unwrap();
        assert_eq!(v.len(), 71);
        assert_eq!(v[10], 0.0);
        assert_eq!(v[50], 1.0);
        assert!((v[30] - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn generator_is_seeded_and_checks_input() {
        let a = Synth::generate("organ", 9, 64).unwrap();
        assert_eq!(a.rgb, Synth::generate("organ", 9, 64).unwrap().rgb);
        assert!(a.classes_present() >= 2);
        assert!(Synth::generate("brain", 9, 64).is_err());
        assert!(Synth::generate("organ", 9, 8).is_err());
    }

    #[test]
    fn blur_keeps_range() {
        let mask: Vec<u8> = (0..100).map(|i| (i % 10 > 4) as u8).collect();
        let b = blurred_foreground(&mask, 10);
        assert!(b.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(b[9] > b[0]);
    }
}
