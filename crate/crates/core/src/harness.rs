//! Command implementations behind the `mcpa` binary: evaluation reports,
//! mask prediction, schedule curves and synthetic data.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synth::synth_generate;
use crate::data::transform::{preprocess_organ, resize_bilinear, standardize};
use crate::data::{planar, DatasetManifest, Mode, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::pdbs::{fused_labels, schedule_f, ScheduleParams};
use crate::tensor::Scalar;
use crate::train::{load_model, load_split, Model, Network, PredMaps};

/// Class count of the classifier stored in a checkpoint.
pub fn checkpoint_classes<T: Scalar>(c: &Checkpoint<T>) -> Option<usize> {
    c.params.iter().find(|(n, _)| n.ends_with("head/classify/weight")).map(|(_, t)| t.shape()[0])
}

/// Model from `ckpt`, refusing checkpoints whose classifier does not match
/// the configured class count.
pub fn open_model<T: Scalar>(cfg: &RunConfig, ckpt: &Path) -> Result<Model<T>> {
    let c = Checkpoint::<T>::load(ckpt)?;
    match checkpoint_classes(&c) {
        Some(k) if k != cfg.model.num_classes => {
            return Err(Error::config(format!("checkpoint {} predicts {k} classes but the dataset has {}", ckpt.display(), cfg.model.num_classes)))
        }
        None => return Err(Error::Checkpoint(format!("{} has no classifier head", ckpt.display()))),
        _ => {}
    }
    load_model(cfg, ckpt)
}

/// Evaluates `ckpt` on a split and writes `eval_<split>.csv` under the
/// output directory, one block of rows per prediction map.
pub fn run_eval<T: Scalar>(cfg: &RunConfig, ckpt: &Path, split: Split) -> Result<(PathBuf, Vec<(String, EvalReport)>)> {
    let model = open_model::<T>(cfg, ckpt)?;
    let samples = load_split(cfg, split)?;
    if samples.is_empty() {
        return Err(Error::data(format!("no {} samples", split.dir_name())));
    }
    let reports = model.evaluate(&samples)?;
    fs::create_dir_all(&cfg.run.out_dir).map_err(|e| Error::io(&cfg.run.out_dir, e))?;
    let path = cfg.run.out_dir.join(format!("eval_{}.csv", split.dir_name()));
    let mut buf = Vec::new();
    for (i, (name, r)) in reports.iter().enumerate() {
        let mut part = Vec::new();
        r.write_csv(&mut part, name)?;
        let text = String::from_utf8(part).expect("csv is utf-8");
        // header once
        let body = if i == 0 { text.as_str() } else { text.split_once('\n').map_or("", |(_, b)| b) };
        buf.extend_from_slice(body.as_bytes());
    }
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok((path, reports))
}

/// Reads an 8-bit image as `[3, H, W]` planes.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, planar(img.as_raw(), h * w)))
}

/// Probability maps for a raw image at its original size. Organ inputs are
/// resized to the network size and the class maps resized back.
pub fn predict_image<T: Scalar>(model: &Model<T>, h: usize, w: usize, image: Vec<f32>) -> Result<PredMaps> {
    let s = Sample::new(h, w, image, vec![0; h * w])?;
    let cfg = &model.cfg;
    match cfg.data.mode {
        Mode::Vessel => {
            let mut s = s;
            standardize(&mut s);
            model.predict(&s)
        }
        Mode::Organ => {
            let size = cfg.data.image_size;
            let p = model.predict(&preprocess_organ(&s, size))?;
            if (h, w) == (size, size) {
                return Ok(p);
            }
            let k = p.k;
            let back = |m: &[f64]| -> Vec<f64> {
                let planes: Vec<Vec<f32>> =
                    (0..k).map(|c| resize_bilinear(&m.iter().skip(c).step_by(k).map(|&v| v as f32).collect::<Vec<_>>(), size, size, h, w)).collect();
                (0..h * w).flat_map(|i| planes.iter().map(move |pl| pl[i] as f64)).collect()
            };
            let main = back(&p.main);
            let fine = p.fine.as_deref().map(back);
            let fusion = if fine.is_some() { cfg.schedule.fusion } else { crate::pdbs::Fusion::Main };
            let other = fine.as_ref().unwrap_or(&main);
            let fused = crate::pdbs::fuse_probs(&main, other, fusion);
            let labels = fused_labels(&main, other, k, fusion);
            Ok(PredMaps { h, w, k, main, fine, fused, labels })
        }
    }
}

fn save_mask(path: &Path, h: usize, w: usize, labels: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, labels.to_vec()).expect("label buffer matches size");
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Collects PNG files: `input` itself, or the PNGs directly inside it.
pub fn image_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::data(format!("no PNG images in {}", input.display())));
        }
        Ok(v)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

/// Writes label masks for every input under `out`: `<stem>_mask.png` for a
/// single-branch model, `<stem>_{main,fine,fused}.png` for the dual-branch
/// one, and with `probs` one 8-bit map per class, `<stem>_prob<c>.png`.
pub fn run_predict<T: Scalar>(model: &Model<T>, inputs: &[PathBuf], out: &Path, probs: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for path in inputs {
        let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::data(format!("bad file name {}", path.display())))?;
        let (h, w, img) = read_image(path)?;
        let p = predict_image(model, h, w, img)?;
        let mut emit = |suffix: &str, labels: &[u8]| -> Result<()> {
            let f = out.join(format!("{stem}_{suffix}.png"));
            save_mask(&f, h, w, labels)?;
            written.push(f);
            Ok(())
        };
        match &model.net {
            Network::Single(_) => emit("mask", &p.labels)?,
            Network::Dual(_) => {
                emit("main", &p.main_labels())?;
                emit("fine", &p.fine_labels().expect("dual network has a fine map"))?;
                emit("fused", &p.labels)?;
            }
        }
        if probs {
            for c in 0..p.k {
                let f = out.join(format!("{stem}_prob{c}.png"));
                let bytes: Vec<u8> = p.fused.iter().skip(c).step_by(p.k).map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
                let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([bytes[y as usize * w + x as usize]]));
                img.save(&f).map_err(|e| Error::Image { path: f.clone(), source: e })?;
                written.push(f);
            }
        }
    }
    Ok(written)
}

/// `f(E)` on an integer-spaced grid `E = 0, step, ..., E1 + 10` for each ρ.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleCurves {
    pub e0: f64,
    pub e1: f64,
    pub rhos: Vec<f64>,
    pub epochs: Vec<f64>,
    /// `values[i][j]` is `f(epochs[j])` for `rhos[i]`.
    pub values: Vec<Vec<f64>>,
}

pub fn schedule_curves(e0: f64, e1: f64, rhos: &[f64], step: f64) -> Result<ScheduleCurves> {
    if rhos.is_empty() || !(step > 0.0) {
        return Err(Error::config("schedule plot needs at least one rho and a positive step"));
    }
    let end = e1 + 10.0;
    let n = (end / step).floor() as usize;
    let epochs: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    let mut values = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let p = ScheduleParams { e0, e1, rho, ..ScheduleParams::default() };
        p.validate()?;
        values.push(epochs.iter().map(|&e| schedule_f(e, &p)).collect());
    }
    Ok(ScheduleCurves { e0, e1, rhos: rhos.to_vec(), epochs, values })
}

impl ScheduleCurves {
    /// Columns `epoch, rho=<ρ>...`, values in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch");
        for r in &self.rhos {
            s.push_str(&format!(",rho={r}"));
        }
        s.push('\n');
        for (j, e) in self.epochs.iter().enumerate() {
            s.push_str(&e.to_string());
            for v in &self.values {
                s.push_str(&format!(",{}", v[j]));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const M: f64 = 48.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
        let xmax = *self.epochs.last().expect("nonempty grid");
        let x = |e: f64| M + (W - 2.0 * M) * e / xmax;
        let y = |f: f64| H - M - (H - 2.0 * M) * f;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        s.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
        s.push_str(&format!("<line x1=\"{M}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n", y(0.0), W - M));
        s.push_str(&format!("<line x1=\"{M}\" y1=\"{}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n", y(0.0), y(1.0)));
        for e in [self.e0, self.e1] {
            s.push_str(&format!("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n", x(e), y(0.0), y(1.0)));
        }
        s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch E</text>\n", W / 2.0, H - 12.0));
        s.push_str(&format!("<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">f(E)</text>\n", H / 2.0, H / 2.0));
        for (i, (rho, v)) in self.rhos.iter().zip(&self.values).enumerate() {
            let c = COLORS[i % COLORS.len()];
            let pts: Vec<String> = self.epochs.iter().zip(v).map(|(&e, &f)| format!("{:.2},{:.2}", x(e), y(f))).collect();
            s.push_str(&format!("<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>\n", pts.join(" ")));
            s.push_str(&format!("<text x=\"{}\" y=\"{}\" fill=\"{c}\">rho = {rho}</text>\n", W - M - 70.0, M + 16.0 * i as f64));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Writes `schedule.csv` and `schedule.svg` under `out`.
pub fn run_schedule_plot(curves: &ScheduleCurves, out: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join("schedule.csv");
    let svg = out.join("schedule.svg");
    fs::write(&csv, curves.to_csv()).map_err(|e| Error::io(&csv, e))?;
    fs::write(&svg, curves.to_svg()).map_err(|e| Error::io(&svg, e))?;
    Ok((csv, svg))
}

/// Synthetic train/val/test splits under `out/{train,val,test}` from the
/// configured generator settings.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<DatasetManifest>> {
    let d = &cfg.data;
    [(Split::Train, 0u64, d.synth.count), (Split::Val, 1, (d.synth.count / 4).max(2)), (Split::Test, 2, (d.synth.count / 4).max(2))]
        .into_iter()
        .map(|(split, off, n)| synth_generate(&out.join(split.dir_name()), d.mode, n, d.synth.seed.wrapping_add(off), d.synth.size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_curve_and_boundaries() {
        let c = schedule_curves(2.0, 12.0, &[1.0, 2.0, 4.0, 8.0], 0.5).unwrap();
        assert_eq!(*c.epochs.last().unwrap(), 22.0);
        let i0 = c.epochs.iter().position(|&e| e == 2.0).unwrap();
        let i1 = c.epochs.iter().position(|&e| e == 12.0).unwrap();
        for v in &c.values {
            assert_eq!(v[i0], 0.0);
            assert_eq!(v[i1], 1.0);
        }
        for (e, f) in c.epochs.iter().zip(&c.values[0]) {
            let want = ((e - 2.0) / 10.0).clamp(0.0, 1.0);
            assert!((f - want).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_round_trips() {
        let c = schedule_curves(0.0, 40.0, &[1.0, 4.0], 1.0).unwrap();
        let text = c.to_csv();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,rho=1,rho=4");
        for (j, line) in lines.enumerate() {
            let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(cols[0], c.epochs[j]);
            for (i, &rho) in c.rhos.iter().enumerate() {
                let p = ScheduleParams { e0: 0.0, e1: 40.0, rho, ..ScheduleParams::default() };
                assert!((cols[i + 1] - schedule_f(cols[0], &p)).abs() <= 1e-12);
            }
        }
        assert!(c.to_svg().matches("<polyline").count() == 2);
    }

    #[test]
    fn rejects_bad_schedule() {
        assert!(schedule_curves(0.0, 10.0, &[], 1.0).is_err());
        assert!(schedule_curves(5.0, 2.0, &[1.0], 1.0).is_err());
    }
}
