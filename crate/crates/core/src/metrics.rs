//! Dice, HD95 and ROC-AUC, plus the per-class evaluation report.

use std::io::Write;

use crate::error::{Error, Result};

/// `2|P ∩ G| / (|P| + |G|)` for class `c`; 1 when both are empty.
pub fn dice_score(pred: &[u8], gt: &[u8], c: u8) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (x, y) = (a == c, b == c);
        p += x as usize;
        g += y as usize;
        both += (x && y) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Mask pixels with a 4-neighbour outside the mask; pixels on the image
/// border count as boundary (the outside of the image is background).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            if edge || !mask[(y - 1) * w + x] || !mask[(y + 1) * w + x] || !mask[y * w + x - 1] || !mask[y * w + x + 1] {
                out.push((y, x));
            }
        }
    }
    out
}

const FAR: f64 = 1e30;

/// Exact 1-d lower envelope of parabolas (squared distance transform).
fn dt1(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_distance_map(seeds: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![FAR; h * w];
    for &(y, x) in seeds {
        g[y * w + x] = 0.0;
    }
    let m = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; m], vec![0.0; m], vec![0usize; m], vec![0.0; m + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = g[y * w + x];
        }
        dt1(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            g[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&g[y * w..(y + 1) * w]);
        dt1(&f[..w], &mut out[..w], &mut v, &mut z);
        g[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    g
}

/// Nearest-boundary distances from each boundary pixel of `a` to `b` and
/// vice versa, pooled; `None` when either mask is empty.
pub fn boundary_distances(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    let ba = boundary(a, h, w);
    let bb = boundary(b, h, w);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let da = squared_distance_map(&ba, h, w);
    let db = squared_distance_map(&bb, h, w);
    let mut d: Vec<f64> = ba.iter().map(|&(y, x)| db[y * w + x].sqrt()).chain(bb.iter().map(|&(y, x)| da[y * w + x].sqrt())).collect();
    d.sort_by(f64::total_cmp);
    Some(d)
}

/// Linear-interpolated percentile (`q` in `[0, 1]`) of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95th-percentile symmetric boundary distance in pixels; `None`
/// (undefined) when either mask is empty.
pub fn hd95(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    boundary_distances(a, b, h, w).map(|d| percentile(&d, 0.95))
}

/// Maximum symmetric boundary distance.
pub fn hd100(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    boundary_distances(a, b, h, w).map(|d| d[d.len() - 1])
}

/// Mann–Whitney AUC: `P(s+ > s-) + P(s+ = s-) / 2`, via midranks.
pub fn auc_roc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let npos = positive.iter().filter(|&&p| p).count();
    let nneg = positive.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative samples".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Ok(u / (npos as f64 * nneg as f64))
}

/// One class row of a report; percentages for Dice and AUC.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRow {
    pub class: usize,
    pub dice: f64,
    /// `None` when every image had an empty mask for this class.
    pub hd95: Option<f64>,
    pub auc: Option<f64>,
    /// Images whose HD95 was undefined and excluded from the mean.
    pub hd95_undefined: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ClassRow>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub auc: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 5] = ["run_id", "class", "dice", "hd95", "auc"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// Rows `run_id,class,dice,hd95,auc`: one per foreground class, then
    /// a `mean` row. Undefined HD95 is written as `undefined`; AUC is empty
    /// for multi-class tasks.
    pub fn write_csv<W: Write>(&self, out: W, run_id: &str) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::data(format!("writing report: {e}"));
        wr.write_record(REPORT_COLUMNS).map_err(io)?;
        for r in &self.rows {
            let auc = r.auc.map_or(String::new(), |a| format!("{a:.6}"));
            wr.write_record([run_id.to_string(), r.class.to_string(), format!("{:.6}", r.dice), opt(r.hd95), auc]).map_err(io)?;
        }
        let auc = self.auc.map_or(String::new(), |a| format!("{a:.6}"));
        wr.write_record([run_id.to_string(), "mean".to_string(), format!("{:.6}", self.mean_dice), opt(self.mean_hd95), auc]).map_err(io)?;
        wr.flush().map_err(|e| Error::data(format!("writing report: {e}")))?;
        Ok(())
    }
}

/// Accumulates per-image metrics for classes `1..num_classes`.
#[derive(Clone, Debug)]
pub struct Evaluator {
    num_classes: usize,
    dice: Vec<Vec<f64>>,
    hd: Vec<Vec<f64>>,
    undefined: Vec<usize>,
    scores: Vec<f64>,
    truth: Vec<bool>,
}

impl Evaluator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            dice: vec![Vec::new(); num_classes],
            hd: vec![Vec::new(); num_classes],
            undefined: vec![0; num_classes],
            scores: Vec::new(),
            truth: Vec::new(),
        }
    }

    /// `fg_prob` (binary tasks) feeds the AUC.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize, fg_prob: Option<&[f64]>) -> Result<()> {
        if pred.len() != h * w || gt.len() != h * w {
            return Err(Error::shape(format!("prediction/label size does not match {h}x{w}")));
        }
        for c in 1..self.num_classes {
            self.dice[c].push(dice_score(pred, gt, c as u8));
            let a: Vec<bool> = pred.iter().map(|&v| v as usize == c).collect();
            let b: Vec<bool> = gt.iter().map(|&v| v as usize == c).collect();
            match hd95(&a, &b, h, w) {
                Some(d) => self.hd[c].push(d),
                None => self.undefined[c] += 1,
            }
        }
        if let Some(p) = fg_prob {
            if p.len() != h * w {
                return Err(Error::shape("probability map size mismatch"));
            }
            self.scores.extend_from_slice(p);
            self.truth.extend(gt.iter().map(|&v| v > 0));
        }
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
        let auc = if self.scores.is_empty() { None } else { auc_roc(&self.scores, &self.truth).ok().map(|a| 100.0 * a) };
        let binary = self.num_classes == 2;
        let rows: Vec<ClassRow> = (1..self.num_classes)
            .map(|c| ClassRow {
                class: c,
                dice: 100.0 * mean(&self.dice[c]).unwrap_or(0.0),
                hd95: mean(&self.hd[c]),
                auc: if binary { auc } else { None },
                hd95_undefined: self.undefined[c],
            })
            .collect();
        let dices: Vec<f64> = rows.iter().map(|r| r.dice).collect();
        let hds: Vec<f64> = rows.iter().filter_map(|r| r.hd95).collect();
        EvalReport { mean_dice: mean(&dices).unwrap_or(0.0), mean_hd95: mean(&hds), auc, rows }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_hand_cases() {
        assert_eq!(dice_score(&[1, 1, 0], &[1, 1, 0], 1), 1.0);
        assert_eq!(dice_score(&[1, 0, 0, 0], &[0, 1, 0, 0], 1), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 1), 1.0);
        // P = 3 px, G = 5 px, overlap 2
        let p = [1, 1, 1, 0, 0, 0, 0, 0];
        let g = [0, 1, 1, 1, 1, 1, 0, 0];
        assert_eq!(dice_score(&p, &g, 1), 0.5);
    }

    #[test]
    fn hd_hand_cases() {
        let (h, w) = (5, 5);
        let mut a = vec![false; 25];
        let mut b = vec![false; 25];
        a[0] = true;
        b[3 * w + 4] = true;
        assert_eq!(hd95(&a, &b, h, w), Some(5.0));
        assert_eq!(hd95(&a, &a, h, w), Some(0.0));
        assert_eq!(hd95(&a, &vec![false; 25], h, w), None);
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn report_csv_columns() {
        let mut ev = Evaluator::new(2);
        let gt = [0, 1, 1, 0];
        ev.add(&gt, &gt, 2, 2, Some(&[0.1, 0.9, 0.8, 0.2])).unwrap();
        let rep = ev.report();
        assert_eq!(rep.mean_dice, 100.0);
        assert_eq!(rep.mean_hd95, Some(0.0));
        let mut buf = Vec::new();
        rep.write_csv(&mut buf, "r1").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_id,class,dice,hd95,auc");
        assert_eq!(lines[1], "r1,1,100.000000,0.000000,100.000000");
        assert!(lines[2].starts_with("r1,mean,"));
    }

    fn masks(side: usize) -> impl proptest::strategy::Strategy<Value = (Vec<bool>, Vec<bool>)> {
        let n = side * side;
        (proptest::collection::vec(proptest::bool::ANY, n), proptest::collection::vec(proptest::bool::ANY, n))
    }

    proptest::proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded(p in proptest::collection::vec(0u8..3, 36), g in proptest::collection::vec(0u8..3, 36)) {
            for c in 0..3 {
                let d = dice_score(&p, &g, c);
                proptest::prop_assert!((0.0..=1.0).contains(&d));
                proptest::prop_assert_eq!(d, dice_score(&g, &p, c));
                proptest::prop_assert_eq!(dice_score(&p, &p, c), 1.0);
            }
        }

        #[test]
        fn hd_is_symmetric_and_ordered((a, b) in masks(8)) {
            let h = hd95(&a, &b, 8, 8);
            proptest::prop_assert_eq!(h, hd95(&b, &a, 8, 8));
            match (h, hd100(&a, &b, 8, 8)) {
                (Some(x), Some(y)) => proptest::prop_assert!(0.0 <= x && x <= y),
                (x, y) => proptest::prop_assert!(x.is_none() && y.is_none()),
            }
            if a.iter().any(|&v| v) {
                proptest::prop_assert_eq!(hd95(&a, &a, 8, 8), Some(0.0));
            }
        }

        #[test]
        fn auc_is_rank_based(s in proptest::collection::vec(0u8..10, 4..60), y in proptest::collection::vec(proptest::bool::ANY, 60)) {
            let mut y = y[..s.len()].to_vec();
            y[0] = true;
            y[1] = false;
            let s: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            let a = auc_roc(&s, &y).unwrap();
            let squashed: Vec<f64> = s.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
            proptest::prop_assert!((auc_roc(&squashed, &y).unwrap() - a).abs() < 1e-12);
            proptest::prop_assert!((auc_roc(&flipped, &y).unwrap() + a - 1.0).abs() < 1e-12);
        }
    }
}
