//! Progressive dual-branch training: the ramp f(E), response cue erasing,
//! the progressive regularization loss and prediction fusion.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::loss::{channel_last, segmentation_loss, LabelMap, LossWeights};
use crate::model::Mcpa;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub e0: f64,
    pub e1: f64,
    pub rho: f64,
    /// Fraction of pixels erased for the fine branch.
    pub k: f64,
    pub lambda: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { e0: 0.0, e1: 40.0, rho: 4.0, k: 0.15, lambda: 0.4 }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.e0 >= 0.0 && self.e1 > self.e0) {
            return Err(Error::config(format!("schedule needs 0 <= e0 < e1, got e0 = {}, e1 = {}", self.e0, self.e1)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::config(format!("rho must be positive, got {}", self.rho)));
        }
        check_k(self.k)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::config(format!("erase fraction k must lie in (0, 1), got {k}")));
    }
    Ok(())
}

/// 0 up to `e0`, `((E - e0) / (e1 - e0))^rho` in between, 1 from `e1` on.
pub fn schedule_f(e: f64, p: &ScheduleParams) -> f64 {
    if e <= p.e0 {
        0.0
    } else if e >= p.e1 {
        1.0
    } else {
        ((e - p.e0) / (p.e1 - p.e0)).powf(p.rho)
    }
}

/// `ceil(k * n)`, with a small tolerance so products such as `0.1 * 30`
/// are not pushed up by rounding.
pub fn erase_count(k: f64, n: usize) -> usize {
    ((k * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Indices of the `ceil(k * n)` most confident pixels, ordered by
/// descending probability, ties by ascending index.
pub fn top_pixels(prob: &[f64], k: f64) -> Result<Vec<usize>> {
    check_k(k)?;
    let count = erase_count(k, prob.len());
    let mut idx: Vec<usize> = (0..prob.len()).collect();
    let order = |a: &usize, b: &usize| prob[*b].total_cmp(&prob[*a]).then(a.cmp(b));
    if count < idx.len() {
        idx.select_nth_unstable_by(count - 1, order);
        idx.truncate(count);
    }
    idx.sort_by(order);
    Ok(idx)
}

/// Zeroes every channel at the given per-image pixel indices.
pub fn erase_pixels<T: Scalar>(image: &Tensor<T>, idx: &[Vec<usize>]) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 4 || idx.len() != s[0] {
        return Err(Error::shape(format!("{} erase lists for images {s:?}", idx.len())));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut out = image.clone();
    let d = out.data_mut();
    for (b, list) in idx.iter().enumerate() {
        for &p in list {
            if p >= hw {
                return Err(Error::shape(format!("erase index {p} outside {hw} pixels")));
            }
            for ch in 0..c {
                d[(b * c + ch) * hw + p] = T::zero();
            }
        }
    }
    Ok(out)
}

/// Response cue erasing: zeroes (all channels) the most confident pixels
/// of each image. `fg_prob` is `[N, H, W]` foreground probability.
/// Returns the erased images and, per image, the erased pixel indices.
pub fn rce<T: Scalar>(image: &Tensor<T>, fg_prob: &[f64], k: f64) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
    let s = image.shape();
    if s.len() != 4 || fg_prob.len() != s[0] * s[2] * s[3] {
        return Err(Error::shape(format!("probability map of {} values does not match image {s:?}", fg_prob.len())));
    }
    let hw = s[2] * s[3];
    let erased = fg_prob.chunks(hw).map(|p| top_pixels(p, k)).collect::<Result<Vec<_>>>()?;
    Ok((erase_pixels(image, &erased)?, erased))
}

/// Unscaled `mean((I1 - I2)^2)` and its `f(E)`-scaled value.
pub fn pr_terms<'t, T: Scalar>(i1: &Var<'t, T>, i2: &Var<'t, T>, e: f64, p: &ScheduleParams) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if i1.shape() != i2.shape() {
        return Err(Error::shape(format!("PR loss operands differ: {:?} vs {:?}", i1.shape(), i2.shape())));
    }
    let raw = i1.sub(i2)?.square()?.mean_all()?;
    let scaled = raw.scale(schedule_f(e, p))?;
    Ok((raw, scaled))
}

/// `f(E) * mean((I1 - I2)^2)` over all elements.
pub fn pr_loss<'t, T: Scalar>(i1: &Var<'t, T>, i2: &Var<'t, T>, e: f64, p: &ScheduleParams) -> Result<Var<'t, T>> {
    Ok(pr_terms(i1, i2, e, p)?.1)
}

/// Main and fine networks with disjoint parameters (`main/...`, `fine/...`)
/// in one store.
#[derive(Clone, Debug)]
pub struct DualBranch {
    pub main: Mcpa,
    pub fine: Mcpa,
}

impl DualBranch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { main: Mcpa::new(store, rng, "main", cfg)?, fine: Mcpa::new(store, rng, "fine", cfg)? })
    }
}

pub struct DualOutput<'t, T: Scalar> {
    pub logits1: Var<'t, T>,
    pub logits2: Var<'t, T>,
    /// Class probabilities `[N, H, W, K]`.
    pub probs1: Var<'t, T>,
    pub probs2: Var<'t, T>,
    pub erased: Tensor<T>,
    pub erased_idx: Vec<Vec<usize>>,
}

/// `1 - p(background)` per pixel from `[N, H, W, K]` probabilities.
pub fn foreground<T: Scalar>(probs: &Tensor<T>) -> Vec<f64> {
    let k = *probs.shape().last().expect("probabilities have a class axis");
    probs.data().chunks(k).map(|c| 1.0 - c[0].f64()).collect()
}

/// I1 = main(I); I' = RCE(I, I1); I2 = fine(I'). The erase mask is computed
/// from values, so no gradient flows from the fine branch into I1.
pub fn dual_forward<'t, T: Scalar>(model: &DualBranch, ctx: &Ctx<'t, T>, image: &Tensor<T>, k: f64) -> Result<DualOutput<'t, T>> {
    dual_forward_with(model, ctx, image, k, None)
}

/// [`dual_forward`] with an optional fixed erase set in place of the one
/// derived from I1 (finite-difference checks hold the routing fixed).
pub fn dual_forward_with<'t, T: Scalar>(
    model: &DualBranch,
    ctx: &Ctx<'t, T>,
    image: &Tensor<T>,
    k: f64,
    fixed: Option<&[Vec<usize>]>,
) -> Result<DualOutput<'t, T>> {
    let logits1 = model.main.forward(ctx, &ctx.input(image.clone()))?;
    let probs1 = channel_last(&logits1)?.softmax()?;
    let (erased, erased_idx) = match fixed {
        Some(idx) => (erase_pixels(image, idx)?, idx.to_vec()),
        None => rce(image, &foreground(&probs1.value()), k)?,
    };
    let logits2 = model.fine.forward(ctx, &ctx.input(erased.clone()))?;
    let probs2 = channel_last(&logits2)?.softmax()?;
    Ok(DualOutput { logits1, logits2, probs1, probs2, erased, erased_idx })
}

pub struct TotalLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub seg1: Var<'t, T>,
    pub seg2: Var<'t, T>,
    pub pr: Var<'t, T>,
    /// PR term before the `f(E)` factor.
    pub pr_raw: Var<'t, T>,
}

/// `seg(I1) + seg(I2) + f(E) * PR(I1, I2)`.
pub fn total_loss<'t, T: Scalar>(out: &DualOutput<'t, T>, labels: &LabelMap, e: f64, p: &ScheduleParams, w: &LossWeights) -> Result<TotalLoss<'t, T>> {
    total_loss_with(out, labels, e, p, w, true)
}

/// [`total_loss`], optionally without the Fine branch's segmentation term.
pub fn total_loss_with<'t, T: Scalar>(
    out: &DualOutput<'t, T>,
    labels: &LabelMap,
    e: f64,
    p: &ScheduleParams,
    w: &LossWeights,
    supervise_fine: bool,
) -> Result<TotalLoss<'t, T>> {
    let w = LossWeights { lambda: p.lambda, ..*w };
    let seg1 = segmentation_loss(&out.logits1, labels, &w)?.total;
    let seg2 = segmentation_loss(&out.logits2, labels, &w)?.total;
    let (pr_raw, pr) = pr_terms(&out.probs1, &out.probs2, e, p)?;
    let seg = if supervise_fine { seg1.add(&seg2)? } else { seg1 };
    Ok(TotalLoss { total: seg.add(&pr)?, seg1, seg2, pr, pr_raw })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Main,
    Fine,
    #[default]
    Max,
}

/// Fused class probabilities `[.., K]`: the chosen branch, or the
/// elementwise maximum of both.
pub fn fuse_probs(p1: &[f64], p2: &[f64], strategy: Fusion) -> Vec<f64> {
    match strategy {
        Fusion::Main => p1.to_vec(),
        Fusion::Fine => p2.to_vec(),
        Fusion::Max => p1.iter().zip(p2).map(|(a, b)| a.max(*b)).collect(),
    }
}

/// Fused foreground probability of binary outputs.
pub fn fuse_foreground(f1: &[f64], f2: &[f64], strategy: Fusion) -> Vec<f64> {
    fuse_probs(f1, f2, strategy)
}

/// Labels from fused probabilities: for two classes, foreground where the
/// fused foreground probability reaches 0.5; otherwise the argmax of the
/// per-class fused maxima.
pub fn fused_labels(p1: &[f64], p2: &[f64], k: usize, strategy: Fusion) -> Vec<u8> {
    if k == 2 {
        let f1: Vec<f64> = p1.chunks(2).map(|c| c[1]).collect();
        let f2: Vec<f64> = p2.chunks(2).map(|c| c[1]).collect();
        return fuse_foreground(&f1, &f2, strategy).iter().map(|&f| (f >= 0.5) as u8).collect();
    }
    fuse_probs(p1, p2, strategy)
        .chunks(k)
        .map(|c| c.iter().enumerate().fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0 as u8)
        .collect()
}
