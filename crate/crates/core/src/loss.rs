//! Cross-entropy plus soft Dice segmentation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Integer label maps `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(format!("label map {n}x{h}x{w} needs {} values, got {}", n * h * w, data.len())));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= k) {
            Some(l) => Err(Error::data(format!("label {l} out of range for {k} classes"))),
            None => Ok(()),
        }
    }

    /// `[N, H, W, K]` one-hot encoding.
    pub fn one_hot<T: Scalar>(&self, k: usize) -> Result<Tensor<T>> {
        self.check_classes(k)?;
        let mut out = vec![T::zero(); self.data.len() * k];
        for (i, &l) in self.data.iter().enumerate() {
            out[i * k + l as usize] = T::one();
        }
        Tensor::new(&[self.n, self.h, self.w, k], out)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cross-entropy term; Dice gets `1 - lambda`.
    pub lambda: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.4, smooth: 1e-5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || self.smooth < 0.0 {
            return Err(Error::config(format!("loss lambda {} must lie in [0, 1] and smooth must be nonnegative", self.lambda)));
        }
        Ok(())
    }
}

pub struct LossParts<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub ce: Var<'t, T>,
    /// `1 - mean soft Dice`.
    pub dice: Var<'t, T>,
}

/// Class probabilities `[N, H, W, K]` from logits `[N, K, H, W]`.
pub fn channel_last<'t, T: Scalar>(logits: &Var<'t, T>) -> Result<Var<'t, T>> {
    if logits.shape().len() != 4 {
        return Err(Error::shape(format!("expected [N, K, H, W] logits, got {:?}", logits.shape())));
    }
    logits.permute(&[0, 2, 3, 1])
}

/// `lambda * CE + (1 - lambda) * (1 - mean_c Dice_c)` with the soft Dice of
/// each class (background included) pooled over the batch.
pub fn segmentation_loss<'t, T: Scalar>(logits: &Var<'t, T>, labels: &LabelMap, w: &LossWeights) -> Result<LossParts<'t, T>> {
    w.validate()?;
    let s = logits.shape();
    let x = channel_last(logits)?;
    if s[0] != labels.n || s[2] != labels.h || s[3] != labels.w {
        return Err(Error::shape(format!("logits {s:?} do not match labels {}x{}x{}", labels.n, labels.h, labels.w)));
    }
    let k = s[1];
    let pixels = labels.data.len();
    let tape = logits.tape();
    let y = tape.constant(labels.one_hot::<T>(k)?);

    let ce = x.log_softmax()?.mul(&y)?.sum_all()?.scale(-1.0 / pixels as f64)?;

    let per_class = |v: &Var<'t, T>| v.reshape(&[pixels, k])?.transpose(0, 1)?.sum_last();
    let p = x.softmax()?;
    let inter = per_class(&p.mul(&y)?)?;
    let psum = per_class(&p)?;
    let ysum = per_class(&y)?;
    let num = inter.affine(2.0, w.smooth)?;
    let den = psum.add(&ysum)?.affine(1.0, w.smooth)?;
    let dice = num.div(&den)?.mean_all()?.affine(-1.0, 1.0)?;

    let total = ce.scale(w.lambda)?.add(&dice.scale(1.0 - w.lambda)?)?;
    Ok(LossParts { total, ce, dice })
}
