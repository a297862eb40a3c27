//! Folding token sequences of different widths into one common width.

use crate::backbone::Scale;
use crate::error::{Error, Result};
use crate::nn::Layout;
use crate::tensor::{Scalar, Var};

/// One folded scale: `source` is the 1-based stage it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub source: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// Folded tokens per original token (`channels / fold width`).
    pub factor: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.h * self.w * self.factor
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial grid assigned to the folded tokens: the `factor` sub-tokens
    /// of each pixel are laid out as `a` rows by `factor / a` columns of
    /// pixel rows, with `a` the largest divisor of `factor` not above its
    /// square root. The tokens keep their plain row-major reshape order.
    pub fn grid(&self) -> (usize, usize) {
        let a = fold_rows(self.factor);
        (self.h * a, self.w * (self.factor / a))
    }
}

pub fn fold_rows(m: usize) -> usize {
    (1..=m).filter(|a| m % a == 0 && a * a <= m).max().unwrap_or(1)
}

/// Tokens `[N, L_total, C1]` and the ordered ledger of segments.
#[derive(Clone, Debug)]
pub struct FoldedSequence<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub ledger: Vec<Segment>,
}

impl<'t, T: Scalar> FoldedSequence<'t, T> {
    pub fn width(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn layout(&self) -> Layout {
        Layout { grids: self.ledger.iter().map(Segment::grid).collect() }
    }

    pub fn with_tokens(&self, tokens: Var<'t, T>) -> Result<Self> {
        let s = tokens.shape();
        let total: usize = self.ledger.iter().map(Segment::len).sum();
        if s.len() != 3 || s[1] != total {
            return Err(Error::shape(format!("tokens {s:?} do not match ledger length {total}")));
        }
        Ok(Self { tokens, ledger: self.ledger.clone() })
    }

    /// Token-axis concatenation; ledgers are appended in order.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let tokens = Var::concat(&[self.tokens, other.tokens], 1)?;
        Ok(Self { tokens, ledger: self.ledger.iter().chain(&other.ledger).copied().collect() })
    }

    /// Splits by the ledger and restores every segment to `[N, h*w, C]`.
    pub fn unfold(&self) -> Result<Vec<Scale<'t, T>>> {
        let s = self.tokens.shape();
        let total: usize = self.ledger.iter().map(Segment::len).sum();
        if s.len() != 3 || s[1] != total {
            return Err(Error::shape(format!("folded tokens {s:?} disagree with ledger length {total}")));
        }
        let mut out = Vec::with_capacity(self.ledger.len());
        let mut off = 0;
        for seg in &self.ledger {
            let part = if self.ledger.len() == 1 { self.tokens } else { self.tokens.narrow(1, off, seg.len())? };
            off += seg.len();
            out.push(Scale::new(part.reshape(&[s[0], seg.h * seg.w, seg.channels])?, seg.h, seg.w)?);
        }
        Ok(out)
    }
}

/// Reshapes each scale to width `c1` and concatenates on the token axis.
pub fn fold_scales<'t, T: Scalar>(parts: &[(usize, Scale<'t, T>)], c1: usize) -> Result<FoldedSequence<'t, T>> {
    if parts.is_empty() || c1 == 0 {
        return Err(Error::shape("nothing to fold"));
    }
    let mut tokens = Vec::with_capacity(parts.len());
    let mut ledger = Vec::with_capacity(parts.len());
    for &(source, sc) in parts {
        let s = sc.x.shape();
        let c = sc.channels();
        if c % c1 != 0 {
            return Err(Error::shape(format!("scale {source}: {c} channels not divisible by fold width {c1}")));
        }
        let factor = c / c1;
        tokens.push(sc.x.reshape(&[s[0], s[1] * factor, c1])?);
        ledger.push(Segment { source, h: sc.h, w: sc.w, channels: c, factor });
    }
    let tokens = if tokens.len() == 1 { tokens[0] } else { Var::concat(&tokens, 1)? };
    Ok(FoldedSequence { tokens, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn seq(tape: &Tape<f64>, n: usize, h: usize, w: usize, c: usize, base: f64) -> Scale<'_, f64> {
        let data: Vec<f64> = (0..n * h * w * c).map(|i| base + i as f64).collect();
        Scale::new(tape.constant(Tensor::from_f64(&[n, h * w, c], &data).unwrap()), h, w).unwrap()
    }

    #[test]
    fn fold_arithmetic_and_round_trip() {
        let tape = Tape::new();
        let a = seq(&tape, 1, 4, 4, 8, 0.0);
        let b = seq(&tape, 1, 2, 2, 16, 1000.0);
        let f = fold_scales(&[(1, a), (2, b)], 4).unwrap();
        assert_eq!(f.tokens.shape(), vec![1, 48, 4]);
        assert_eq!(f.ledger.iter().map(Segment::len).collect::<Vec<_>>(), vec![32, 16]);
        let u = f.unfold().unwrap();
        assert_eq!(u[0].x.value().data(), a.x.value().data());
        assert_eq!(u[1].x.value().data(), b.x.value().data());
        assert_eq!((u[1].h, u[1].w), (2, 2));
    }

    #[test]
    fn equal_widths_are_plain_concat() {
        let tape = Tape::new();
        let a = seq(&tape, 2, 2, 3, 4, 0.0);
        let b = seq(&tape, 2, 1, 2, 4, 50.0);
        let f = fold_scales(&[(1, a), (2, b)], 4).unwrap();
        let plain = Var::concat(&[a.x, b.x], 1).unwrap();
        assert_eq!(f.tokens.value().data(), plain.value().data());
        assert!(fold_scales(&[(1, seq(&tape, 1, 2, 2, 6, 0.0))], 4).is_err());
    }

    #[test]
    fn folded_grids() {
        assert_eq!(fold_rows(1), 1);
        assert_eq!(fold_rows(2), 1);
        assert_eq!(fold_rows(4), 2);
        assert_eq!(fold_rows(8), 2);
        assert_eq!(fold_rows(16), 4);
        let s = Segment { source: 2, h: 28, w: 28, channels: 128, factor: 4 };
        assert_eq!(s.grid(), (56, 56));
    }
}
