//! Cross Perceptron units: CPA, the per-perceptron FFN, M-CPA and the
//! Global Perceptron.

use crate::backbone::{scaled_dot_attention, Scale, ShuntedAttention, SsaBlock};
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Builder, Ctx, Linear};
use crate::tensor::{Scalar, Var};

use super::fold::FoldedSequence;

/// `x + Linear(GELU(Linear(x)))`.
#[derive(Clone, Debug)]
pub struct PerceptronFfn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PerceptronFfn {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self { fc1: Linear::new(&mut s, "fc1", dim, dim * ratio)?, fc2: Linear::new(&mut s, "fc2", dim * ratio, dim)? })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.add(&self.fc2.forward(ctx, &self.fc1.forward(ctx, x)?.gelu()?)?)
    }
}

/// Average-pools a scale by `factor` (1 = unchanged).
pub fn pool_scale<'t, T: Scalar>(x: &Scale<'t, T>, factor: usize) -> Result<Scale<'t, T>> {
    if factor == 1 {
        return Ok(*x);
    }
    if x.h % factor != 0 || x.w % factor != 0 {
        return Err(Error::config(format!("adapter cannot pool a {}x{} grid by {factor}", x.h, x.w)));
    }
    let m = tokens_to_map(&x.x, x.h, x.w)?.avg_pool2d(factor)?;
    Scale::new(map_to_tokens(&m)?, x.h / factor, x.w / factor)
}

/// One cross-attention unit: Q from the perceptron's own scale, K and V
/// from one source, all projected to the attention width, output projected
/// back to the stage width.
#[derive(Clone, Debug)]
pub struct Cpa {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Cpa {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, q_dim: usize, kv_dim: usize, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("CPA width {width} not divisible by {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", q_dim, width)?,
            k: Linear::new(&mut s, "k", kv_dim, width)?,
            v: Linear::new(&mut s, "v", kv_dim, width)?,
            out: Linear::new(&mut s, "out", width, q_dim)?,
            heads,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, label: &str, q: &Var<'t, T>, kv: &Var<'t, T>) -> Result<Var<'t, T>> {
        let k = self.k.forward(ctx, kv)?;
        ctx.record(&format!("{label}/kv"), &k);
        let a = scaled_dot_attention(&self.q.forward(ctx, q)?, &k, &self.v.forward(ctx, kv)?, self.heads)?;
        self.out.forward(ctx, &a)
    }
}

/// Pooled, stage-resolved inputs for one CPA unit.
pub struct CpaInput<'t, T: Scalar> {
    pub kv: Scale<'t, T>,
    pub factor: usize,
}

/// Multi-scale Cross Perceptron built from CPA units: unit outputs are
/// concatenated, reduced to the stage width, restored to the native grid,
/// added to the query source and passed through [`PerceptronFfn`].
#[derive(Clone, Debug)]
pub struct CrossPerceptron {
    pub index: usize,
    q_factor: usize,
    units: Vec<Cpa>,
    reduce: Linear,
    ffn: PerceptronFfn,
}

impl CrossPerceptron {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        index: usize,
        channels: usize,
        q_factor: usize,
        kv_dims: &[usize],
        width: usize,
        heads: usize,
        ratio: usize,
    ) -> Result<Self> {
        let mut s = b.scope(&format!("perceptron{index}"));
        let units = kv_dims.iter().enumerate().map(|(j, &kd)| Cpa::new(&mut s, &format!("cpa{j}"), channels, kd, width, heads)).collect::<Result<Vec<_>>>()?;
        let reduce = Linear::new(&mut s, "reduce", units.len() * channels, channels)?;
        let ffn = PerceptronFfn::new(&mut s, "ffn", channels, ratio)?;
        Ok(Self { index, q_factor, units, reduce, ffn })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, q_src: &Scale<'t, T>, kv: &[CpaInput<'t, T>]) -> Result<Scale<'t, T>> {
        if kv.len() != self.units.len() {
            return Err(Error::shape(format!("perceptron {} expects {} K/V sources, got {}", self.index, self.units.len(), kv.len())));
        }
        let label = format!("bridge/perceptron{}", self.index);
        let q = pool_scale(q_src, self.q_factor)?;
        ctx.record(&format!("{label}/q"), &q.x);
        let mut outs = Vec::with_capacity(kv.len());
        for (j, (unit, inp)) in self.units.iter().zip(kv).enumerate() {
            let src = pool_scale(&inp.kv, inp.factor)?;
            outs.push(unit.forward(ctx, &format!("{label}/cpa{j}"), &q.x, &src.x)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 2)? };
        ctx.record(&format!("{label}/concat"), &cat);
        let mut y = self.reduce.forward(ctx, &cat)?;
        if self.q_factor > 1 {
            y = map_to_tokens(&tokens_to_map(&y, q.h, q.w)?.upsample_nearest2d(self.q_factor)?)?;
        }
        let out = q_src.with(self.ffn.forward(ctx, &q_src.x.add(&y)?)?)?;
        ctx.record(&format!("{label}/out"), &out.x);
        Ok(out)
    }
}

/// M-CPA: queries from F34, multi-rate aggregated keys/values from F12, at
/// the fold width, with a residual around the attention, followed by
/// [`PerceptronFfn`].
#[derive(Clone, Debug)]
pub struct ModifiedCpa {
    attn: ShuntedAttention,
    ffn: PerceptronFfn,
}

impl ModifiedCpa {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, width: usize, heads: usize, rates: [usize; 2], ratio: usize) -> Result<Self> {
        let mut s = b.scope("perceptron4");
        Ok(Self { attn: ShuntedAttention::new(&mut s, "mcpa", width, heads, rates)?, ffn: PerceptronFfn::new(&mut s, "ffn", width, ratio)? })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f12: &FoldedSequence<'t, T>, f34: &FoldedSequence<'t, T>) -> Result<FoldedSequence<'t, T>> {
        if f12.width() != f34.width() {
            return Err(Error::shape(format!("M-CPA inputs differ in width: {} vs {}", f12.width(), f34.width())));
        }
        ctx.record("bridge/perceptron4/q", &f34.tokens);
        let a = f34.tokens.add(&self.attn.forward_cross(ctx, &f34.tokens, &f12.tokens, &f12.layout())?)?;
        let out = f34.with_tokens(self.ffn.forward(ctx, &a)?)?;
        ctx.record("bridge/perceptron4/out", &out.tokens);
        Ok(out)
    }
}

/// One SSA block over the concatenation of all folded scales, then per
/// scale unfolding and a linear projection at the native width.
#[derive(Clone, Debug)]
pub struct GlobalPerceptron {
    block: SsaBlock,
    proj: Vec<Linear>,
}

impl GlobalPerceptron {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, width: usize, heads: usize, rates: [usize; 2], ratio: usize, channels: &[usize; 4]) -> Result<Self> {
        let mut s = b.scope("global");
        let block = SsaBlock::new(&mut s, "block", width, heads, rates, ratio)?;
        let proj = channels.iter().enumerate().map(|(i, &c)| Linear::new(&mut s, &format!("proj{}", i + 1), c, c)).collect::<Result<_>>()?;
        Ok(Self { block, proj })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: &FoldedSequence<'t, T>) -> Result<Vec<Scale<'t, T>>> {
        if f.ledger.len() != self.proj.len() {
            return Err(Error::shape(format!("global perceptron expects {} segments, got {}", self.proj.len(), f.ledger.len())));
        }
        ctx.record("bridge/global/in", &f.tokens);
        let y = f.with_tokens(self.block.forward(ctx, &f.tokens, &f.layout())?)?;
        y.unfold()?.iter().zip(&self.proj).map(|(sc, p)| sc.with(p.forward(ctx, &sc.x)?)).collect()
    }
}
