//! Multi-head attention building blocks: plain scaled-dot attention, the
//! shunted (multi-rate) variant with token aggregation, and the SSA feed
//! forward network.

use crate::error::{Error, Result};
use crate::nn::{per_segment, Builder, Conv2d, Ctx, LayerNorm, Layout, Linear};
use crate::tensor::{Scalar, Var};

/// `[N, L, H*d]` to `[N*H, L, d]`.
pub fn split_heads<'t, T: Scalar>(x: &Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::shape(format!("cannot split {s:?} into {heads} heads")));
    }
    let d = s[2] / heads;
    x.reshape(&[s[0], s[1], heads, d])?.permute(&[0, 2, 1, 3])?.reshape(&[s[0] * heads, s[1], d])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<'t, T: Scalar>(x: &Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || s[0] % heads != 0 {
        return Err(Error::shape(format!("cannot merge {s:?} from {heads} heads")));
    }
    let n = s[0] / heads;
    x.reshape(&[n, heads, s[1], s[2]])?.permute(&[0, 2, 1, 3])?.reshape(&[n, s[1], heads * s[2]])
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` per head, with `d_k = width / heads`.
/// Q: `[N, Lq, W]`, K and V: `[N, Lk, W]`.
pub fn scaled_dot_attention<'t, T: Scalar>(q: &Var<'t, T>, k: &Var<'t, T>, v: &Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[2] != ks[2] || ks[2] != vs[2] || qs[0] != ks[0] || ks[0] != vs[0] {
        return Err(Error::shape(format!("attention widths/batches disagree: Q {qs:?}, K {ks:?}, V {vs:?}")));
    }
    if ks[1] != vs[1] {
        return Err(Error::shape(format!("attention K/V length mismatch: K {ks:?}, V {vs:?}")));
    }
    if heads == 0 || qs[2] % heads != 0 {
        return Err(Error::shape(format!("width {} not divisible by {heads} heads", qs[2])));
    }
    let d = qs[2] / heads;
    let out = split_heads(q, heads)?.attention(&split_heads(k, heads)?, &split_heads(v, heads)?, 1.0 / (d as f64).sqrt())?;
    merge_heads(&out, heads)
}

/// Strided `r x r` token aggregation (conv with kernel == stride == r,
/// then layer norm and GELU). Rate 1 is the identity.
#[derive(Clone, Debug)]
pub struct TokenAggregation {
    pub rate: usize,
    conv: Option<(Conv2d, LayerNorm)>,
}

impl TokenAggregation {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, rate: usize) -> Result<Self> {
        if rate == 0 {
            return Err(Error::config("token aggregation rate must be positive"));
        }
        let conv = if rate > 1 {
            let mut s = b.scope(name);
            Some((Conv2d::new(&mut s, "conv", channels, channels, rate, rate, 0, 1)?, LayerNorm::new(&mut s, "norm", channels)?))
        } else {
            None
        };
        Ok(Self { rate, conv })
    }

    pub fn out_layout(&self, layout: &Layout) -> Result<Layout> {
        let r = self.rate;
        let mut grids = Vec::with_capacity(layout.grids.len());
        for &(h, w) in &layout.grids {
            if h % r != 0 || w % r != 0 {
                return Err(Error::config(format!("grid {h}x{w} is not divisible by aggregation rate {r}")));
            }
            grids.push((h / r, w / r));
        }
        Ok(Layout { grids })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>, layout: &Layout) -> Result<(Var<'t, T>, Layout)> {
        let out_layout = self.out_layout(layout)?;
        match &self.conv {
            None => Ok((*x, out_layout)),
            Some((conv, norm)) => {
                let y = per_segment(x, layout, |m, _| conv.forward(ctx, m))?;
                Ok((norm.forward(ctx, &y)?.gelu()?, out_layout))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct KvGroup {
    heads: usize,
    mta: TokenAggregation,
    kv: Linear,
    local: Conv2d,
}

/// Shunted self-attention: heads are split into groups, each attending to
/// keys/values aggregated at its own rate; values get a depthwise local
/// enhancement `V + DW(V)`.
#[derive(Clone, Debug)]
pub struct ShuntedAttention {
    name: String,
    pub dim: usize,
    pub heads: usize,
    q: Linear,
    groups: Vec<KvGroup>,
    proj: Linear,
}

impl ShuntedAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize, rates: [usize; 2]) -> Result<Self> {
        if heads < 2 || heads % 2 != 0 || dim % heads != 0 {
            return Err(Error::config(format!("shunted attention needs an even head count dividing {dim}, got {heads}")));
        }
        let d = dim / heads;
        let hg = heads / 2;
        let mut s = b.scope(name);
        let q = Linear::new(&mut s, "q", dim, dim)?;
        let mut groups = Vec::new();
        for (gi, &rate) in rates.iter().enumerate() {
            let mut g = s.scope(&format!("group{gi}"));
            groups.push(KvGroup {
                heads: hg,
                mta: TokenAggregation::new(&mut g, "mta", dim, rate)?,
                kv: Linear::new(&mut g, "kv", dim, 2 * hg * d)?,
                local: Conv2d::depthwise(&mut g, "local", hg * d, 3)?,
            });
        }
        let proj = Linear::new(&mut s, "proj", dim, dim)?;
        Ok(Self { name: s.prefix().to_string(), dim, heads, q, groups, proj })
    }

    pub fn rates(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.mta.rate).collect()
    }

    /// Keys/values per group, as `[N, Lk, heads_g * d]` pairs, with the
    /// aggregated layout.
    #[allow(clippy::type_complexity)]
    fn kv<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>, layout: &Layout) -> Result<Vec<(Var<'t, T>, Var<'t, T>)>> {
        let d = self.dim / self.heads;
        let mut out = Vec::with_capacity(self.groups.len());
        for (gi, g) in self.groups.iter().enumerate() {
            let (src, kv_layout) = g.mta.forward(ctx, x, layout)?;
            let kv = g.kv.forward(ctx, &src)?;
            let w = g.heads * d;
            let k = kv.narrow(2, 0, w)?;
            ctx.record(&format!("{}/kv{gi}", self.name), &k);
            let v = kv.narrow(2, w, w)?;
            let v = v.add(&per_segment(&v, &kv_layout, |m, _| g.local.forward(ctx, m))?)?;
            out.push((k, v));
        }
        Ok(out)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>, layout: &Layout) -> Result<Var<'t, T>> {
        self.forward_cross(ctx, x, x, layout)
    }

    /// Queries from `q_src` (any length), keys and values aggregated from
    /// `kv_src` laid out as `kv_layout`.
    pub fn forward_cross<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, q_src: &Var<'t, T>, kv_src: &Var<'t, T>, kv_layout: &Layout) -> Result<Var<'t, T>> {
        let s = q_src.shape();
        let ks = kv_src.shape();
        if s.len() != 3 || s[2] != self.dim || ks.len() != 3 || ks[0] != s[0] || ks[2] != self.dim || ks[1] != kv_layout.len() {
            return Err(Error::shape(format!(
                "shunted attention expects queries [N, L, {0}] and keys [N, {1}, {0}], got {s:?} and {ks:?}",
                self.dim,
                kv_layout.len()
            )));
        }
        let d = self.dim / self.heads;
        let q = split_heads(&self.q.forward(ctx, q_src)?, self.heads)?;
        // q is [N*H, L, d]; view as [N, H, L, d] to slice head groups
        let q4 = q.reshape(&[s[0], self.heads, s[1], d])?;
        let mut outs = Vec::with_capacity(self.groups.len());
        let mut h0 = 0;
        for (g, (k, v)) in self.groups.iter().zip(self.kv(ctx, kv_src, kv_layout)?) {
            let qg = q4.narrow(1, h0, g.heads)?.reshape(&[s[0] * g.heads, s[1], d])?;
            let o = qg.attention(&split_heads(&k, g.heads)?, &split_heads(&v, g.heads)?, 1.0 / (d as f64).sqrt())?;
            outs.push(o.reshape(&[s[0], g.heads, s[1], d])?);
            h0 += g.heads;
        }
        let o = Var::concat(&outs, 1)?.reshape(&[s[0] * self.heads, s[1], d])?;
        self.proj.forward(ctx, &merge_heads(&o, self.heads)?)
    }
}

/// Feed-forward network of the SSA block:
/// `x + fc2(GELU(h + DW(h)))`, `h = fc1(norm(x))`.
#[derive(Clone, Debug)]
pub struct SsaFfn {
    norm: LayerNorm,
    fc1: Linear,
    dw: Conv2d,
    fc2: Linear,
}

impl SsaFfn {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let hidden = dim * ratio;
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", dim)?,
            fc1: Linear::new(&mut s, "fc1", dim, hidden)?,
            dw: Conv2d::depthwise(&mut s, "dw", hidden, 3)?,
            fc2: Linear::new(&mut s, "fc2", hidden, dim)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>, layout: &Layout) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(ctx, &self.norm.forward(ctx, x)?)?;
        let detail = per_segment(&h, layout, |m, _| self.dw.forward(ctx, m))?;
        let y = self.fc2.forward(ctx, &h.add(&detail)?.gelu()?)?;
        x.add(&y)
    }
}

/// Pre-norm shunted attention with residual, followed by [`SsaFfn`].
#[derive(Clone, Debug)]
pub struct SsaBlock {
    norm: LayerNorm,
    attn: ShuntedAttention,
    ffn: SsaFfn,
}

impl SsaBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize, rates: [usize; 2], ratio: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", dim)?,
            attn: ShuntedAttention::new(&mut s, "attn", dim, heads, rates)?,
            ffn: SsaFfn::new(&mut s, "ffn", dim, ratio)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>, layout: &Layout) -> Result<Var<'t, T>> {
        let a = self.attn.forward(ctx, &self.norm.forward(ctx, x)?, layout)?;
        self.ffn.forward(ctx, &x.add(&a)?, layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::<f64>::new();
        let q = tape.constant(rand_tensor(&[2, 3, 4], &mut rng));
        let k = tape.constant(rand_tensor(&[2, 1, 4], &mut rng));
        let v = tape.constant(rand_tensor(&[2, 1, 4], &mut rng));
        let o = scaled_dot_attention(&q, &k, &v, 2).unwrap().value();
        let vv = v.value();
        for b in 0..2 {
            for i in 0..3 {
                for c in 0..4 {
                    assert!((o.data()[(b * 3 + i) * 4 + c] - vv.data()[b * 4 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn orthogonal_query_gives_value_mean() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[1, 3, 2], &[0., 1., 0., -2., 0., 5.]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[1, 3, 2], &[1., 2., 3., 4., 8., 0.]).unwrap());
        let o = scaled_dot_attention(&q, &k, &v, 1).unwrap().value();
        assert!((o.data()[0] - 4.0).abs() < 1e-12 && (o.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_query_three_key_table() {
        // d = 2, scale 1/sqrt(2); scores and softmax computed by hand below
        let tape = Tape::<f64>::new();
        let qd = [1.0, 0.0, 0.0, 2.0];
        let kd = [1.0, 1.0, 0.0, 1.0, 2.0, 0.0];
        let vd = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let q = tape.constant(Tensor::from_f64(&[1, 2, 2], &qd).unwrap());
        let k = tape.constant(Tensor::from_f64(&[1, 3, 2], &kd).unwrap());
        let v = tape.constant(Tensor::from_f64(&[1, 3, 2], &vd).unwrap());
        let o = scaled_dot_attention(&q, &k, &v, 1).unwrap().value();
        let s = 1.0 / 2f64.sqrt();
        let rows = [[1.0 * s, 0.0, 2.0 * s], [2.0 * s, 2.0 * s, 0.0]];
        for (i, r) in rows.iter().enumerate() {
            let e: Vec<f64> = r.iter().map(|x| x.exp()).collect();
            let z: f64 = e.iter().sum();
            let want0 = (e[0] * 1.0 + e[2] * 1.0) / z;
            let want1 = (e[1] * 1.0 + e[2] * 1.0) / z;
            assert!((o.data()[i * 2] - want0).abs() < 1e-12);
            assert!((o.data()[i * 2 + 1] - want1).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_rate_two_quarters_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mta = TokenAggregation::new(&mut Builder::new(&mut store, &mut rng), "mta", 4, 2).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = ctx.input(rand_tensor(&[1, 64, 4], &mut rng));
        let (y, lay) = mta.forward(&ctx, &x, &Layout::grid(8, 8)).unwrap();
        assert_eq!(y.shape(), vec![1, 16, 4]);
        assert_eq!(lay, Layout::grid(4, 4));
        assert!(mta.forward(&ctx, &x, &Layout { grids: vec![(4, 8), (2, 16)] }).is_ok());
        assert!(TokenAggregation::new(&mut Builder::new(&mut store, &mut rng), "m3", 4, 3).unwrap().out_layout(&Layout::grid(8, 8)).is_err());
    }

    #[test]
    fn ssa_ffn_with_zero_output_weights_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ffn = SsaFfn::new(&mut Builder::new(&mut store, &mut rng), "ffn", 32, 4).unwrap();
        *store.get_mut(ffn.fc2.w) = Tensor::zeros(&[128, 32]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = ctx.input(rand_tensor(&[2, 49, 32], &mut rng));
        let y = ffn.forward(&ctx, &x, &Layout::grid(7, 7)).unwrap();
        assert_eq!(y.shape(), vec![2, 49, 32]);
        assert_eq!(y.value().data(), x.value().data());
    }
}
