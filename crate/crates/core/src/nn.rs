//! Named parameters, the per-step forward context, and the small set of
//! layers everything else is assembled from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named parameter tensors. Names are
/// hierarchical (`encoder/stage1/block0/attn/q/weight`) and unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
}

/// Registers parameters under a name prefix, drawing initial values from a
/// seeded generator (always sampled in f64, so f32 and f64 builds agree).
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}/{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| d.sample(self.rng)).collect()
            }
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let v: f64 = d.sample(self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}/{name}", self.prefix) };
        self.store.add(&full, Tensor::from_f64(shape, &data)?)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

/// One forward pass: binds parameters to tape leaves on first use and
/// optionally records intermediate shapes.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: bool,
    trace: Option<RefCell<Vec<(String, Vec<usize>)>>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self { tape, store, vars: RefCell::new(vec![None; store.len()]), trainable: true, trace: None }
    }

    /// Parameters enter as constants: no parameter gradients are recorded.
    pub fn frozen(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self { trainable: false, ..Self::new(tape, store) }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { self.tape.leaf(value) } else { self.tape.constant(value) };
        vars[id.0] = Some(v);
        v
    }

    pub fn input(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    pub fn record(&self, label: &str, v: &Var<'t, T>) {
        if let Some(tr) = &self.trace {
            tr.borrow_mut().push((label.to_string(), v.shape()));
        }
    }

    pub fn trace(&self) -> Vec<(String, Vec<usize>)> {
        self.trace.as_ref().map(|t| t.borrow().clone()).unwrap_or_default()
    }

    /// Gradients per parameter after `tape.backward`; `None` for parameters
    /// not used in this pass.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.borrow().iter().map(|v| v.and_then(|v| self.tape.grad(v))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, input: usize, output: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let w = s.param("weight", &[input, output], Init::TruncNormal(0.02))?;
        let bias = s.param("bias", &[output], Init::Zeros)?;
        Ok(Self { w, b: Some(bias), input, output })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.last() != Some(&self.input) {
            return Err(Error::shape(format!("linear expects last dim {}, got {s:?}", self.input)));
        }
        let b = self.b.map(|b| ctx.p(b));
        x.linear(&ctx.p(self.w), b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self { g: s.param("weight", &[dim], Init::Ones)?, b: s.param("bias", &[dim], Init::Zeros)? })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&ctx.p(self.g), &ctx.p(self.b), NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!("{channels} channels not divisible into {groups} norm groups")));
        }
        let mut s = b.scope(name);
        Ok(Self { g: s.param("weight", &[channels], Init::Ones)?, b: s.param("bias", &[channels], Init::Zeros)?, groups })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.group_norm(self.groups, &ctx.p(self.g), &ctx.p(self.b), NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::config(format!("conv {name}: channels {cin}->{cout} not divisible by groups {groups}")));
        }
        let mut s = b.scope(name);
        let fan_out = (k * k * cout / groups) as f64;
        let w = s.param("weight", &[cout, cin / groups, k, k], Init::Normal((2.0 / fan_out).sqrt()))?;
        let bias = s.param("bias", &[cout], Init::Zeros)?;
        Ok(Self { w, b: Some(bias), stride, pad, groups })
    }

    /// Depthwise `k x k` convolution with "same" padding.
    pub fn depthwise<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, k: usize) -> Result<Self> {
        Self::new(b, name, channels, channels, k, 1, k / 2, channels)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.b.map(|b| ctx.p(b));
        x.conv2d(&ctx.p(self.w), b.as_ref(), self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Kernel == stride, no padding: exact `stride`-fold upsampling.
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let fan_out = (stride * stride * cout) as f64;
        let w = s.param("weight", &[cin, cout, stride, stride], Init::Normal((2.0 / fan_out).sqrt()))?;
        let bias = s.param("bias", &[cout], Init::Zeros)?;
        Ok(Self { w, b: Some(bias), stride })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.b.map(|b| ctx.p(b));
        x.conv_transpose2d(&ctx.p(self.w), b.as_ref(), self.stride, 0)
    }
}

/// Spatial factorization of a token sequence: one or more row-major
/// grids laid end to end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub grids: Vec<(usize, usize)>,
}

impl Layout {
    pub fn grid(h: usize, w: usize) -> Self {
        Self { grids: vec![(h, w)] }
    }

    pub fn len(&self) -> usize {
        self.grids.iter().map(|(h, w)| h * w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(offset, length, h, w)` of each segment.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut off = 0;
        self.grids.iter().map(move |&(h, w)| {
            let s = (off, h * w, h, w);
            off += h * w;
            s
        })
    }
}

/// `[N, h*w, C]` tokens to a `[N, C, h, w]` feature map.
pub fn tokens_to_map<'t, T: Scalar>(x: &Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape(format!("tokens {s:?} do not factor as {h}x{w}")));
    }
    x.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])
}

/// `[N, C, h, w]` feature map to `[N, h*w, C]` tokens.
pub fn map_to_tokens<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected a 4-d feature map, got {s:?}")));
    }
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Applies `f` to each grid segment of `x` (as a `[N, C, h, w]` map) and
/// concatenates the resulting token sequences.
pub fn per_segment<'t, T: Scalar>(x: &Var<'t, T>, layout: &Layout, mut f: impl FnMut(&Var<'t, T>, usize) -> Result<Var<'t, T>>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != layout.len() {
        return Err(Error::shape(format!("tokens {s:?} do not match layout {:?}", layout.grids)));
    }
    let mut parts = Vec::with_capacity(layout.grids.len());
    for (i, (off, len, h, w)) in layout.segments().enumerate() {
        let seg = if layout.grids.len() == 1 { *x } else { x.narrow(1, off, len)? };
        let map = tokens_to_map(&seg, h, w)?;
        parts.push(map_to_tokens(&f(&map, i)?)?);
    }
    if parts.len() == 1 {
        Ok(parts.pop().unwrap())
    } else {
        Var::concat(&parts, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn same_seed_same_init_across_precisions() {
        let mut s32 = ParamStore::<f32>::new();
        let mut s64 = ParamStore::<f64>::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        Linear::new(&mut Builder::new(&mut s32, &mut r1).scope("m"), "fc", 4, 3).unwrap();
        Linear::new(&mut Builder::new(&mut s64, &mut r2).scope("m"), "fc", 4, 3).unwrap();
        assert_eq!(s64.name(ParamId(0)), "m/fc/weight");
        let a = s32.get(ParamId(0));
        let b = s64.get(ParamId(0));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
            assert!(y.abs() <= 0.04);
        }
        assert!(s64.add("m/fc/weight", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn linear_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut Builder::new(&mut store, &mut rng), "fc", 3, 3).unwrap();
        *store.get_mut(lin.w) = Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = ctx.input(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        assert_eq!(lin.forward(&ctx, &x).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn token_map_round_trip() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 6, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>()).unwrap());
        let m = tokens_to_map(&x, 2, 3).unwrap();
        assert_eq!(m.shape(), vec![1, 2, 2, 3]);
        // channel 1 of token (1, 2) = token index 5
        assert_eq!(m.value().data()[6 + 5], 11.0);
        assert_eq!(map_to_tokens(&m).unwrap().value().data(), x.value().data());
    }
}
