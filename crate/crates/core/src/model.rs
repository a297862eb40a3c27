//! The full segmentation network and its analytic shape plan.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::cnn::{CnnDecoder, CnnEncoder};
use crate::backbone::transformer::{TransformerDecoder, TransformerEncoder};
use crate::backbone::{ModelConfig, MultiScaleFeatures, Variant};
use crate::bridge::fold::fold_rows;
use crate::bridge::Bridge;
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, ParamStore};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug)]
enum Encoder {
    Transformer(TransformerEncoder),
    Cnn(CnnEncoder),
}

#[derive(Clone, Debug)]
enum Decoder {
    Transformer(TransformerDecoder),
    Cnn(CnnDecoder),
}

/// Encoder, Cross Perceptron bridge and decoder.
#[derive(Clone, Debug)]
pub struct Mcpa {
    pub cfg: ModelConfig,
    encoder: Encoder,
    bridge: Bridge,
    decoder: Decoder,
}

impl Mcpa {
    /// Registers parameters under `prefix` (may be empty).
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut root = Builder::new(store, rng);
        let mut b = if prefix.is_empty() { root.scope("") } else { root.scope(prefix) };
        let encoder = match cfg.variant {
            Variant::Transformer => Encoder::Transformer(TransformerEncoder::new(&mut b, cfg)?),
            Variant::Cnn => Encoder::Cnn(CnnEncoder::new(&mut b, cfg)?),
        };
        let bridge = Bridge::new(&mut b, &cfg.bridge, &cfg.channels, cfg.strides())?;
        let decoder = match cfg.variant {
            Variant::Transformer => Decoder::Transformer(TransformerDecoder::new(&mut b, cfg)?),
            Variant::Cnn => Decoder::Cnn(CnnDecoder::new(&mut b, cfg)?),
        };
        Ok(Self { cfg: cfg.clone(), encoder, bridge, decoder })
    }

    /// Fresh parameters from `seed`.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Self::new(&mut store, &mut rng, "", cfg)?;
        Ok((m, store))
    }

    pub fn encode<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, image: &Var<'t, T>) -> Result<MultiScaleFeatures<'t, T>> {
        match &self.encoder {
            Encoder::Transformer(e) => e.forward(ctx, image),
            Encoder::Cnn(e) => e.forward(ctx, image),
        }
    }

    pub fn bridge<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: &MultiScaleFeatures<'t, T>) -> Result<MultiScaleFeatures<'t, T>> {
        self.bridge.forward(ctx, f)
    }

    pub fn decode<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: &MultiScaleFeatures<'t, T>) -> Result<Var<'t, T>> {
        match &self.decoder {
            Decoder::Transformer(d) => d.forward(ctx, f),
            Decoder::Cnn(d) => d.forward(ctx, f),
        }
    }

    /// Logits `[N, num_classes, H, W]` for images `[N, C, H, W]`.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, image: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::shape(format!("expected [N, {}, H, W] images, got {s:?}", self.cfg.in_channels)));
        }
        self.cfg.check_input(s[2], s[3])?;
        let f = self.encode(ctx, image)?;
        let g = self.bridge(ctx, &f)?;
        let logits = self.decode(ctx, &g)?;
        ctx.record("logits", &logits);
        Ok(logits)
    }
}

/// Every traced shape of one forward pass, derived from the configuration
/// alone: encoder scales, MTA key lengths, perceptron query/key/concat
/// shapes, folded sequences, bridge outputs, decoder stages and logits.
pub fn shape_plan(cfg: &ModelConfig, n: usize, h: usize, w: usize) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let grids = cfg.grids(h, w)?;
    let specs = cfg.stages();
    let len = |i: usize| grids[i].0 * grids[i].1;
    let at = |stage: usize| grids[stage - 1].0 * grids[stage - 1].1;
    let mut plan = Vec::new();
    let mut push = |label: String, shape: Vec<usize>| plan.push((label, shape));

    let mta = |grid: (usize, usize), r: usize| -> Result<usize> {
        if grid.0 % r != 0 || grid.1 % r != 0 {
            return Err(Error::config(format!("grid {}x{} is not divisible by aggregation rate {r}", grid.0, grid.1)));
        }
        Ok((grid.0 / r) * (grid.1 / r))
    };
    let ssa_keys =
        |prefix: &str, grids: &[(usize, usize)], dim: usize, heads: usize, rates: [usize; 2], push: &mut dyn FnMut(String, Vec<usize>)| -> Result<()> {
            for (g, &r) in rates.iter().enumerate() {
                let lk: usize = grids.iter().map(|&gr| mta(gr, r)).sum::<Result<usize>>()?;
                push(format!("{prefix}/kv{g}"), vec![n, lk, dim / heads * (heads / 2)]);
            }
            Ok(())
        };

    for (i, sp) in specs.iter().enumerate() {
        if cfg.variant == Variant::Transformer {
            for j in 0..sp.depth {
                ssa_keys(&format!("encoder/stage{}/block{j}/attn", sp.index), &[grids[i]], sp.channels, sp.heads, sp.rates, &mut push)?;
            }
        }
        push(format!("encoder/F{}", i + 1), vec![n, len(i), sp.channels]);
    }

    let bc = &cfg.bridge;
    for (i, p) in bc.perceptrons.iter().enumerate() {
        if !bc.enabled.perceptron(i + 1) {
            continue;
        }
        let label = format!("bridge/perceptron{}", i + 1);
        let width = bc.width_factor * specs[i].channels;
        push(format!("{label}/q"), vec![n, at(p.query_stage), specs[i].channels]);
        for (j, a) in p.kv.iter().enumerate() {
            push(format!("{label}/cpa{j}/kv"), vec![n, at(a.stage), width]);
        }
        push(format!("{label}/concat"), vec![n, at(p.query_stage), p.kv.len() * specs[i].channels]);
        push(format!("{label}/out"), vec![n, len(i), specs[i].channels]);
    }
    let c1 = bc.fold_width;
    let seg = |i: usize| {
        let m = specs[i].channels / c1;
        let a = fold_rows(m);
        (len(i) * m, (grids[i].0 * a, grids[i].1 * (m / a)))
    };
    let (l1, g1) = seg(0);
    let (l2, g2) = seg(1);
    let (l3, g3) = seg(2);
    let (l4, g4) = seg(3);
    push("bridge/F12".into(), vec![n, l1 + l2, c1]);
    push("bridge/F34".into(), vec![n, l3 + l4, c1]);
    if bc.enabled.perceptron4 {
        push("bridge/perceptron4/q".into(), vec![n, l3 + l4, c1]);
        ssa_keys("bridge/perceptron4/mcpa", &[g1, g2], c1, bc.mcpa_heads, bc.mcpa_rates, &mut push)?;
        push("bridge/perceptron4/out".into(), vec![n, l3 + l4, c1]);
    }
    if bc.enabled.global {
        push("bridge/global/in".into(), vec![n, l1 + l2 + l3 + l4, c1]);
        ssa_keys("bridge/global/block/attn", &[g1, g2, g3, g4], c1, bc.global_heads, bc.global_rates, &mut push)?;
    }
    for (i, sp) in specs.iter().enumerate() {
        push(format!("bridge/F{}''", i + 1), vec![n, len(i), sp.channels]);
    }

    push("decoder/D4".into(), vec![n, len(3), specs[3].channels]);
    for i in (0..3).rev() {
        let sp = specs[i];
        if cfg.variant == Variant::Transformer {
            for j in 0..sp.decoder_depth {
                ssa_keys(&format!("decoder/stage{}/block{j}/attn", sp.index), &[grids[i]], sp.channels, sp.heads, sp.rates, &mut push)?;
            }
        }
        push(format!("decoder/D{}", i + 1), vec![n, len(i), sp.channels]);
    }
    push("logits".into(), vec![n, cfg.num_classes, h, w]);
    Ok(plan)
}

/// Names the source feeding each CPA unit, for reports.
pub fn adapter_table(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<String>> {
    let grids = cfg.grids(h, w)?;
    let at = |s: usize| grids[s - 1].0 * grids[s - 1].1;
    let mut rows = Vec::new();
    for (i, p) in cfg.bridge.perceptrons.iter().enumerate() {
        let width = cfg.bridge.width_factor * cfg.channels[i];
        let kv: Vec<String> = p.kv.iter().map(|a| format!("{}@{}x{width}", a.source, at(a.stage))).collect();
        rows.push(format!("perceptron{}: Q {}x{width}; K/V {}", i + 1, at(p.query_stage), kv.join(", ")));
    }
    Ok(rows)
}
