//! Convolutional encoder/decoder (UNet-style double-conv stages, strides
//! 1, 2, 2, 2) sharing the token interface of the transformer variant.

use crate::error::Result;
use crate::nn::{map_to_tokens, tokens_to_map, Builder, Conv2d, ConvTranspose2d, Ctx, GroupNorm, Linear};
use crate::tensor::{Scalar, Var};

use super::transformer::check_skip;
use super::{ModelConfig, MultiScaleFeatures, Scale, StageSpec};

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn norm_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.max(1)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct ConvNormRelu {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNormRelu {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize, groups: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self { conv: Conv2d::new(&mut s, "conv", cin, cout, 3, stride, 1, 1)?, norm: GroupNorm::new(&mut s, "norm", cout, norm_groups(cout, groups))? })
    }

    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.norm.forward(ctx, &self.conv.forward(ctx, x)?)?.relu()
    }
}

/// Two 3x3 conv + group norm + ReLU layers.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    a: ConvNormRelu,
    b: ConvNormRelu,
}

impl DoubleConv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, groups: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self { a: ConvNormRelu::new(&mut s, "a", cin, cout, 1, groups)?, b: ConvNormRelu::new(&mut s, "b", cout, cout, 1, groups)? })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.b.forward(ctx, &self.a.forward(ctx, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct CnnEncoder {
    down: Vec<Option<ConvNormRelu>>,
    blocks: Vec<Vec<DoubleConv>>,
    divisor: usize,
}

impl CnnEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("encoder");
        let specs = cfg.stages();
        let (mut down, mut blocks) = (Vec::new(), Vec::new());
        for (i, sp) in specs.iter().enumerate() {
            let mut st = s.scope(&format!("stage{}", sp.index));
            let mut cin = if i == 0 { cfg.in_channels } else { specs[i - 1].channels };
            down.push(if i == 0 {
                None
            } else {
                let d = ConvNormRelu::new(&mut st, "down", cin, sp.channels, 2, cfg.norm_groups)?;
                cin = sp.channels;
                Some(d)
            });
            let mut stage = Vec::new();
            for j in 0..sp.depth.max(1) {
                stage.push(DoubleConv::new(&mut st, &format!("block{j}"), if j == 0 { cin } else { sp.channels }, sp.channels, cfg.norm_groups)?);
            }
            blocks.push(stage);
        }
        Ok(Self { down, blocks, divisor: cfg.divisor() })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, image: &Var<'t, T>) -> Result<MultiScaleFeatures<'t, T>> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(crate::Error::shape(format!("expected [N, C, H, W] image, got {s:?}")));
        }
        if s[2] % self.divisor != 0 || s[3] % self.divisor != 0 {
            return Err(crate::Error::config(format!("input {}x{} is not divisible by {}", s[2], s[3], self.divisor)));
        }
        let mut m = *image;
        let mut out = Vec::with_capacity(4);
        for (i, (down, blocks)) in self.down.iter().zip(&self.blocks).enumerate() {
            if let Some(d) = down {
                m = d.forward(ctx, &m)?;
            }
            for blk in blocks {
                m = blk.forward(ctx, &m)?;
            }
            let ms = m.shape();
            let sc = Scale::new(map_to_tokens(&m)?, ms[2], ms[3])?;
            ctx.record(&format!("encoder/F{}", i + 1), &sc.x);
            out.push(sc);
        }
        Ok(MultiScaleFeatures { scales: out.try_into().expect("four stages") })
    }
}

#[derive(Clone, Debug)]
struct CnnDecoderStage {
    up: ConvTranspose2d,
    reduce: Linear,
    blocks: Vec<DoubleConv>,
}

#[derive(Clone, Debug)]
pub struct CnnDecoder {
    proj4: Linear,
    stages: Vec<CnnDecoderStage>,
    head: Conv2d,
    specs: [StageSpec; 4],
}

impl CnnDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("decoder");
        let specs = cfg.stages();
        let proj4 = Linear::new(&mut s.scope("stage4"), "proj", specs[3].channels, specs[3].channels)?;
        let mut stages = Vec::new();
        for i in (0..3).rev() {
            let sp = specs[i];
            let mut st = s.scope(&format!("stage{}", sp.index));
            let up = ConvTranspose2d::new(&mut st, "up", specs[i + 1].channels, sp.channels, 2)?;
            let reduce = Linear::new(&mut st, "reduce", 2 * sp.channels, sp.channels)?;
            let blocks = (0..sp.decoder_depth.max(1))
                .map(|j| DoubleConv::new(&mut st, &format!("block{j}"), sp.channels, sp.channels, cfg.norm_groups))
                .collect::<Result<_>>()?;
            stages.push(CnnDecoderStage { up, reduce, blocks });
        }
        let head = Conv2d::new(&mut s.scope("head"), "classify", specs[0].channels, cfg.num_classes, 1, 1, 0, 1)?;
        Ok(Self { proj4, stages, head, specs })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: &MultiScaleFeatures<'t, T>) -> Result<Var<'t, T>> {
        for (sc, sp) in f.scales.iter().zip(&self.specs) {
            if sc.channels() != sp.channels {
                return Err(crate::Error::shape(format!("decoder stage {}: expected {} channels, got {:?}", sp.index, sp.channels, sc.x.shape())));
            }
        }
        let f4 = f.scales[3];
        let mut x = f4.with(self.proj4.forward(ctx, &f4.x)?)?;
        ctx.record("decoder/D4", &x.x);
        for (st, i) in self.stages.iter().zip((0..3).rev()) {
            let m = st.up.forward(ctx, &tokens_to_map(&x.x, x.h, x.w)?)?;
            let up = Scale::new(map_to_tokens(&m)?, 2 * x.h, 2 * x.w)?;
            let skip = f.scales[i];
            check_skip(i + 1, &up, &skip)?;
            let t = st.reduce.forward(ctx, &Var::concat(&[up.x, skip.x], 2)?)?;
            let mut m = tokens_to_map(&t, skip.h, skip.w)?;
            for blk in &st.blocks {
                m = blk.forward(ctx, &m)?;
            }
            x = skip.with(map_to_tokens(&m)?)?;
            ctx.record(&format!("decoder/D{}", i + 1), &x.x);
        }
        self.head.forward(ctx, &tokens_to_map(&x.x, x.h, x.w)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_count_divides_channels() {
        assert_eq!(norm_groups(8, 4), 4);
        assert_eq!(norm_groups(6, 4), 3);
        assert_eq!(norm_groups(7, 4), 1);
    }
}
