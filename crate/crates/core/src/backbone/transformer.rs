//! SSA transformer encoder and decoder.

use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Builder, Conv2d, ConvTranspose2d, Ctx, LayerNorm, Linear};
use crate::tensor::{Scalar, Var};

use super::attention::SsaBlock;
use super::{ModelConfig, MultiScaleFeatures, Scale, StageSpec};

/// Convolutional stem: kernels 7, 3, 2 with strides 2, 1, 2 (4x reduction),
/// flattened to tokens and normalized.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    convs: [Conv2d; 3],
    norm: LayerNorm,
    pub divisor: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, dim: usize, divisor: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            convs: [
                Conv2d::new(&mut s, "conv0", cin, dim, 7, 2, 3, 1)?,
                Conv2d::new(&mut s, "conv1", dim, dim, 3, 1, 1, 1)?,
                Conv2d::new(&mut s, "conv2", dim, dim, 2, 2, 0, 1)?,
            ],
            norm: LayerNorm::new(&mut s, "norm", dim)?,
            divisor,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, image: &Var<'t, T>) -> Result<Scale<'t, T>> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("expected [N, C, H, W] image, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if h % self.divisor != 0 || w % self.divisor != 0 {
            return Err(Error::config(format!("input {h}x{w} is not divisible by {}", self.divisor)));
        }
        let x = self.convs[0].forward(ctx, image)?.relu()?;
        let x = self.convs[1].forward(ctx, &x)?.relu()?;
        let x = self.convs[2].forward(ctx, &x)?;
        Scale::new(self.norm.forward(ctx, &map_to_tokens(&x)?)?, h / 4, w / 4)
    }
}

/// 2x spatial upsampling with channel halving (transposed conv, kernel 2).
#[derive(Clone, Debug)]
pub struct PatchExpand {
    up: ConvTranspose2d,
    norm: LayerNorm,
    pub channels: usize,
}

impl PatchExpand {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::config(format!("patch expand needs an even channel count, got {channels}")));
        }
        let mut s = b.scope(name);
        Ok(Self { up: ConvTranspose2d::new(&mut s, "up", channels, channels / 2, 2)?, norm: LayerNorm::new(&mut s, "norm", channels / 2)?, channels })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Scale<'t, T>) -> Result<Scale<'t, T>> {
        if x.channels() != self.channels {
            return Err(Error::shape(format!("patch expand expects {} channels, got {:?}", self.channels, x.x.shape())));
        }
        let y = self.up.forward(ctx, &tokens_to_map(&x.x, x.h, x.w)?)?;
        Scale::new(self.norm.forward(ctx, &map_to_tokens(&y)?)?, 2 * x.h, 2 * x.w)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    embed: Option<(Conv2d, LayerNorm)>,
    blocks: Vec<SsaBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    stem: PatchEmbed,
    stages: Vec<EncoderStage>,
}

impl TransformerEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("encoder");
        let specs = cfg.stages();
        let stem = PatchEmbed::new(&mut s, "stem", cfg.in_channels, specs[0].channels, cfg.divisor())?;
        let mut stages = Vec::new();
        for (i, sp) in specs.iter().enumerate() {
            let mut st = s.scope(&format!("stage{}", sp.index));
            let embed = if i == 0 {
                None
            } else {
                let conv = Conv2d::new(&mut st, "embed", specs[i - 1].channels, sp.channels, 3, 2, 1, 1)?;
                Some((conv, LayerNorm::new(&mut st, "embed_norm", sp.channels)?))
            };
            let blocks =
                (0..sp.depth).map(|j| SsaBlock::new(&mut st, &format!("block{j}"), sp.channels, sp.heads, sp.rates, cfg.mlp_ratio)).collect::<Result<_>>()?;
            stages.push(EncoderStage { embed, blocks, norm: LayerNorm::new(&mut st, "norm", sp.channels)? });
        }
        Ok(Self { stem, stages })
    }

    pub fn patch_embed<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, image: &Var<'t, T>) -> Result<Scale<'t, T>> {
        self.stem.forward(ctx, image)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, image: &Var<'t, T>) -> Result<MultiScaleFeatures<'t, T>> {
        let mut x = self.stem.forward(ctx, image)?;
        let mut out = Vec::with_capacity(4);
        for (i, st) in self.stages.iter().enumerate() {
            if let Some((conv, norm)) = &st.embed {
                let m = conv.forward(ctx, &tokens_to_map(&x.x, x.h, x.w)?)?;
                x = Scale::new(norm.forward(ctx, &map_to_tokens(&m)?)?, x.h / 2, x.w / 2)?;
            }
            let layout = x.layout();
            let mut t = x.x;
            for blk in &st.blocks {
                t = blk.forward(ctx, &t, &layout)?;
            }
            x = x.with(st.norm.forward(ctx, &t)?)?;
            ctx.record(&format!("encoder/F{}", i + 1), &x.x);
            out.push(x);
        }
        Ok(MultiScaleFeatures { scales: out.try_into().expect("four stages") })
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    expand: PatchExpand,
    reduce: Linear,
    blocks: Vec<SsaBlock>,
}

#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    proj4: Linear,
    stages: Vec<DecoderStage>,
    head_up: ConvTranspose2d,
    head: Conv2d,
    specs: [StageSpec; 4],
}

/// Checks a skip feature against the upsampled path at decoder stage `i`.
pub(crate) fn check_skip<T: Scalar>(i: usize, up: &Scale<'_, T>, skip: &Scale<'_, T>) -> Result<()> {
    if up.h != skip.h || up.w != skip.w || up.channels() != skip.channels() {
        return Err(Error::shape(format!(
            "decoder stage {i}: upsampled {:?} ({}x{}) does not match skip {:?} ({}x{})",
            up.x.shape(),
            up.h,
            up.w,
            skip.x.shape(),
            skip.h,
            skip.w
        )));
    }
    Ok(())
}

impl TransformerDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("decoder");
        let specs = cfg.stages();
        let proj4 = Linear::new(&mut s.scope("stage4"), "proj", specs[3].channels, specs[3].channels)?;
        let mut stages = Vec::new();
        for i in (0..3).rev() {
            let sp = specs[i];
            let mut st = s.scope(&format!("stage{}", sp.index));
            let expand = PatchExpand::new(&mut st, "expand", specs[i + 1].channels)?;
            let reduce = Linear::new(&mut st, "reduce", 2 * sp.channels, sp.channels)?;
            let blocks = (0..sp.decoder_depth)
                .map(|j| SsaBlock::new(&mut st, &format!("block{j}"), sp.channels, sp.heads, sp.rates, cfg.mlp_ratio))
                .collect::<Result<_>>()?;
            stages.push(DecoderStage { expand, reduce, blocks });
        }
        let c1 = specs[0].channels;
        let mut h = s.scope("head");
        let head_up = ConvTranspose2d::new(&mut h, "up", c1, c1, 4)?;
        let head = Conv2d::new(&mut h, "classify", c1, cfg.num_classes, 1, 1, 0, 1)?;
        Ok(Self { proj4, stages, head_up, head, specs })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: &MultiScaleFeatures<'t, T>) -> Result<Var<'t, T>> {
        for (sc, sp) in f.scales.iter().zip(&self.specs) {
            if sc.channels() != sp.channels {
                return Err(Error::shape(format!("decoder stage {}: expected {} channels, got {:?}", sp.index, sp.channels, sc.x.shape())));
            }
        }
        let f4 = f.scales[3];
        let mut x = f4.with(self.proj4.forward(ctx, &f4.x)?)?;
        ctx.record("decoder/D4", &x.x);
        for (st, i) in self.stages.iter().zip((0..3).rev()) {
            let up = st.expand.forward(ctx, &x)?;
            let skip = f.scales[i];
            check_skip(i + 1, &up, &skip)?;
            let cat = Var::concat(&[up.x, skip.x], 2)?;
            let layout = skip.layout();
            let mut t = st.reduce.forward(ctx, &cat)?;
            for blk in &st.blocks {
                t = blk.forward(ctx, &t, &layout)?;
            }
            x = skip.with(t)?;
            ctx.record(&format!("decoder/D{}", i + 1), &x.x);
        }
        let m = self.head_up.forward(ctx, &tokens_to_map(&x.x, x.h, x.w)?)?;
        self.head.forward(ctx, &m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn stem_reduces_by_four() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stem = PatchEmbed::new(&mut Builder::new(&mut store, &mut rng), "stem", 3, 8, 32).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &store);
        let img = ctx.input(rand_tensor(&[1, 3, 64, 64], &mut rng));
        let x = stem.forward(&ctx, &img).unwrap();
        assert_eq!(x.x.shape(), vec![1, 256, 8]);
        let bad = ctx.input(rand_tensor(&[1, 3, 50, 50], &mut rng));
        assert!(stem.forward(&ctx, &bad).unwrap_err().to_string().contains("32"));
    }

    #[test]
    fn stem_on_224_gives_3136_tokens() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stem = PatchEmbed::new(&mut Builder::new(&mut store, &mut rng), "stem", 3, 4, 32).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &store);
        let img = ctx.input(rand_tensor(&[1, 3, 224, 224], &mut rng));
        let x = stem.forward(&ctx, &img).unwrap();
        assert_eq!((x.x.shape()[1], x.h, x.w), (3136, 56, 56));
    }

    #[test]
    fn patch_expand_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let e1 = PatchExpand::new(&mut b, "e1", 512).unwrap();
        let e2 = PatchExpand::new(&mut b, "e2", 256).unwrap();
        assert!(PatchExpand::new(&mut b, "odd", 5).is_err());
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &store);
        let x = Scale::new(ctx.input(rand_tensor(&[1, 49, 512], &mut rng)), 7, 7).unwrap();
        let y = e1.forward(&ctx, &x).unwrap();
        assert_eq!(y.x.shape(), vec![1, 196, 256]);
        let z = e2.forward(&ctx, &y).unwrap();
        assert_eq!((z.h, z.w, z.x.shape()[0]), (28, 28, 1));
    }
}
