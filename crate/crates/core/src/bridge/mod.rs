//! Cross Perceptron bridge replacing the plain skip connections: three
//! CPA-based perceptrons, the M-CPA perceptron over folded scale pairs,
//! and the Global Perceptron.

pub mod fold;
pub mod perceptron;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{MultiScaleFeatures, Scale};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx};
use crate::tensor::Scalar;

pub use fold::{fold_scales, FoldedSequence, Segment};
pub use perceptron::{CpaInput, CrossPerceptron, GlobalPerceptron, ModifiedCpa, PerceptronFfn};

/// Where a CPA unit takes its keys and values from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Source {
    /// Encoder output F_i.
    Encoder(usize),
    /// Output of perceptron i.
    Perceptron(usize),
}

impl Source {
    /// Stage whose native grid and width the source has.
    pub fn stage(self) -> usize {
        match self {
            Source::Encoder(i) | Source::Perceptron(i) => i,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Encoder(i) => write!(f, "enc{i}"),
            Source::Perceptron(i) => write!(f, "p{i}"),
        }
    }
}

impl TryFrom<String> for Source {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let parse = |rest: &str| rest.parse::<usize>().ok().filter(|i| (1..=4).contains(i));
        if let Some(i) = s.strip_prefix("enc").and_then(parse) {
            Ok(Source::Encoder(i))
        } else if let Some(i) = s.strip_prefix('p').and_then(parse) {
            Ok(Source::Perceptron(i))
        } else {
            Err(format!("unknown K/V source {s:?} (expected enc1..enc4 or p1..p3)"))
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> String {
        s.to_string()
    }
}

/// A K/V source resampled to the stride of `stage`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvAdapter {
    pub source: Source,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptronSpec {
    /// Stage whose stride the queries are pooled to.
    pub query_stage: usize,
    pub kv: Vec<KvAdapter>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub perceptron1: bool,
    pub perceptron2: bool,
    pub perceptron3: bool,
    pub perceptron4: bool,
    pub global: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Toggles {
    pub fn all(on: bool) -> Self {
        Self { perceptron1: on, perceptron2: on, perceptron3: on, perceptron4: on, global: on }
    }

    pub fn perceptron(&self, i: usize) -> bool {
        [self.perceptron1, self.perceptron2, self.perceptron3, self.perceptron4][i - 1]
    }

    /// The ablation grid: backbone only, then perceptrons 1, 1+2, 1+2+3 and
    /// 1+2+3+4, each without and with the Global Perceptron.
    pub fn ablation_grid() -> Vec<(String, Toggles)> {
        let mut out = Vec::new();
        for global in [false, true] {
            for n in 0..=4 {
                let t = Toggles { perceptron1: n >= 1, perceptron2: n >= 2, perceptron3: n >= 3, perceptron4: n >= 4, global };
                let arch = if n == 0 { "Backbone".to_string() } else { format!("Perceptron {}", (1..=n).map(|i| i.to_string()).collect::<Vec<_>>().join("+")) };
                out.push((format!("{arch}{}", if global { " + G-Perceptron" } else { "" }), t));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub enabled: Toggles,
    /// Common channel width of the folded scale sequences.
    pub fold_width: usize,
    /// CPA attention width as a multiple of the perceptron's stage width.
    pub width_factor: usize,
    pub cpa_heads: usize,
    pub perceptrons: [PerceptronSpec; 3],
    pub mcpa_rates: [usize; 2],
    pub mcpa_heads: usize,
    pub global_rates: [usize; 2],
    pub global_heads: usize,
    pub ffn_ratio: usize,
    /// Adds F_i to F_i'' (off by default).
    pub skip_residual: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        let kv = |s: Source, stage| KvAdapter { source: s, stage };
        Self {
            enabled: Toggles::default(),
            fold_width: 32,
            width_factor: 2,
            cpa_heads: 2,
            perceptrons: [
                PerceptronSpec { query_stage: 2, kv: vec![kv(Source::Encoder(1), 2)] },
                PerceptronSpec { query_stage: 3, kv: vec![kv(Source::Encoder(1), 2), kv(Source::Perceptron(1), 2)] },
                PerceptronSpec { query_stage: 4, kv: vec![kv(Source::Perceptron(1), 2), kv(Source::Encoder(2), 3), kv(Source::Perceptron(2), 3)] },
            ],
            mcpa_rates: [8, 4],
            mcpa_heads: 2,
            global_rates: [4, 2],
            global_heads: 2,
            ffn_ratio: 4,
            skip_residual: false,
        }
    }
}

impl BridgeConfig {
    /// Small widths and rates for the 32x32 test configuration.
    pub fn tiny() -> Self {
        Self { fold_width: 4, mcpa_rates: [4, 2], global_rates: [2, 1], ffn_ratio: 2, ..Self::default() }
    }

    pub fn validate(&self, channels: &[usize; 4]) -> Result<()> {
        let c1 = self.fold_width;
        if c1 == 0 || channels.iter().any(|c| c % c1 != 0) {
            return Err(Error::config(format!("every stage width {channels:?} must be divisible by fold width {c1}")));
        }
        if self.width_factor == 0 || self.ffn_ratio == 0 {
            return Err(Error::config("bridge width_factor and ffn_ratio must be positive"));
        }
        for (heads, name) in [(self.mcpa_heads, "mcpa_heads"), (self.global_heads, "global_heads")] {
            if heads < 2 || heads % 2 != 0 || c1 % heads != 0 {
                return Err(Error::config(format!("{name} = {heads} must be even and divide fold width {c1}")));
            }
        }
        if self.mcpa_rates.contains(&0) || self.global_rates.contains(&0) {
            return Err(Error::config("bridge MTA rates must be positive"));
        }
        for (i, p) in self.perceptrons.iter().enumerate() {
            let idx = i + 1;
            if !(idx..=4).contains(&p.query_stage) {
                return Err(Error::config(format!("perceptron {idx}: query_stage {} must be in {idx}..=4", p.query_stage)));
            }
            let width = self.width_factor * channels[i];
            if self.cpa_heads == 0 || width % self.cpa_heads != 0 {
                return Err(Error::config(format!("perceptron {idx}: width {width} not divisible by {} heads", self.cpa_heads)));
            }
            if p.kv.is_empty() {
                return Err(Error::config(format!("perceptron {idx}: needs at least one K/V source")));
            }
            for a in &p.kv {
                let ok_src = match a.source {
                    Source::Encoder(j) => (1..=4).contains(&j),
                    Source::Perceptron(j) => j < idx,
                };
                if !ok_src {
                    return Err(Error::config(format!("perceptron {idx}: source {} is not available", a.source)));
                }
                if !(a.source.stage()..=4).contains(&a.stage) {
                    return Err(Error::config(format!("perceptron {idx}: cannot resample {} to stage {}", a.source, a.stage)));
                }
            }
        }
        Ok(())
    }
}

/// Bridge parameters; disabled parts hold no parameters and pass through.
#[derive(Clone, Debug)]
pub struct Bridge {
    cfg: BridgeConfig,
    strides: [usize; 4],
    cpa: Vec<Option<CrossPerceptron>>,
    f4_ffn: Option<PerceptronFfn>,
    mcpa: Option<ModifiedCpa>,
    global: Option<GlobalPerceptron>,
}

impl Bridge {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &BridgeConfig, channels: &[usize; 4], strides: [usize; 4]) -> Result<Self> {
        cfg.validate(channels)?;
        let mut s = b.scope("bridge");
        let mut cpa = Vec::new();
        for (i, p) in cfg.perceptrons.iter().enumerate() {
            cpa.push(if cfg.enabled.perceptron(i + 1) {
                let q_factor = strides[p.query_stage - 1] / strides[i];
                let kv_dims: Vec<usize> = p.kv.iter().map(|a| channels[a.source.stage() - 1]).collect();
                Some(CrossPerceptron::new(&mut s, i + 1, channels[i], q_factor, &kv_dims, cfg.width_factor * channels[i], cfg.cpa_heads, cfg.ffn_ratio)?)
            } else {
                None
            });
        }
        let (f4_ffn, mcpa) = if cfg.enabled.perceptron4 {
            let mut p4 = s.scope("perceptron4");
            let ffn = PerceptronFfn::new(&mut p4, "f4_ffn", channels[3], cfg.ffn_ratio)?;
            (Some(ffn), Some(ModifiedCpa::new(&mut s, cfg.fold_width, cfg.mcpa_heads, cfg.mcpa_rates, cfg.ffn_ratio)?))
        } else {
            (None, None)
        };
        let global = if cfg.enabled.global {
            Some(GlobalPerceptron::new(&mut s, cfg.fold_width, cfg.global_heads, cfg.global_rates, cfg.ffn_ratio, channels)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), strides, cpa, f4_ffn, mcpa, global })
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.cfg
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, f: &MultiScaleFeatures<'t, T>) -> Result<MultiScaleFeatures<'t, T>> {
        let enc = f.scales;
        // P_i outputs, pass-through when disabled
        let mut p: Vec<Scale<'t, T>> = Vec::with_capacity(3);
        for (i, unit) in self.cpa.iter().enumerate() {
            let out = match unit {
                None => enc[i],
                Some(unit) => {
                    let spec = &self.cfg.perceptrons[i];
                    let inputs = spec
                        .kv
                        .iter()
                        .map(|a| {
                            let src = match a.source {
                                Source::Encoder(j) => enc[j - 1],
                                Source::Perceptron(j) => p[j - 1],
                            };
                            CpaInput { kv: src, factor: self.strides[a.stage - 1] / self.strides[a.source.stage() - 1] }
                        })
                        .collect::<Vec<_>>();
                    unit.forward(ctx, &enc[i], &inputs)?
                }
            };
            p.push(out);
        }
        let f4 = match &self.f4_ffn {
            Some(ffn) => enc[3].with(ffn.forward(ctx, &enc[3].x)?)?,
            None => enc[3],
        };
        let c1 = self.cfg.fold_width;
        let f12 = fold_scales(&[(1, p[0]), (2, p[1])], c1)?;
        let f34 = fold_scales(&[(3, p[2]), (4, f4)], c1)?;
        ctx.record("bridge/F12", &f12.tokens);
        ctx.record("bridge/F34", &f34.tokens);
        let f34p = match &self.mcpa {
            Some(m) => m.forward(ctx, &f12, &f34)?,
            None => f34,
        };
        let merged = f12.concat(&f34p)?;
        let outs = match &self.global {
            Some(g) => g.forward(ctx, &merged)?,
            None => merged.unfold()?,
        };
        let mut scales = Vec::with_capacity(4);
        for (i, (o, e)) in outs.into_iter().zip(enc).enumerate() {
            let x = if self.cfg.skip_residual { o.x.add(&e.x)? } else { o.x };
            let sc = e.with(x)?;
            ctx.record(&format!("bridge/F{}''", i + 1), &sc.x);
            scales.push(sc);
        }
        Ok(MultiScaleFeatures { scales: scales.try_into().expect("four scales") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_strings_round_trip() {
        for s in ["enc1", "enc4", "p1", "p3"] {
            let src = Source::try_from(s.to_string()).unwrap();
            assert_eq!(String::from(src), s);
        }
        assert!(Source::try_from("enc5".to_string()).is_err());
        assert!(Source::try_from("q1".to_string()).is_err());
    }

    #[test]
    fn ablation_grid_rows() {
        let g = Toggles::ablation_grid();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0].1, Toggles::all(false));
        assert_eq!(g[9].1, Toggles::all(true));
        assert_eq!(g[2].0, "Perceptron 1+2");
        assert!(g[2].1.perceptron2 && !g[2].1.perceptron3 && !g[2].1.global);
    }

    #[test]
    fn validation() {
        let ch = [64, 128, 256, 512];
        BridgeConfig::default().validate(&ch).unwrap();
        let mut bad = BridgeConfig::default();
        bad.perceptrons[0].kv[0].source = Source::Perceptron(1);
        assert!(bad.validate(&ch).is_err());
        assert!(BridgeConfig { fold_width: 48, ..BridgeConfig::default() }.validate(&ch).is_err());
    }
}
