//! Finite-difference verification of the whole training objective: every
//! tape primitive, the segmentation loss, and the dual-branch total loss
//! with respect to parameters of every module.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::loss::{segmentation_loss, LabelMap, LossWeights};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::pdbs::{dual_forward_with, total_loss, DualBranch, ScheduleParams};
use crate::tensor::gradcheck::{check_fn_with_fault, primitive_suites, FdReport, Probe, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::tensor::{OpKind, Tape, Tensor};

/// Module a parameter belongs to: `main/encoder`, `fine/bridge/perceptron2`,
/// and so on.
pub fn component_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('/').collect();
    let depth = if parts.get(1) == Some(&"bridge") { 3 } else { 2 };
    parts[..depth.min(parts.len() - 1)].join("/")
}

fn random_batch(cfg: &ModelConfig, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, LabelMap)> {
    let numel = n * cfg.in_channels * size * size;
    let img = Tensor::new(&[n, cfg.in_channels, size, size], (0..numel).map(|_| StandardNormal.sample(rng)).collect())?;
    let labels = LabelMap::new(n, size, size, (0..n * size * size).map(|_| rng.gen_range(0..cfg.num_classes) as u8).collect())?;
    Ok((img, labels))
}

/// Central differences of the dual-branch total loss at epoch `e` with
/// respect to `per_component` sampled coordinates of every module. The
/// erase set is computed once and held fixed, since the routing is not
/// differentiable.
pub fn model_suites(
    cfg: &ModelConfig,
    sched: &ScheduleParams,
    e: f64,
    size: usize,
    per_component: usize,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let model = DualBranch::new(&mut store, &mut rng, cfg)?;
    let (img, labels) = random_batch(cfg, 2, size, &mut rng)?;
    let w = LossWeights::default();

    let tape = Tape::new();
    tape.inject_fault(fault);
    let ctx = Ctx::new(&tape, &store);
    let out = dual_forward_with(&model, &ctx, &img, sched.k, None)?;
    let erased = out.erased_idx.clone();
    let loss = total_loss(&out, &labels, e, sched, &w)?.total;
    tape.backward(loss)?;
    let grads = ctx.grads();
    drop(ctx);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let out = dual_forward_with(&model, &ctx, &img, sched.k, Some(&erased))?;
        Ok(total_loss(&out, &labels, e, sched, &w)?.total.value().item())
    };

    let mut groups: BTreeMap<String, Vec<ParamId>> = BTreeMap::new();
    for id in store.ids() {
        groups.entry(component_of(store.name(id))).or_default().push(id);
    }
    let mut reports = Vec::new();
    for (name, ids) in groups {
        let mut probes = Vec::with_capacity(per_component);
        for _ in 0..per_component {
            let id = ids[rng.gen_range(0..ids.len())];
            let j = rng.gen_range(0..store.get(id).numel());
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + DEFAULT_STEP;
            let up = eval(&store)?;
            store.get_mut(id).data_mut()[j] = orig - DEFAULT_STEP;
            let down = eval(&store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            probes.push(Probe { label: format!("{}[{j}]", store.name(id)), analytic, numeric: (up - down) / (2.0 * DEFAULT_STEP) });
        }
        reports.push(FdReport { name, probes });
    }
    Ok(reports)
}

/// The segmentation loss with respect to its logits.
pub fn loss_suite(samples: usize, seed: u64, fault: Option<OpKind>) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::new(&[2, 3, 4, 4], (0..96).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
    let labels = LabelMap::new(2, 4, 4, (0..32).map(|_| rng.gen_range(0..3)).collect())?;
    check_fn_with_fault("loss/segmentation", &[logits], samples, seed, DEFAULT_STEP, fault, |_, v| {
        Ok(segmentation_loss(&v[0], &labels, &LossWeights::default())?.total)
    })
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub suites: Vec<FdReport>,
    /// Parameter coordinates probed by the model-level suites.
    pub sampled_params: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed(self.tolerance))
    }

    pub fn failures(&self) -> Vec<&FdReport> {
        self.suites.iter().filter(|s| !s.passed(self.tolerance)).collect()
    }

    /// One line per component: name, probe count, worst relative error,
    /// verdict, and the worst probe's label.
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .suites
            .iter()
            .map(|s| {
                let verdict = if s.passed(self.tolerance) { "ok" } else { "FAIL" };
                let at = s.worst().map_or(String::new(), |p| p.label.clone());
                format!("{:<32} {:>4} probes  worst {:.3e}  {verdict}  {at}", s.name, s.probes.len(), s.max_rel_error())
            })
            .collect();
        out.push(format!("sampled parameters: {}", self.sampled_params));
        out
    }
}

/// Every suite on `cfg` at a 32x32 input, mid-ramp so the `f(E)` factor
/// is neither 0 nor 1.
pub fn run_gradcheck(cfg: &ModelConfig, per_component: usize, seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let sched = ScheduleParams { e0: 0.0, e1: 4.0, rho: 2.0, ..ScheduleParams::default() };
    let mut suites = primitive_suites(per_component.max(8), seed, fault)?;
    suites.push(loss_suite(per_component.max(8), seed, fault)?);
    let model = model_suites(cfg, &sched, 2.0, cfg.divisor().max(32), per_component, seed, fault)?;
    let sampled_params = model.iter().map(|r| r.probes.len()).sum();
    suites.extend(model);
    Ok(GradcheckReport { suites, sampled_params, tolerance: DEFAULT_TOLERANCE })
}
