//! Central finite-difference checks of tape gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Absolute error always accepted, for gradients that are essentially zero.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR / DEFAULT_TOLERANCE)`: a value
/// `<= 1e-3` means relative agreement to 1e-3 or absolute agreement to 1e-6.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR / DEFAULT_TOLERANCE);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn error(&self) -> f64 {
        rel_error(self.analytic, self.numeric)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub name: String,
    pub probes: Vec<Probe>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(Probe::error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.error().total_cmp(&b.error()))
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

/// Checks `d f / d inputs` at `samples` random coordinates spread over all
/// inputs. `f` must build a scalar loss from the leaves it is handed.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], samples: usize, seed: u64, h: f64, f: F) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_fn_with_fault(name, inputs, samples, seed, h, None, f)
}

/// [`check_fn`] with a sign fault injected into the analytic pass.
#[allow(clippy::too_many_arguments)]
pub fn check_fn_with_fault<F>(name: &str, inputs: &[Tensor<f64>], samples: usize, seed: u64, h: f64, fault: Option<OpKind>, f: F) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<_> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(f(&tape, &leaves)?.value().item())
    };
    let tape = Tape::new();
    tape.inject_fault(fault);
    let leaves: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&tape, &leaves)?;
    tape.backward(loss)?;
    let grads: Vec<Option<Tensor<f64>>> = leaves.iter().map(|&l| tape.grad(l)).collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(samples);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let orig = work[which].data()[flat];
        work[which].data_mut()[flat] = orig + h;
        let up = eval(&work)?;
        work[which].data_mut()[flat] = orig - h;
        let down = eval(&work)?;
        work[which].data_mut()[flat] = orig;
        let analytic = grads[which].as_ref().map_or(0.0, |g| g.data()[flat]);
        probes.push(Probe { label: format!("input{which}[{flat}]"), analytic, numeric: (up - down) / (2.0 * h) });
    }
    Ok(FdReport { name: name.to_string(), probes })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("positive dims")
}

/// Weighted sum with fixed random weights, so every output element carries
/// a distinct gradient.
fn probe_sum<'t>(y: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = y.tape().constant(random(&y.shape(), &mut rng));
    y.mul(&w)?.sum_all()
}

/// One finite-difference suite per differentiable primitive, each on
/// `samples` random coordinates.
pub fn primitive_suites(samples: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<FdReport>> {
    type Build = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;
    let cases: Vec<(OpKind, Vec<Vec<usize>>, Build)> = vec![
        (OpKind::Add, vec![vec![3, 4], vec![3, 4]], |_, v| probe_sum(&v[0].add(&v[1])?, 1)),
        (OpKind::Sub, vec![vec![3, 4], vec![3, 4]], |_, v| probe_sum(&v[0].sub(&v[1])?, 2)),
        (OpKind::Mul, vec![vec![3, 4], vec![3, 4]], |_, v| probe_sum(&v[0].mul(&v[1])?, 3)),
        (OpKind::Div, vec![vec![3, 4], vec![3, 4]], |_, v| probe_sum(&v[0].div(&v[1].affine(0.25, 2.0)?)?, 4)),
        (OpKind::AddBias, vec![vec![2, 3, 4], vec![4]], |_, v| probe_sum(&v[0].add_bias(&v[1])?, 5)),
        (OpKind::Affine, vec![vec![5]], |_, v| probe_sum(&v[0].affine(-1.5, 0.3)?, 6)),
        (OpKind::Matmul, vec![vec![2, 3, 4], vec![4, 5]], |_, v| probe_sum(&v[0].matmul(&v[1])?, 7)),
        (OpKind::Permute, vec![vec![2, 3, 4]], |_, v| probe_sum(&v[0].permute(&[2, 0, 1])?, 8)),
        (OpKind::Reshape, vec![vec![2, 3, 4]], |_, v| probe_sum(&v[0].reshape(&[6, 4])?, 9)),
        (OpKind::Concat, vec![vec![2, 3], vec![2, 2]], |_, v| probe_sum(&Var::concat(&[v[0], v[1]], 1)?, 10)),
        (OpKind::Narrow, vec![vec![3, 5]], |_, v| probe_sum(&v[0].narrow(1, 1, 3)?, 11)),
        (OpKind::Softmax, vec![vec![3, 5]], |_, v| probe_sum(&v[0].softmax()?, 12)),
        (OpKind::LogSoftmax, vec![vec![3, 5]], |_, v| probe_sum(&v[0].log_softmax()?, 13)),
        (OpKind::Gelu, vec![vec![12]], |_, v| probe_sum(&v[0].gelu()?, 14)),
        (OpKind::Relu, vec![vec![12]], |_, v| probe_sum(&v[0].relu()?, 15)),
        (OpKind::LayerNorm, vec![vec![3, 6], vec![6], vec![6]], |_, v| probe_sum(&v[0].layer_norm(&v[1], &v[2], 1e-5)?, 16)),
        (OpKind::GroupNorm, vec![vec![2, 4, 3, 3], vec![4], vec![4]], |_, v| probe_sum(&v[0].group_norm(2, &v[1], &v[2], 1e-5)?, 17)),
        (OpKind::Conv2d, vec![vec![2, 4, 6, 6], vec![6, 2, 3, 3], vec![6]], |_, v| probe_sum(&v[0].conv2d(&v[1], Some(&v[2]), 2, 1, 2)?, 18)),
        (OpKind::Conv2d, vec![vec![1, 3, 5, 5], vec![3, 1, 3, 3], vec![3]], |_, v| probe_sum(&v[0].conv2d(&v[1], Some(&v[2]), 1, 1, 3)?, 19)),
        (OpKind::ConvTranspose2d, vec![vec![2, 3, 3, 3], vec![3, 2, 2, 2], vec![2]], |_, v| probe_sum(&v[0].conv_transpose2d(&v[1], Some(&v[2]), 2, 0)?, 20)),
        (OpKind::AvgPool, vec![vec![1, 2, 4, 4]], |_, v| probe_sum(&v[0].avg_pool2d(2)?, 21)),
        (OpKind::Upsample, vec![vec![1, 2, 2, 3]], |_, v| probe_sum(&v[0].upsample_nearest2d(2)?, 22)),
        (OpKind::Attention, vec![vec![2, 3, 4], vec![2, 5, 4], vec![2, 5, 3]], |_, v| probe_sum(&v[0].attention(&v[1], &v[2], 0.5)?, 23)),
        (OpKind::SumLast, vec![vec![3, 4]], |_, v| probe_sum(&v[0].sum_last()?, 24)),
        (OpKind::MeanAll, vec![vec![3, 4]], |_, v| v[0].square()?.mean_all()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (kind, shapes, build) in cases {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let s = rng.gen();
        let mut rep = check_fn_with_fault(kind.name(), &inputs, samples, s, DEFAULT_STEP, fault, build)?;
        rep.name = kind.name().to_string();
        reports.push(rep);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for rep in primitive_suites(24, 11, None).unwrap() {
            assert!(rep.probes.len() >= 20);
            assert!(rep.passed(DEFAULT_TOLERANCE), "{}: {:?}", rep.name, rep.worst());
        }
    }

    #[test]
    fn injected_sign_fault_is_caught_and_named() {
        let reps = primitive_suites(20, 11, Some(OpKind::Softmax)).unwrap();
        let failing: Vec<_> = reps.iter().filter(|r| !r.passed(DEFAULT_TOLERANCE)).map(|r| r.name.as_str()).collect();
        assert_eq!(failing, vec!["softmax"]);
    }

    #[test]
    fn rel_error_floor() {
        assert!(rel_error(1e-9, 5e-7) <= DEFAULT_TOLERANCE);
        assert!(rel_error(1.0, 1.0005) <= DEFAULT_TOLERANCE);
        assert!(rel_error(1.0, 1.01) > DEFAULT_TOLERANCE);
    }
}
