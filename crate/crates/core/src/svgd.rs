//! Stein variational gradient descent.
//!
//! Particles move along
//!
//! ```text
//! Δx_i = (1/n) Σ_j [ ∇log p(x_j) k(x_j, x_i) + ∇_{x_j} k(x_j, x_i) ]
//! ```
//!
//! The first term pulls particles toward high density; the second pushes
//! them apart. The average runs over all particles including `j = i`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adcore::{input_jacobians, Mlp, Tensor};
use crate::error::{Error, Result};
use crate::kernels::{median_bandwidth_with, Kernel, RbfKernel};
use crate::par::{self, Exec};

/// Coordinates beyond this magnitude abort a run.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// `n × d` particle positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    positions: Tensor,
}

impl ParticleSet {
    pub fn new(positions: Tensor) -> Result<Self> {
        let positions = positions.as_matrix();
        if positions.rows() == 0 || positions.is_empty() {
            return Err(Error::contract("a particle set needs at least one particle"));
        }
        if !positions.is_finite() {
            return Err(Error::NonFinite("particle positions".into()));
        }
        Ok(Self { positions })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.positions.rows()
    }

    pub fn d(&self) -> usize {
        self.positions.cols()
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn into_tensor(self) -> Tensor {
        self.positions
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.positions.row(i)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.n() as f64;
        let mut m = vec![0.0; self.d()];
        for r in self.positions.iter_rows() {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Per-dimension population variance.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.n() as f64;
        let mut v = vec![0.0; self.d()];
        for r in self.positions.iter_rows() {
            for ((a, x), m) in v.iter_mut().zip(r).zip(&mean) {
                *a += (x - m) * (x - m);
            }
        }
        v.iter_mut().for_each(|a| *a /= n);
        v
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.n();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// An unnormalized density with its score function.
pub trait TargetDensity: Sync {
    fn dim(&self) -> usize;

    /// `log p(x)` up to an additive constant.
    fn log_density(&self, x: &[f64]) -> f64;

    /// `∇ₓ log p(x)`.
    fn grad_log_density(&self, x: &[f64]) -> Vec<f64>;

    /// Scores for every row of `points`.
    fn grad_log_density_batch(&self, points: &Tensor) -> Result<Tensor> {
        check_dim(self.dim(), points.cols())?;
        let rows = par::map_range(Exec::default(), points.rows(), |i| {
            self.grad_log_density(points.row(i))
        });
        Ok(Tensor::raw_matrix(points.rows(), points.cols(), rows.concat()))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dim(format!("target has dimension {expected}, points have {got}")));
    }
    Ok(())
}

/// Largest relative error between a target's score and central finite
/// differences of its log density over the given points.
pub fn check_target_gradient<P: TargetDensity + ?Sized>(p: &P, points: &Tensor, step: f64) -> Result<f64> {
    check_dim(p.dim(), points.cols())?;
    let mut worst: f64 = 0.0;
    for x in points.iter_rows() {
        let g = p.grad_log_density(x);
        let fd: Vec<f64> = (0..x.len())
            .map(|k| {
                let (mut a, mut b) = (x.to_vec(), x.to_vec());
                a[k] += step;
                b[k] -= step;
                (p.log_density(&a) - p.log_density(&b)) / (2.0 * step)
            })
            .collect();
        worst = worst.max(relative_error(&g, &fd));
    }
    Ok(worst)
}

pub(crate) fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(a.iter().map(|y| y * y).sum::<f64>().sqrt());
    if den < 1e-10 {
        num
    } else {
        num / den
    }
}

/// A smooth vector field `f: ℝᵈ → ℝᵈ` that can report its divergence.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Vec<f64>;
    fn divergence(&self, x: &[f64]) -> f64;
}

/// Vector field from a pair of closures.
pub struct FnField<F, G> {
    dim: usize,
    value: F,
    divergence: G,
}

impl<F, G> FnField<F, G>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, value: F, divergence: G) -> Self {
        Self { dim, value, divergence }
    }
}

impl<F, G> VectorField for FnField<F, G>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> Vec<f64> {
        (self.value)(x)
    }

    fn divergence(&self, x: &[f64]) -> f64 {
        (self.divergence)(x)
    }
}

/// `f(x) = x`, divergence `d`.
pub fn identity_field(dim: usize) -> impl VectorField {
    FnField::new(dim, |x: &[f64]| x.to_vec(), move |_: &[f64]| dim as f64)
}

/// A square MLP used as a vector field; the divergence is the trace of its
/// input Jacobian.
pub struct MlpField {
    net: Mlp,
}

impl MlpField {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.in_dim() != net.out_dim() {
            return Err(Error::dim(format!(
                "vector field net maps {} to {} dims",
                net.in_dim(),
                net.out_dim()
            )));
        }
        Ok(Self { net })
    }
}

impl VectorField for MlpField {
    fn dim(&self) -> usize {
        self.net.in_dim()
    }

    fn value(&self, x: &[f64]) -> Vec<f64> {
        let t = Tensor::raw_matrix(1, x.len(), x.to_vec());
        self.net.forward(&t).map(Tensor::into_data).unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }

    fn divergence(&self, x: &[f64]) -> f64 {
        let t = Tensor::raw_matrix(1, x.len(), x.to_vec());
        match input_jacobians(&self.net, &t) {
            Ok(j) => (0..x.len()).map(|k| j[0].get(k, k)).sum(),
            Err(_) => f64::NAN,
        }
    }
}

/// `∇ₓ log p(x)ᵀ f(x) + ∇ₓ·f(x)`.
pub fn stein_op_apply<P, F>(p: &P, f: &F, x: &[f64]) -> Result<f64>
where
    P: TargetDensity + ?Sized,
    F: VectorField + ?Sized,
{
    check_dim(p.dim(), x.len())?;
    check_dim(f.dim(), x.len())?;
    let score = p.grad_log_density(x);
    let fx = f.value(x);
    let v = score.iter().zip(&fx).map(|(s, v)| s * v).sum::<f64>() + f.divergence(x);
    if !v.is_finite() {
        return Err(Error::NonFinite("Stein operator value".into()));
    }
    Ok(v)
}

/// Mean and sample standard deviation of the Stein operator over a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteinStats {
    pub mean: f64,
    pub std_dev: f64,
    pub n: usize,
}

impl SteinStats {
    /// `4 σ̂ / √N`, the tolerance a sample from `p` itself should meet.
    pub fn clt_bound(&self) -> f64 {
        4.0 * self.std_dev / (self.n as f64).sqrt()
    }
}

pub fn stein_operator_stats<P, F>(p: &P, f: &F, samples: &ParticleSet) -> Result<SteinStats>
where
    P: TargetDensity + ?Sized,
    F: VectorField + ?Sized,
{
    let vals = par::try_map_range(Exec::default(), samples.n(), |i| stein_op_apply(p, f, samples.row(i)))?;
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(SteinStats { mean, std_dev: var.sqrt(), n })
}

/// `|mean over samples of the Stein operator|`; near zero when the samples
/// come from `p`.
pub fn stein_identity_residual<P, F>(p: &P, f: &F, samples: &ParticleSet) -> Result<f64>
where
    P: TargetDensity + ?Sized,
    F: VectorField + ?Sized,
{
    Ok(stein_operator_stats(p, f, samples)?.mean.abs())
}

pub fn svgd_direction<P, K>(particles: &ParticleSet, p: &P, kernel: &K) -> Result<Tensor>
where
    P: TargetDensity + ?Sized,
    K: Kernel + ?Sized,
{
    svgd_direction_with(particles, p, kernel, Exec::default())
}

pub fn svgd_direction_with<P, K>(particles: &ParticleSet, p: &P, kernel: &K, exec: Exec) -> Result<Tensor>
where
    P: TargetDensity + ?Sized,
    K: Kernel + ?Sized,
{
    check_dim(p.dim(), particles.d())?;
    let scores = p.grad_log_density_batch(particles.positions())?;
    direction_from_scores(particles.positions(), &scores, kernel, exec)
}

/// SVGD direction given precomputed scores `∇log p(x_j)` (one row each).
pub fn direction_from_scores<K>(points: &Tensor, scores: &Tensor, kernel: &K, exec: Exec) -> Result<Tensor>
where
    K: Kernel + ?Sized,
{
    if !(kernel.bandwidth() > 0.0) {
        return Err(Error::contract("kernel bandwidth must be positive"));
    }
    if points.rows() != scores.rows() || points.cols() != scores.cols() {
        return Err(Error::dim("scores must match particle shape"));
    }
    let (n, d) = (points.rows(), points.cols());
    let terms = kernel.stein_terms(points, exec)?;
    let inv_n = 1.0 / n as f64;
    let rows = par::map_range(exec, n, |i| {
        let mut acc = vec![0.0; d];
        for j in 0..n {
            let k = terms.gram.get(i, j);
            for (a, s) in acc.iter_mut().zip(scores.row(j)) {
                *a += s * k;
            }
        }
        acc.iter_mut()
            .zip(terms.repulsion.row(i))
            .for_each(|(a, r)| *a = (*a + r) * inv_n);
        acc
    });
    Ok(Tensor::raw_matrix(n, d, rows.concat()))
}

/// SVGD direction computed separately within each group of rows.
///
/// Used for label-conditional targets, where particles with different labels
/// target different conditionals and must not share an empirical average.
pub fn direction_from_scores_grouped<K>(
    points: &Tensor,
    scores: &Tensor,
    groups: &[usize],
    kernel: &K,
    exec: Exec,
) -> Result<Tensor>
where
    K: Kernel + ?Sized,
{
    if groups.len() != points.rows() {
        return Err(Error::dim("one group id per particle is required"));
    }
    let mut out = Tensor::zeros(&[points.rows(), points.cols()]);
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for g in ids {
        let idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        let dir = direction_from_scores(&points.select_rows(&idx), &scores.select_rows(&idx), kernel, exec)?;
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(dir.row(r));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum BandwidthPolicy {
    Fixed { h: f64 },
    Median { scale: f64 },
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::Median { scale: 0.5 }
    }
}

impl BandwidthPolicy {
    pub fn bandwidth(&self, points: &Tensor, exec: Exec) -> Result<f64> {
        match *self {
            BandwidthPolicy::Fixed { h } => {
                if !(h > 0.0) {
                    return Err(Error::contract(format!("bandwidth must be positive, got {h}")));
                }
                Ok(h)
            }
            BandwidthPolicy::Median { scale } => {
                if points.rows() < 2 {
                    // A lone particle has no pairwise distances; any h gives the same direction.
                    return Ok(1.0);
                }
                median_bandwidth_with(points, scale, None, exec)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    #[default]
    Constant,
    /// Per-coordinate AdaGrad scaling of the direction.
    Adagrad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvgdConfig {
    pub step: f64,
    pub iterations: usize,
    #[serde(default)]
    pub bandwidth: BandwidthPolicy,
    #[serde(default)]
    pub step_rule: StepRule,
    /// Trace row cadence; 0 records only the first and last iteration.
    #[serde(default = "one")]
    pub log_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SvgdConfig {
    pub fn new(step: f64, iterations: usize, bandwidth: BandwidthPolicy) -> Self {
        Self { step, iterations, bandwidth, step_rule: StepRule::Constant, log_every: 1, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("svgd step must be finite and non-negative, got {}", self.step)));
        }
        match self.bandwidth {
            BandwidthPolicy::Fixed { h } if !(h > 0.0) => {
                Err(Error::Config(format!("fixed bandwidth must be positive, got {h}")))
            }
            BandwidthPolicy::Median { scale } if !(scale > 0.0) => {
                Err(Error::Config(format!("bandwidth scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub ksd: f64,
    pub stein_residual: f64,
}

/// Per-iteration particle metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTrace {
    pub rows: Vec<TraceRow>,
}

impl MetricTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.mean.len());
        let mut s = String::from("iteration");
        for k in 0..d {
            write!(s, ",mean_{k}").unwrap();
        }
        for k in 0..d {
            write!(s, ",var_{k}").unwrap();
        }
        s.push_str(",ksd,stein_residual\n");
        for r in &self.rows {
            write!(s, "{}", r.iteration).unwrap();
            for v in r.mean.iter().chain(&r.var) {
                write!(s, ",{v}").unwrap();
            }
            writeln!(s, ",{},{}", r.ksd, r.stein_residual).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn trace_row<P: TargetDensity + ?Sized>(iteration: usize, ps: &ParticleSet, p: &P, h: f64) -> Result<TraceRow> {
    let ksd = if ps.n() >= 2 {
        ksd_estimate(ps, p, &RbfKernel::new(h)?)?
    } else {
        0.0
    };
    let stein_residual = stein_identity_residual(p, &identity_field(ps.d()), ps)?;
    Ok(TraceRow { iteration, mean: ps.mean(), var: ps.variance(), ksd, stein_residual })
}

pub(crate) fn guard(points: &Tensor, iteration: usize) -> Result<()> {
    if let Some((i, v)) = points
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
    {
        let d = points.cols().max(1);
        return Err(Error::Diverged {
            iteration,
            detail: format!(
                "particle {} coordinate {} reached {v}; reduce the step size",
                i / d,
                i % d
            ),
        });
    }
    Ok(())
}

/// Runs `config.iterations` SVGD updates with an RBF kernel on the raw
/// coordinates, refreshing the bandwidth every iteration.
pub fn svgd_run<P>(particles: ParticleSet, p: &P, config: &SvgdConfig) -> Result<(ParticleSet, MetricTrace)>
where
    P: TargetDensity + ?Sized,
{
    config.validate()?;
    check_dim(p.dim(), particles.d())?;
    let exec = Exec::default();
    let mut x = particles.into_tensor();
    let mut hist = vec![0.0; x.len()];
    let mut trace = MetricTrace::default();
    let mut h = config.bandwidth.bandwidth(&x, exec)?;
    trace.rows.push(trace_row(0, &ParticleSet { positions: x.clone() }, p, h)?);

    for it in 1..=config.iterations {
        h = config.bandwidth.bandwidth(&x, exec)?;
        let kernel = RbfKernel::new(h)?;
        let ps = ParticleSet { positions: x };
        let dir = svgd_direction_with(&ps, p, &kernel, exec)?;
        x = ps.into_tensor();
        match config.step_rule {
            StepRule::Constant => {
                for (xv, dv) in x.data_mut().iter_mut().zip(dir.data()) {
                    *xv += config.step * dv;
                }
            }
            StepRule::Adagrad => {
                for ((xv, dv), g) in x.data_mut().iter_mut().zip(dir.data()).zip(hist.iter_mut()) {
                    *g += dv * dv;
                    *xv += config.step * dv / (1e-6 + g.sqrt());
                }
            }
        }
        guard(&x, it)?;
        let log_now = if config.log_every == 0 {
            it == config.iterations
        } else {
            it % config.log_every == 0 || it == config.iterations
        };
        if log_now {
            trace.rows.push(trace_row(it, &ParticleSet { positions: x.clone() }, p, h)?);
        }
    }
    Ok((ParticleSet { positions: x }, trace))
}

/// V-statistic estimate of the squared kernelized Stein discrepancy,
/// `(1/n²) Σ_{i,j} u_p(x_i, x_j)`, with the Stein kernel induced by an RBF.
///
/// Non-negative up to roundoff because `u_p` is positive definite.
pub fn ksd_estimate<P>(particles: &ParticleSet, p: &P, kernel: &RbfKernel) -> Result<f64>
where
    P: TargetDensity + ?Sized,
{
    ksd_estimate_with(particles, p, kernel, Exec::default())
}

pub fn ksd_estimate_with<P>(particles: &ParticleSet, p: &P, kernel: &RbfKernel, exec: Exec) -> Result<f64>
where
    P: TargetDensity + ?Sized,
{
    let n = particles.n();
    if n < 2 {
        return Err(Error::contract(format!("KSD needs at least 2 particles, got {n}")));
    }
    check_dim(p.dim(), particles.d())?;
    let x = particles.positions();
    let s = p.grad_log_density_batch(x)?;
    let d = particles.d() as f64;
    let h2 = kernel.bandwidth() * kernel.bandwidth();
    let rows = par::map_range(exec, n, |i| {
        let (xi, si) = (x.row(i), s.row(i));
        let mut acc = 0.0;
        for j in 0..n {
            let (xj, sj) = (x.row(j), s.row(j));
            let mut r2 = 0.0;
            let (mut ss, mut sir, mut sjr) = (0.0, 0.0, 0.0);
            for k in 0..xi.len() {
                let r = xi[k] - xj[k];
                r2 += r * r;
                ss += si[k] * sj[k];
                sir += si[k] * r;
                sjr += sj[k] * r;
            }
            let kv = (-r2 / h2).exp();
            acc += kv * (ss + 2.0 / h2 * (sir - sjr) + 2.0 * d / h2 - 4.0 * r2 / (h2 * h2));
        }
        acc
    });
    Ok(rows.iter().sum::<f64>() / (n * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::AnalyticTarget;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// `∇log p ≡ 0`.
    struct Flat(usize);

    impl TargetDensity for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
            vec![0.0; x.len()]
        }
    }

    fn normal_samples(n: usize, d: usize, shift: f64, seed: u64) -> ParticleSet {
        let mut rng = seeded(seed);
        let data: Vec<f64> = (0..n * d).map(|_| shift + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
        ParticleSet::new(Tensor::matrix(n, d, data).unwrap()).unwrap()
    }

    #[test]
    fn stein_operator_examples() {
        let p = AnalyticTarget::standard_normal(1);
        assert_eq!(stein_op_apply(&p, &identity_field(1), &[2.0]).unwrap(), -3.0);
        let zero = FnField::new(1, |_: &[f64]| vec![0.0], |_: &[f64]| 0.0);
        assert_eq!(stein_op_apply(&p, &zero, &[1.7]).unwrap(), 0.0);
        let samples = normal_samples(10_000, 1, 0.0, 1);
        assert_eq!(stein_identity_residual(&p, &zero, &samples).unwrap(), 0.0);
        let r = stein_identity_residual(&p, &identity_field(1), &samples).unwrap();
        assert!(r <= 0.06, "residual {r}");
    }

    #[test]
    fn constant_field_residual_is_small() {
        let p = AnalyticTarget::gmm(vec![0.3, 0.7], vec![vec![-2.0], vec![1.0]], vec![vec![0.5], vec![1.5]])
            .unwrap();
        let c = FnField::new(1, |_: &[f64]| vec![2.5], |_: &[f64]| 0.0);
        let samples = p.sample(20_000, &mut seeded(9)).unwrap();
        let stats = stein_operator_stats(&p, &c, &samples).unwrap();
        assert!(stats.mean.abs() <= stats.clt_bound(), "{stats:?}");
    }

    #[test]
    fn single_particle_is_gradient_ascent() {
        let p = AnalyticTarget::gaussian(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let ps = ParticleSet::from_rows(&[vec![0.3, 0.4]]).unwrap();
        let dir = svgd_direction(&ps, &p, &RbfKernel::new(0.8).unwrap()).unwrap();
        assert_eq!(dir.row(0), p.grad_log_density(&[0.3, 0.4]).as_slice());
    }

    #[test]
    fn flat_target_repels_and_coincident_particles_stay() {
        let k = RbfKernel::new(1.0).unwrap();
        let ps = ParticleSet::from_rows(&[vec![-0.4], vec![0.9]]).unwrap();
        let dir = svgd_direction(&ps, &Flat(1), &k).unwrap();
        assert!((dir.get(0, 0) - dir.get(1, 0)).signum() == (-0.4f64 - 0.9).signum());
        let same = ParticleSet::from_rows(&[vec![0.5], vec![0.5]]).unwrap();
        let dir = svgd_direction(&same, &Flat(1), &k).unwrap();
        assert_eq!(dir.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_step_leaves_particles_unchanged() {
        let p = AnalyticTarget::standard_normal(2);
        let ps = normal_samples(20, 2, 3.0, 2);
        let (out, trace) = svgd_run(ps.clone(), &p, &SvgdConfig::new(0.0, 10, BandwidthPolicy::default())).unwrap();
        assert_eq!(out, ps);
        assert_eq!(trace.rows.len(), 11);
    }

    #[test]
    fn huge_step_trips_divergence_guard() {
        let p = AnalyticTarget::gaussian(vec![0.0], vec![1e-6]).unwrap();
        let ps = normal_samples(5, 1, 1.0, 3);
        let r = svgd_run(ps, &p, &SvgdConfig::new(1e3, 50, BandwidthPolicy::Fixed { h: 1.0 }));
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn direction_rejects_bad_bandwidth() {
        struct Zero;
        impl Kernel for Zero {
            fn bandwidth(&self) -> f64 {
                0.0
            }
            fn eval(&self, _: &[f64], _: &[f64]) -> Result<f64> {
                Ok(1.0)
            }
            fn grad_x(&self, x: &[f64], _: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![0.0; x.len()])
            }
            fn embed(&self, p: &Tensor) -> Result<Tensor> {
                Ok(p.clone())
            }
            fn stein_terms(&self, _: &Tensor, _: Exec) -> Result<crate::kernels::SteinTerms> {
                unreachable!()
            }
        }
        let ps = ParticleSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(svgd_direction(&ps, &Flat(1), &Zero), Err(Error::Contract(_))));
    }

    #[test]
    fn gaussian_convergence_from_far_init() {
        let p = AnalyticTarget::standard_normal(1);
        let init = normal_samples(100, 1, 10.0, 7);
        let mut cfg = SvgdConfig::new(0.05, 2000, BandwidthPolicy::Median { scale: 1.0 });
        cfg.log_every = 100;
        let (out, trace) = svgd_run(init, &p, &cfg).unwrap();
        let (m, v) = (out.mean()[0], out.variance()[0]);
        assert!(m.abs() <= 0.1 && (v - 1.0).abs() <= 0.15, "mean {m} var {v}");
        assert_eq!(trace.last().unwrap().mean[0], m);
    }

    #[test]
    fn ksd_behaviour() {
        let p = AnalyticTarget::standard_normal(1);
        let k = RbfKernel::new(1.0).unwrap();
        let matched = normal_samples(500, 1, 0.0, 4);
        let shifted = normal_samples(500, 1, 5.0, 4);
        let a = ksd_estimate(&matched, &p, &k).unwrap();
        let b = ksd_estimate(&shifted, &p, &k).unwrap();
        assert!(a >= -1e-10 && b >= 10.0 * a, "{a} {b}");
        let point = ParticleSet::from_rows(&vec![vec![0.7]; 10]).unwrap();
        assert!(ksd_estimate(&point, &p, &k).unwrap() > 0.0);
        let single = ParticleSet::from_rows(&[vec![0.0]]).unwrap();
        assert!(ksd_estimate(&single, &p, &k).is_err());
    }

    #[test]
    fn ksd_shrinks_with_more_exact_samples() {
        let p = AnalyticTarget::standard_normal(1);
        let k = RbfKernel::new(1.0).unwrap();
        let avg = |n: usize| {
            (0..10).map(|s| ksd_estimate(&normal_samples(n, 1, 0.0, 100 + s), &p, &k).unwrap()).sum::<f64>() / 10.0
        };
        let (a, b, c) = (avg(50), avg(200), avg(500));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn trace_csv_layout() {
        let p = AnalyticTarget::standard_normal(2);
        let mut cfg = SvgdConfig::new(0.1, 4, BandwidthPolicy::default());
        cfg.log_every = 2;
        let (_, trace) = svgd_run(normal_samples(10, 2, 0.0, 5), &p, &cfg).unwrap();
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,mean_0,mean_1,var_0,var_1,ksd,stein_residual");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("4,"));
    }

    #[test]
    fn sequential_and_parallel_directions_are_identical() {
        let p = AnalyticTarget::standard_normal(3);
        let ps = normal_samples(64, 3, 1.0, 8);
        let k = RbfKernel::new(0.9).unwrap();
        let a = svgd_direction_with(&ps, &p, &k, Exec::Sequential).unwrap();
        let b = svgd_direction_with(&ps, &p, &k, Exec::Parallel).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn translation_equivariance(
            pts in proptest::collection::vec(-3.0f64..3.0, 10),
            shift in proptest::collection::vec(-5.0f64..5.0, 2),
        ) {
            let ps = ParticleSet::new(Tensor::matrix(5, 2, pts.clone()).unwrap()).unwrap();
            let moved: Vec<f64> = pts.iter().enumerate().map(|(i, v)| v + shift[i % 2]).collect();
            let ms = ParticleSet::new(Tensor::matrix(5, 2, moved).unwrap()).unwrap();
            let p = AnalyticTarget::gaussian(vec![0.5, -0.5], vec![1.0, 2.0]).unwrap();
            let q = AnalyticTarget::gaussian(vec![0.5 + shift[0], -0.5 + shift[1]], vec![1.0, 2.0]).unwrap();
            let k = RbfKernel::new(1.3).unwrap();
            let a = svgd_direction(&ps, &p, &k).unwrap();
            let b = svgd_direction(&ms, &q, &k).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn repulsion_increases_min_distance(seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let n = rng.random_range(2..12);
            let ps = ParticleSet::new(
                Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
            ).unwrap();
            let before = ps.min_pairwise_distance();
            prop_assume!(before > 1e-6);
            let cfg = SvgdConfig::new(0.05, 1, BandwidthPolicy::Median { scale: 1.0 });
            let (after, _) = svgd_run(ps, &Flat(2), &cfg).unwrap();
            prop_assert!(after.min_pairwise_distance() > before);
        }
    }
}
