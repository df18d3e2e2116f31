//! Amortized SVGD: train a generator `x = f(η; ξ)` so that its outputs move
//! along the SVGD direction.
//!
//! Each step draws a noise batch, treats the generator outputs as the particle
//! set, computes the SVGD direction `Δx` on it, and turns `Δx` into a
//! parameter update with one of three rules:
//!
//! * `fit` regresses the generator onto the moved particles `x + εΔx`;
//! * `least_squares` solves the linearized version of that regression;
//! * `chain_rule` back-propagates `Δx` through the generator.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adcore::{param_jacobians, vjp_params, Activation, Mlp, Tensor};
use crate::error::{Error, Result};
use crate::kernels::{Kernel, RbfKernel};
use crate::optim::{Direction, Optimizer, OptimizerConfig};
use crate::par::Exec;
use crate::rng::{seeded, substream, Rng, Stream};
use crate::svgd::{direction_from_scores, guard, ksd_estimate, BandwidthPolicy, ParticleSet, TargetDensity};

/// Largest parameter count the least-squares rule will solve for.
pub const MAX_LS_PARAMS: usize = 5000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    /// Uniform on `[-1, 1]` per coordinate.
    #[default]
    Uniform,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_noise_dim")]
    pub dim: usize,
    #[serde(default)]
    pub law: NoiseLaw,
}

fn default_noise_dim() -> usize {
    100
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { dim: default_noise_dim(), law: NoiseLaw::Uniform }
    }
}

/// I.i.d. generator inputs.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    dim: usize,
    law: NoiseLaw,
    rng: Rng,
}

impl NoiseSource {
    pub fn new(dim: usize, law: NoiseLaw, rng: Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("noise dimension must be at least 1".into()));
        }
        Ok(Self { dim, law, rng })
    }

    pub fn from_seed(config: NoiseConfig, seed: u64) -> Result<Self> {
        Self::new(config.dim, config.law, seeded(seed))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn law(&self) -> NoiseLaw {
        self.law
    }

    /// `m × dim` batch of noise vectors.
    pub fn draw(&mut self, m: usize) -> Tensor {
        let data = (0..m * self.dim)
            .map(|_| match self.law {
                NoiseLaw::Uniform => self.rng.random_range(-1.0..=1.0),
                NoiseLaw::Normal => StandardNormal.sample(&mut self.rng),
            })
            .collect();
        Tensor::raw_matrix(m, self.dim, data)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmortizeRule {
    Fit,
    LeastSquares,
    #[default]
    ChainRule,
}

/// How the chain rule turns `Σᵢ ∂_η f(η; ξᵢ) Δxᵢ` into a parameter change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainUpdate {
    /// `η ← η + ε Σᵢ ∂_η f Δxᵢ`.
    Plain,
    /// The sum is handed to the optimizer as an ascent direction; `ε` is unused.
    #[default]
    Optimizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmortizeConfig {
    #[serde(default)]
    pub rule: AmortizeRule,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// ε of the particle move `x' = x + εΔx`.
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_inner_fit_steps")]
    pub inner_fit_steps: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub bandwidth: BandwidthPolicy,
    pub iterations: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub chain_update: ChainUpdate,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    100
}

fn default_step() -> f64 {
    0.01
}

fn default_inner_fit_steps() -> usize {
    5
}

fn default_ridge() -> f64 {
    1e-6
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}

fn default_log_every() -> usize {
    1
}

impl AmortizeConfig {
    pub fn new(rule: AmortizeRule, iterations: usize) -> Self {
        Self {
            rule,
            batch: default_batch(),
            step: default_step(),
            inner_fit_steps: default_inner_fit_steps(),
            ridge: default_ridge(),
            bandwidth: BandwidthPolicy::default(),
            iterations,
            optimizer: default_optimizer(),
            chain_update: ChainUpdate::default(),
            noise: NoiseConfig::default(),
            log_every: default_log_every(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        if self.noise.dim == 0 {
            return Err(Error::Config("noise dimension must be at least 1".into()));
        }
        match self.bandwidth {
            BandwidthPolicy::Fixed { h } if !(h > 0.0) => return Err(Error::Config("fixed bandwidth must be positive".into())),
            BandwidthPolicy::Median { scale } if !(scale > 0.0) => {
                return Err(Error::Config("bandwidth scale must be positive".into()))
            }
            _ => {}
        }
        self.optimizer.validate()
    }
}

/// What one amortized update did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Norm of the parameter change.
    pub update_norm: f64,
    /// Fit objective before and after each inner step (fit rule only).
    pub fit_objective: Vec<f64>,
    pub bandwidth: f64,
}

fn check_batch(gen: &Mlp, noise: &Tensor, delta: &Tensor) -> Result<()> {
    if noise.cols() != gen.in_dim() {
        return Err(Error::dim(format!("generator reads {} inputs, noise has {}", gen.in_dim(), noise.cols())));
    }
    if delta.rows() != noise.rows() || delta.cols() != gen.out_dim() {
        return Err(Error::dim("Δx must have one generator-output row per noise row"));
    }
    Ok(())
}

fn fit_objective(gen: &Mlp, noise: &Tensor, targets: &Tensor) -> Result<f64> {
    let out = gen.forward(noise)?;
    let m = noise.rows() as f64;
    Ok(out.data().iter().zip(targets.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m)
}

/// Fit rule: moves the generator towards `argmin_η (1/m) Σᵢ ‖f(η; ξᵢ) − (xᵢ + εΔxᵢ)‖²`
/// with `inner_steps` steps of backtracking gradient descent.
///
/// Every accepted step decreases the objective, so the returned objective
/// sequence is non-increasing.
pub fn update_fit(gen: &mut Mlp, noise: &Tensor, delta: &Tensor, step: f64, inner_steps: usize) -> Result<StepStats> {
    check_batch(gen, noise, delta)?;
    let x = gen.forward(noise)?;
    let targets = Tensor::raw_matrix(
        x.rows(),
        x.cols(),
        x.data().iter().zip(delta.data()).map(|(a, d)| a + step * d).collect(),
    );
    let start = gen.params_flat();
    let m = noise.rows() as f64;
    let mut obj = fit_objective(gen, noise, &targets)?;
    let mut history = vec![obj];
    let mut lr = 1.0;
    for _ in 0..inner_steps {
        let out = gen.forward(noise)?;
        let resid = Tensor::raw_matrix(
            out.rows(),
            out.cols(),
            out.data().iter().zip(targets.data()).map(|(a, b)| 2.0 * (a - b) / m).collect(),
        );
        let g = vjp_params(gen, noise, &resid)?;
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if g2 == 0.0 {
            history.push(obj);
            continue;
        }
        let base = gen.params_flat();
        let mut accepted = false;
        lr *= 2.0;
        for _ in 0..60 {
            let trial: Vec<f64> = base.iter().zip(&g).map(|(p, gv)| p - lr * gv).collect();
            gen.set_params_flat(&trial)?;
            let o = fit_objective(gen, noise, &targets)?;
            if o.is_finite() && o <= obj - 1e-4 * lr * g2 {
                obj = o;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            gen.set_params_flat(&base)?;
        }
        if obj > *history.last().unwrap() {
            return Err(Error::contract("fit objective increased during inner steps"));
        }
        history.push(obj);
    }
    let update_norm = norm_diff(&gen.params_flat(), &start);
    Ok(StepStats { update_norm, fit_objective: history, bandwidth: 0.0 })
}

/// Solves `(JᵀJ + λI) δ = JᵀΔ` where `J` stacks `∂_η f(η; ξᵢ)` over the batch.
pub fn least_squares_direction(gen: &Mlp, noise: &Tensor, delta: &Tensor, ridge: f64) -> Result<Vec<f64>> {
    check_batch(gen, noise, delta)?;
    let p = gen.num_params();
    if p > MAX_LS_PARAMS {
        return Err(Error::contract(format!(
            "least-squares rule supports at most {MAX_LS_PARAMS} parameters, generator has {p}"
        )));
    }
    let jacs = param_jacobians(gen, noise)?;
    solve_normal_equations(&jacs, delta, ridge)
}

/// Solves `(Σᵢ JᵢᵀJᵢ + λI) δ = Σᵢ JᵢᵀΔᵢ` for per-row Jacobians `Jᵢ` (`d × P`).
pub fn solve_normal_equations(jacs: &[Tensor], delta: &Tensor, ridge: f64) -> Result<Vec<f64>> {
    if jacs.len() != delta.rows() || jacs.iter().any(|j| j.rows() != delta.cols()) {
        return Err(Error::dim("one d×P Jacobian per Δx row is required"));
    }
    let p = jacs.first().map_or(0, Tensor::cols);
    if jacs.iter().any(|j| j.cols() != p) {
        return Err(Error::dim("Jacobians disagree on the parameter count"));
    }
    if !(ridge >= 0.0) {
        return Err(Error::contract("ridge must be non-negative"));
    }
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for (i, j) in jacs.iter().enumerate() {
        let jm = DMatrix::from_row_slice(j.rows(), j.cols(), j.data());
        a += jm.transpose() * &jm;
        b += jm.transpose() * DVector::from_row_slice(delta.row(i));
    }
    for k in 0..p {
        a[(k, k)] += ridge;
    }
    let max_diag = (0..p).map(|k| a[(k, k)]).fold(0.0, f64::max);
    let chol = a.cholesky().ok_or_else(|| {
        Error::Singular("normal equations are not positive definite; use ridge > 0".into())
    })?;
    let l = chol.l_dirty();
    if (0..p).any(|k| l[(k, k)] * l[(k, k)] <= 1e-13 * max_diag) {
        return Err(Error::Singular("normal equations are rank deficient; use ridge > 0".into()));
    }
    let sol = chol.solve(&b);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares solution".into()));
    }
    Ok(sol.iter().copied().collect())
}

/// Least-squares rule: `η ← η + ε δ`.
pub fn update_least_squares(gen: &mut Mlp, noise: &Tensor, delta: &Tensor, step: f64, ridge: f64) -> Result<StepStats> {
    let dir = least_squares_direction(gen, noise, delta, ridge)?;
    let mut params = gen.params_flat();
    for (p, d) in params.iter_mut().zip(&dir) {
        *p += step * d;
    }
    gen.set_params_flat(&params)?;
    let update_norm = step * dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(StepStats { update_norm, ..Default::default() })
}

/// `Σᵢ ∂_η f(η; ξᵢ)ᵀ Δxᵢ`.
pub fn chain_direction(gen: &Mlp, noise: &Tensor, delta: &Tensor) -> Result<Vec<f64>> {
    check_batch(gen, noise, delta)?;
    vjp_params(gen, noise, delta)
}

/// Chain rule: back-propagates `Δx` into the generator parameters.
pub fn update_chain(
    gen: &mut Mlp,
    noise: &Tensor,
    delta: &Tensor,
    step: f64,
    mode: ChainUpdate,
    opt: &mut Optimizer,
) -> Result<StepStats> {
    let g = chain_direction(gen, noise, delta)?;
    let mut params = gen.params_flat();
    let update_norm = match mode {
        ChainUpdate::Plain => {
            for (p, d) in params.iter_mut().zip(&g) {
                *p += step * d;
            }
            step * g.iter().map(|v| v * v).sum::<f64>().sqrt()
        }
        ChainUpdate::Optimizer => opt.step(&mut params, &g, Direction::Ascent)?,
    };
    gen.set_params_flat(&params)?;
    Ok(StepStats { update_norm, ..Default::default() })
}

/// Applies the configured rule for a batch whose SVGD direction is known.
pub fn apply_rule(
    gen: &mut Mlp,
    noise: &Tensor,
    delta: &Tensor,
    cfg: &AmortizeConfig,
    opt: &mut Optimizer,
) -> Result<StepStats> {
    match cfg.rule {
        AmortizeRule::Fit => update_fit(gen, noise, delta, cfg.step, cfg.inner_fit_steps),
        AmortizeRule::LeastSquares => update_least_squares(gen, noise, delta, cfg.step, cfg.ridge),
        AmortizeRule::ChainRule => update_chain(gen, noise, delta, cfg.step, cfg.chain_update, opt),
    }
}

/// SVGD direction for the generator outputs on one noise batch, with an RBF
/// kernel whose bandwidth comes from `policy` over the batch.
pub fn batch_direction<P>(gen: &Mlp, noise: &Tensor, p: &P, policy: &BandwidthPolicy) -> Result<(Tensor, Tensor, f64)>
where
    P: TargetDensity + ?Sized,
{
    let x = gen.forward(noise)?;
    if p.dim() != x.cols() {
        return Err(Error::dim(format!("target has dimension {}, generator emits {}", p.dim(), x.cols())));
    }
    let exec = Exec::default();
    let h = policy.bandwidth(&x, exec)?;
    let scores = p.grad_log_density_batch(&x)?;
    let dir = direction_from_scores(&x, &scores, &RbfKernel::new(h)?, exec)?;
    Ok((x, dir, h))
}

/// One amortized SVGD step on a fresh noise batch.
pub fn amortized_step<P>(
    gen: &mut Mlp,
    p: &P,
    cfg: &AmortizeConfig,
    noise: &mut NoiseSource,
    opt: &mut Optimizer,
) -> Result<StepStats>
where
    P: TargetDensity + ?Sized,
{
    let xi = noise.draw(cfg.batch);
    let (_, delta, h) = batch_direction(gen, &xi, p, &cfg.bandwidth)?;
    let mut stats = apply_rule(gen, &xi, &delta, cfg, opt)?;
    stats.bandwidth = h;
    Ok(stats)
}

/// Mean and covariance factor of a location-scale generator
/// `f(ξ) = ξW + b` with a single square identity layer and invertible `W`.
#[derive(Clone, Debug)]
pub struct LocationScale {
    pub loc: Vec<f64>,
    /// `(WᵀW)⁻¹`, the precision of `q_η` when `ξ ~ N(0, I)`.
    pub precision: DMatrix<f64>,
}

impl LocationScale {
    pub fn of(gen: &Mlp) -> Result<Self> {
        let [layer] = gen.layers() else {
            return Err(Error::contract("tractable q needs a single-layer generator"));
        };
        if layer.activation != Activation::Identity || layer.in_dim() != layer.out_dim() {
            return Err(Error::contract("tractable q needs a square identity-activation layer"));
        }
        let d = layer.in_dim();
        let w = DMatrix::from_row_slice(d, d, layer.weight.data());
        let cov = w.transpose() * &w;
        let precision = cov
            .try_inverse()
            .ok_or_else(|| Error::Singular("generator weight is not invertible".into()))?;
        Ok(Self { loc: layer.bias.data().to_vec(), precision })
    }

    /// `∇ₓ log q_η(x)` for each row.
    pub fn score(&self, x: &Tensor) -> Tensor {
        let d = self.loc.len();
        let mut out = Vec::with_capacity(x.len());
        for r in x.iter_rows() {
            let c = DVector::from_iterator(d, r.iter().zip(&self.loc).map(|(a, b)| a - b));
            out.extend((&self.precision * c).iter().map(|v| -v));
        }
        Tensor::raw_matrix(x.rows(), d, out)
    }
}

/// `Δ̃xᵢ = ∇log p(xᵢ) − ∇log q_η(xᵢ)` at the generator outputs for `noise`.
pub fn reparam_delta<P>(gen: &Mlp, noise: &Tensor, p: &P) -> Result<(Tensor, Tensor)>
where
    P: TargetDensity + ?Sized,
{
    let q = LocationScale::of(gen)?;
    let x = gen.forward(noise)?;
    let sp = p.grad_log_density_batch(&x)?;
    let sq = q.score(&x);
    let delta = Tensor::raw_matrix(x.rows(), x.cols(), sp.data().iter().zip(sq.data()).map(|(a, b)| a - b).collect());
    Ok((x, delta))
}

/// One reparameterized KL descent step for a location-scale generator.
///
/// Uses the same update plumbing as the chain rule with `Δ̃x` in place of the
/// SVGD direction. Only meaningful with standard normal noise.
pub fn reparam_kl_step<P>(
    gen: &mut Mlp,
    p: &P,
    cfg: &AmortizeConfig,
    noise: &mut NoiseSource,
    opt: &mut Optimizer,
) -> Result<StepStats>
where
    P: TargetDensity + ?Sized,
{
    if noise.law() != NoiseLaw::Normal {
        return Err(Error::contract("tractable q needs standard normal noise"));
    }
    let xi = noise.draw(cfg.batch);
    let (_, delta) = reparam_delta(gen, &xi, p)?;
    update_chain(gen, &xi, &delta, cfg.step, cfg.chain_update, opt)
}

/// Monte Carlo estimates of both sides of the kernel-smoothing relation at
/// each anchor `a`:
///
/// `E_q[Δ̃x · k(x, a)]` and `E_q[∇log p(x) k(x, a) + ∇ₓ k(x, a)]`,
///
/// which agree by integration by parts.
pub fn kernel_smoothing_sides<P>(
    gen: &Mlp,
    p: &P,
    kernel: &RbfKernel,
    anchors: &Tensor,
    samples: usize,
    noise: &mut NoiseSource,
) -> Result<(Tensor, Tensor)>
where
    P: TargetDensity + ?Sized,
{
    let xi = noise.draw(samples);
    let (x, dtilde) = reparam_delta(gen, &xi, p)?;
    let sp = p.grad_log_density_batch(&x)?;
    let d = x.cols();
    let mut lhs = Vec::with_capacity(anchors.len());
    let mut rhs = Vec::with_capacity(anchors.len());
    let inv = 1.0 / samples as f64;
    for a in anchors.iter_rows() {
        let (mut l, mut r) = (vec![0.0; d], vec![0.0; d]);
        for ((xr, dr), sr) in x.iter_rows().zip(dtilde.iter_rows()).zip(sp.iter_rows()) {
            let k = kernel.eval(xr, a)?;
            let gk = kernel.grad_x(xr, a)?;
            for c in 0..d {
                l[c] += dr[c] * k * inv;
                r[c] += (sr[c] * k + gk[c]) * inv;
            }
        }
        lhs.extend(l);
        rhs.extend(r);
    }
    Ok((Tensor::raw_matrix(anchors.rows(), d, lhs), Tensor::raw_matrix(anchors.rows(), d, rhs)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmortizeRow {
    pub step: usize,
    pub fit_objective: Option<f64>,
    pub update_norm: f64,
    pub ksd: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AmortizeTrace {
    pub rows: Vec<AmortizeRow>,
}

impl AmortizeTrace {
    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.mean.len());
        let mut s = String::from("step,fit_objective,update_norm,ksd");
        for k in 0..d {
            write!(s, ",mean_{k}").unwrap();
        }
        for k in 0..d {
            write!(s, ",var_{k}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},", r.step).unwrap();
            if let Some(f) = r.fit_objective {
                write!(s, "{f}").unwrap();
            }
            write!(s, ",{},{}", r.update_norm, r.ksd).unwrap();
            for v in r.mean.iter().chain(&r.var) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Trains `gen` with `cfg.iterations` amortized steps against `p`.
///
/// Noise is drawn from the `Noise` substream of `cfg.seed`.
pub fn amortize_train<P>(mut gen: Mlp, p: &P, cfg: &AmortizeConfig) -> Result<(Mlp, AmortizeTrace)>
where
    P: TargetDensity + ?Sized,
{
    cfg.validate()?;
    if gen.in_dim() != cfg.noise.dim {
        return Err(Error::Config(format!(
            "generator reads {} inputs but noise dimension is {}",
            gen.in_dim(),
            cfg.noise.dim
        )));
    }
    let mut noise = NoiseSource::new(cfg.noise.dim, cfg.noise.law, substream(cfg.seed, Stream::Noise))?;
    let mut opt = Optimizer::new(cfg.optimizer, gen.num_params())?;
    let mut trace = AmortizeTrace::default();
    for it in 1..=cfg.iterations {
        let xi = noise.draw(cfg.batch);
        let (x, delta, h) = batch_direction(&gen, &xi, p, &cfg.bandwidth)?;
        let stats = apply_rule(&mut gen, &xi, &delta, cfg, &mut opt)?;
        let params = gen.params_flat();
        guard(&Tensor::raw_matrix(1, params.len(), params), it)?;
        guard(&x, it)?;
        let log_now = it == cfg.iterations || (cfg.log_every > 0 && it % cfg.log_every == 0);
        if log_now {
            let ps = ParticleSet::new(x)?;
            let ksd = if ps.n() >= 2 { ksd_estimate(&ps, p, &RbfKernel::new(h)?)? } else { 0.0 };
            trace.rows.push(AmortizeRow {
                step: it,
                fit_objective: stats.fit_objective.last().copied(),
                update_norm: stats.update_norm,
                ksd,
                mean: ps.mean(),
                var: ps.variance(),
            });
        }
    }
    Ok((gen, trace))
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
