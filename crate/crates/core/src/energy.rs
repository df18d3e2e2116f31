//! Energy-based models `p(x|θ) ∝ exp(−φ(x, θ))`.
//!
//! The log-partition function is never evaluated: training only ever uses
//! differences of expectations of `∂_θ φ`, and sampling only needs `∇ₓ φ`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adcore::tape::log_sum_exp;
use crate::adcore::{Activation, BoundMlp, Mlp, MlpSpec, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::svgd::{ParticleSet, TargetDensity};

/// Residual norms below this are treated as the non-differentiable point of
/// the autoencoder energy.
pub const DEGENERATE_RESIDUAL: f64 = 1e-9;

/// Scores `∇ₓ log p` for a batch, with a flag for rows where the energy is
/// not differentiable (their score is reported as zero).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBatch {
    pub scores: Tensor,
    pub degenerate: Vec<bool>,
}

pub trait EnergyModel: Sync {
    fn dim(&self) -> usize;

    fn num_params(&self) -> usize;

    fn params_flat(&self) -> Vec<f64>;

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()>;

    /// `Some(k)` when the model is a joint energy over `k` labels.
    fn num_classes(&self) -> Option<usize> {
        None
    }

    /// Encoder used by the feature-space kernel, if the model has one.
    fn encoder(&self) -> Option<&Mlp> {
        None
    }

    /// `φ(x_i, y_i)` for every row.
    fn phi_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>>;

    /// `∇ₓ log p(x_i | θ) = −∇ₓ φ(x_i, θ)` for every row.
    fn score_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<ScoreBatch>;

    /// `(1/n) Σ_i ∂_θ φ(x_i, θ)`.
    fn mean_grad_theta(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>>;
}

fn check_batch(model: &(impl EnergyModel + ?Sized), x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if x.cols() != model.dim() {
        return Err(Error::dim(format!("model has dimension {}, input has {}", model.dim(), x.cols())));
    }
    if x.rows() == 0 || x.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    match (model.num_classes(), labels) {
        (Some(k), Some(ys)) => {
            if ys.len() != x.rows() {
                return Err(Error::dim(format!("{} labels for {} rows", ys.len(), x.rows())));
            }
            if let Some(&bad) = ys.iter().find(|&&y| y >= k) {
                return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
            }
        }
        (Some(_), None) => return Err(Error::contract("joint energy needs labels")),
        (None, Some(_)) => return Err(Error::contract("labels given to an unlabeled energy")),
        (None, None) => {}
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("energy input".into()));
    }
    Ok(())
}

fn one_row(x: &[f64]) -> Tensor {
    Tensor::raw_matrix(1, x.len(), x.to_vec())
}

/// Single-point energy `φ(x, y)`.
pub fn phi<M: EnergyModel + ?Sized>(model: &M, x: &[f64], y: Option<usize>) -> Result<f64> {
    let ys = y.map(|v| [v]);
    Ok(model.phi_batch(&one_row(x), ys.as_ref().map(|a| a.as_slice()))?[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEval {
    pub grad: Vec<f64>,
    pub degenerate: bool,
}

/// Single-point score `∇ₓ log p(x | θ)`.
pub fn grad_x_log_p<M: EnergyModel + ?Sized>(model: &M, x: &[f64], y: Option<usize>) -> Result<ScoreEval> {
    let ys = y.map(|v| [v]);
    let b = model.score_batch(&one_row(x), ys.as_ref().map(|a| a.as_slice()))?;
    Ok(ScoreEval { grad: b.scores.into_data(), degenerate: b.degenerate[0] })
}

/// Single-point `∂_θ φ(x, θ)`.
pub fn grad_theta_phi<M: EnergyModel + ?Sized>(model: &M, x: &[f64], y: Option<usize>) -> Result<Vec<f64>> {
    let ys = y.map(|v| [v]);
    model.mean_grad_theta(&one_row(x), ys.as_ref().map(|a| a.as_slice()))
}

/// Adapts an energy model (optionally at a fixed label) to a [`TargetDensity`]
/// with `log p = −φ`.
pub struct EnergyTarget<'a, M: EnergyModel + ?Sized> {
    pub model: &'a M,
    pub label: Option<usize>,
}

impl<'a, M: EnergyModel + ?Sized> EnergyTarget<'a, M> {
    pub fn new(model: &'a M) -> Self {
        Self { model, label: None }
    }

    pub fn with_label(model: &'a M, label: usize) -> Self {
        Self { model, label: Some(label) }
    }

    fn labels(&self, n: usize) -> Option<Vec<usize>> {
        self.label.map(|y| vec![y; n])
    }
}

impl<M: EnergyModel + ?Sized> TargetDensity for EnergyTarget<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        phi(self.model, x, self.label).map_or(f64::NAN, |v| -v)
    }

    fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        grad_x_log_p(self.model, x, self.label).map_or_else(|_| vec![f64::NAN; x.len()], |s| s.grad)
    }

    fn grad_log_density_batch(&self, points: &Tensor) -> Result<Tensor> {
        let labels = self.labels(points.rows());
        Ok(self.model.score_batch(points, labels.as_deref())?.scores)
    }
}

/// Closed-form densities used as targets and as test oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticTarget {
    /// Diagonal Gaussian.
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    /// Mixture of diagonal Gaussians.
    Gmm { weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>> },
}

impl AnalyticTarget {
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let t = AnalyticTarget::Gaussian { mean, var };
        t.validate()?;
        Ok(t)
    }

    pub fn standard_normal(dim: usize) -> Self {
        AnalyticTarget::Gaussian { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn gmm(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        let t = AnalyticTarget::Gmm { weights, means, vars };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad_var = |v: &[f64]| v.iter().any(|s| !(*s > 0.0 && s.is_finite()));
        match self {
            AnalyticTarget::Gaussian { mean, var } => {
                if mean.is_empty() || mean.len() != var.len() {
                    return Err(Error::Config("gaussian mean and var must be non-empty and equal length".into()));
                }
                if bad_var(var) {
                    return Err(Error::Config("gaussian variances must be positive".into()));
                }
            }
            AnalyticTarget::Gmm { weights, means, vars } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
                    return Err(Error::Config("gmm needs one mean and var per weight".into()));
                }
                let d = means[0].len();
                if d == 0 || means.iter().chain(vars).any(|v| v.len() != d) {
                    return Err(Error::Config("gmm component dimensions disagree".into()));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config("gmm weights must be non-negative and sum to 1".into()));
                }
                if vars.iter().any(|v| bad_var(v)) {
                    return Err(Error::Config("gmm variances must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Exact i.i.d. samples.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<ParticleSet> {
        self.validate()?;
        let d = TargetDensity::dim(self);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let (mean, var) = match self {
                AnalyticTarget::Gaussian { mean, var } => (mean, var),
                AnalyticTarget::Gmm { weights, means, vars } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut k = weights.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    (&means[k], &vars[k])
                }
            };
            for (m, v) in mean.iter().zip(var) {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + v.sqrt() * z);
            }
        }
        ParticleSet::new(Tensor::matrix(n, d, data)?)
    }

    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let comp = |w: f64, mean: &[f64], var: &[f64]| {
            let mut s = w.ln();
            for ((xi, m), v) in x.iter().zip(mean).zip(var) {
                s -= 0.5 * ((xi - m) * (xi - m) / v + (2.0 * std::f64::consts::PI * v).ln());
            }
            s
        };
        match self {
            AnalyticTarget::Gaussian { mean, var } => vec![comp(1.0, mean, var)],
            AnalyticTarget::Gmm { weights, means, vars } => {
                weights.iter().zip(means).zip(vars).map(|((w, m), v)| comp(*w, m, v)).collect()
            }
        }
    }
}

/// Draws `n` exact samples from `target` using a generator seeded with `seed`.
pub fn sample_analytic(target: &AnalyticTarget, n: usize, seed: u64) -> Result<ParticleSet> {
    target.sample(n, &mut seeded(seed))
}

impl TargetDensity for AnalyticTarget {
    fn dim(&self) -> usize {
        match self {
            AnalyticTarget::Gaussian { mean, .. } => mean.len(),
            AnalyticTarget::Gmm { means, .. } => means[0].len(),
        }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }

    fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        match self {
            AnalyticTarget::Gaussian { mean, var } => {
                x.iter().zip(mean).zip(var).map(|((xi, m), v)| (m - xi) / v).collect()
            }
            AnalyticTarget::Gmm { means, vars, .. } => {
                let logs = self.component_log_densities(x);
                let lse = log_sum_exp(&logs);
                let mut g = vec![0.0; x.len()];
                for ((lk, m), v) in logs.iter().zip(means).zip(vars) {
                    let r = (lk - lse).exp();
                    for (((gi, xi), mi), vi) in g.iter_mut().zip(x).zip(m).zip(v) {
                        *gi += r * (mi - xi) / vi;
                    }
                }
                g
            }
        }
    }
}

/// Analytic targets as parameter-free energies, `φ = −log p`.
impl EnergyModel for AnalyticTarget {
    fn dim(&self) -> usize {
        TargetDensity::dim(self)
    }

    fn num_params(&self) -> usize {
        0
    }

    fn params_flat(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if !flat.is_empty() {
            return Err(Error::dim("analytic targets have no parameters"));
        }
        Ok(())
    }

    fn phi_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        check_batch(self, x, labels)?;
        Ok(x.iter_rows().map(|r| -self.log_density(r)).collect())
    }

    fn score_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<ScoreBatch> {
        check_batch(self, x, labels)?;
        let scores = self.grad_log_density_batch(x)?;
        Ok(ScoreBatch { scores, degenerate: vec![false; x.rows()] })
    }

    fn mean_grad_theta(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        check_batch(self, x, labels)?;
        Ok(Vec::new())
    }
}

/// `φ(x; θ) = θ·x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEnergy {
    pub theta: Vec<f64>,
}

impl EnergyModel for LinearEnergy {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn params_flat(&self) -> Vec<f64> {
        self.theta.clone()
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.theta.len() {
            return Err(Error::dim("parameter count mismatch"));
        }
        self.theta.copy_from_slice(flat);
        Ok(())
    }

    fn phi_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        check_batch(self, x, labels)?;
        Ok(x.iter_rows().map(|r| r.iter().zip(&self.theta).map(|(a, b)| a * b).sum()).collect())
    }

    fn score_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<ScoreBatch> {
        check_batch(self, x, labels)?;
        let row: Vec<f64> = self.theta.iter().map(|t| -t).collect();
        let scores = Tensor::raw_matrix(x.rows(), x.cols(), row.repeat(x.rows()));
        Ok(ScoreBatch { scores, degenerate: vec![false; x.rows()] })
    }

    fn mean_grad_theta(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        check_batch(self, x, labels)?;
        let n = x.rows() as f64;
        let mut g = vec![0.0; x.cols()];
        for r in x.iter_rows() {
            for (a, v) in g.iter_mut().zip(r) {
                *a += v;
            }
        }
        Ok(g.into_iter().map(|v| v / n).collect())
    }
}

/// Sizes for an autoencoder energy's encoder and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSpec {
    pub dim: usize,
    #[serde(default = "default_code_dim")]
    pub code_dim: usize,
    #[serde(default)]
    pub encoder_hidden: Vec<usize>,
    #[serde(default)]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_code_activation")]
    pub code_activation: Activation,
}

fn default_code_dim() -> usize {
    8
}

fn default_code_activation() -> Activation {
    Activation::Tanh
}

impl AutoencoderSpec {
    pub fn encoder(&self) -> MlpSpec {
        MlpSpec::new(self.dim, &self.encoder_hidden, self.code_dim)
            .with_activations(Activation::Tanh, self.code_activation)
    }

    pub fn decoder(&self) -> MlpSpec {
        MlpSpec::new(self.code_dim, &self.decoder_hidden, self.dim)
    }
}

/// `φ(x; θ) = ‖x − D(E(x; θ); θ)‖₂` (unsquared).
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderEnergy {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

struct AeGraph {
    enc: BoundMlp,
    dec: BoundMlp,
    code: Var,
    /// Residual norms, `n×1`.
    norm: Var,
}

impl AutoencoderEnergy {
    pub fn new(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.out_dim() != decoder.in_dim() || decoder.out_dim() != encoder.in_dim() {
            return Err(Error::dim(format!(
                "encoder {}→{} and decoder {}→{} do not compose to an endomorphism",
                encoder.in_dim(),
                encoder.out_dim(),
                decoder.in_dim(),
                decoder.out_dim()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn init(spec: &AutoencoderSpec, stddev: f64, rng: &mut Rng) -> Result<Self> {
        Self::new(
            Mlp::init_gaussian(&spec.encoder(), stddev, rng)?,
            Mlp::init_gaussian(&spec.decoder(), stddev, rng)?,
        )
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    fn build(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<AeGraph> {
        let (enc, dec) = if trainable {
            (self.encoder.bind(tape), self.decoder.bind(tape))
        } else {
            (self.encoder.bind_frozen(tape), self.decoder.bind_frozen(tape))
        };
        let code = enc.apply(tape, x)?;
        let recon = dec.apply(tape, code)?;
        let res = tape.sub(x, recon)?;
        let sq = tape.square(res);
        let ss = tape.row_sum(sq);
        let norm = tape.sqrt(ss);
        Ok(AeGraph { enc, dec, code, norm })
    }

    fn degenerate_mask(norms: &Tensor) -> (Tensor, Vec<bool>) {
        let degenerate: Vec<bool> = norms.data().iter().map(|&v| v < DEGENERATE_RESIDUAL).collect();
        let mask = degenerate.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        (Tensor::raw_matrix(norms.rows(), 1, mask), degenerate)
    }
}

impl EnergyModel for AutoencoderEnergy {
    fn dim(&self) -> usize {
        self.encoder.in_dim()
    }

    fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }

    /// Encoder parameters followed by decoder parameters.
    fn params_flat(&self) -> Vec<f64> {
        let mut p = self.encoder.params_flat();
        p.extend(self.decoder.params_flat());
        p
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("parameter count mismatch"));
        }
        let ne = self.encoder.num_params();
        self.encoder.set_params_flat(&flat[..ne])?;
        self.decoder.set_params_flat(&flat[ne..])
    }

    fn encoder(&self) -> Option<&Mlp> {
        Some(&self.encoder)
    }

    fn phi_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        check_batch(self, x, labels)?;
        let recon = self.decoder.forward(&self.encoder.forward(x)?)?;
        Ok(x.iter_rows()
            .zip(recon.iter_rows())
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .collect())
    }

    fn score_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<ScoreBatch> {
        check_batch(self, x, labels)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let g = self.build(&mut tape, xv, false)?;
        let (mask, degenerate) = Self::degenerate_mask(tape.value(g.norm));
        let grads = tape.backward_with(g.norm, &mask)?;
        let scores = grads.wrt(xv).map(|v| -v);
        Ok(ScoreBatch { scores, degenerate })
    }

    fn mean_grad_theta(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        check_batch(self, x, labels)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = self.build(&mut tape, xv, true)?;
        let (mask, _) = Self::degenerate_mask(tape.value(g.norm));
        let n = x.rows() as f64;
        let grads = tape.backward_with(g.norm, &mask.map(|m| m / n))?;
        let mut out = g.enc.flat_grads(&grads);
        out.extend(g.dec.flat_grads(&grads));
        Ok(out)
    }
}

/// `φ(x, y; θ) = ‖x − D(E(x))‖ + max(m, CE(y, head(E(x))))`.
///
/// The `max` is applied exactly as written: the classification term is
/// floored at the margin, so it stops contributing gradient once the
/// cross-entropy falls below `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEnergy {
    pub base: AutoencoderEnergy,
    /// Single identity layer `code → num_classes`.
    pub head: Mlp,
    pub margin: f64,
}

impl JointEnergy {
    pub fn new(base: AutoencoderEnergy, head: Mlp, margin: f64) -> Result<Self> {
        if head.in_dim() != base.code_dim() {
            return Err(Error::dim("classifier head must read the code"));
        }
        if head.out_dim() < 2 {
            return Err(Error::contract("joint energy needs at least 2 classes"));
        }
        if !(margin >= 0.0) {
            return Err(Error::contract(format!("margin must be non-negative, got {margin}")));
        }
        Ok(Self { base, head, margin })
    }

    pub fn init(spec: &AutoencoderSpec, num_classes: usize, margin: f64, stddev: f64, rng: &mut Rng) -> Result<Self> {
        let base = AutoencoderEnergy::init(spec, stddev, rng)?;
        let head = Mlp::init_gaussian(&MlpSpec::new(spec.code_dim, &[], num_classes), stddev, rng)?;
        Self::new(base, head, margin)
    }

    fn build(&self, tape: &mut Tape, x: Var, labels: &[usize], trainable: bool) -> Result<(AeGraph, BoundMlp, Var, Var)> {
        let g = self.base.build(tape, x, trainable)?;
        let head = if trainable { self.head.bind(tape) } else { self.head.bind_frozen(tape) };
        let logits = head.apply(tape, g.code)?;
        let ce = tape.cross_entropy(logits, labels)?;
        let cls = tape.max_const(ce, self.margin);
        let (mask, _) = AutoencoderEnergy::degenerate_mask(tape.value(g.norm));
        let mask = tape.constant(mask);
        let masked = tape.mul(g.norm, mask)?;
        let total = tape.add(masked, cls)?;
        Ok((g, head, cls, total))
    }

    /// Cross-entropy of the classifier head for each row.
    pub fn cross_entropy(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        check_batch(self, x, Some(labels))?;
        let logits = self.head.forward(&self.base.encoder.forward(x)?)?;
        Ok(logits.iter_rows().zip(labels).map(|(r, &y)| log_sum_exp(r) - r[y]).collect())
    }

    /// Most likely label under the classifier head for each row.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.head.forward(&self.base.encoder.forward(x)?)?;
        Ok(logits
            .iter_rows()
            .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k))
            .collect())
    }
}

impl EnergyModel for JointEnergy {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn num_params(&self) -> usize {
        self.base.num_params() + self.head.num_params()
    }

    /// Encoder, decoder, then classifier head.
    fn params_flat(&self) -> Vec<f64> {
        let mut p = self.base.params_flat();
        p.extend(self.head.params_flat());
        p
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("parameter count mismatch"));
        }
        let nb = self.base.num_params();
        self.base.set_params_flat(&flat[..nb])?;
        self.head.set_params_flat(&flat[nb..])
    }

    fn num_classes(&self) -> Option<usize> {
        Some(self.head.out_dim())
    }

    fn encoder(&self) -> Option<&Mlp> {
        Some(&self.base.encoder)
    }

    fn phi_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        check_batch(self, x, labels)?;
        let labels = labels.unwrap_or_default();
        let res = self.base.phi_batch(x, None)?;
        let ce = self.cross_entropy(x, labels)?;
        Ok(res.iter().zip(ce).map(|(r, c)| r + c.max(self.margin)).collect())
    }

    fn score_batch(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<ScoreBatch> {
        check_batch(self, x, labels)?;
        let labels = labels.unwrap_or_default();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (g, _, _, total) = self.build(&mut tape, xv, labels, false)?;
        let (_, degenerate) = AutoencoderEnergy::degenerate_mask(tape.value(g.norm));
        let grads = tape.backward_with(total, &Tensor::filled(&[x.rows(), 1], 1.0))?;
        Ok(ScoreBatch { scores: grads.wrt(xv).map(|v| -v), degenerate })
    }

    fn mean_grad_theta(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        check_batch(self, x, labels)?;
        let labels = labels.unwrap_or_default();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (g, head, _, total) = self.build(&mut tape, xv, labels, true)?;
        let n = x.rows() as f64;
        let grads = tape.backward_with(total, &Tensor::filled(&[x.rows(), 1], 1.0 / n))?;
        let mut out = g.enc.flat_grads(&grads);
        out.extend(g.dec.flat_grads(&grads));
        out.extend(head.flat_grads(&grads));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::Layer;
    use crate::svgd::relative_error;

    fn identity(d: usize) -> Mlp {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Mlp::new(vec![Layer::new(Tensor::matrix(d, d, w).unwrap(), Tensor::zeros(&[d]), Activation::Identity).unwrap()])
            .unwrap()
    }

    fn random_ae(rng: &mut Rng) -> AutoencoderEnergy {
        let spec = AutoencoderSpec {
            dim: 3,
            code_dim: 2,
            encoder_hidden: vec![4],
            decoder_hidden: vec![4],
            code_activation: Activation::Tanh,
        };
        AutoencoderEnergy::init(&spec, 0.6, rng).unwrap()
    }

    fn fd_theta<M: EnergyModel + Clone>(model: &M, x: &[f64], y: Option<usize>) -> Vec<f64> {
        let p0 = model.params_flat();
        (0..p0.len())
            .map(|k| {
                let mut m = model.clone();
                let mut p = p0.clone();
                p[k] += 1e-5;
                m.set_params_flat(&p).unwrap();
                let up = phi(&m, x, y).unwrap();
                p[k] -= 2e-5;
                m.set_params_flat(&p).unwrap();
                (up - phi(&m, x, y).unwrap()) / 2e-5
            })
            .collect()
    }

    #[test]
    fn perfect_autoencoder_has_zero_energy() {
        let ae = AutoencoderEnergy::new(identity(3), identity(3)).unwrap();
        assert_eq!(phi(&ae, &[1.0, -2.0, 0.5], None).unwrap(), 0.0);
        let s = grad_x_log_p(&ae, &[1.0, -2.0, 0.5], None).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.grad, vec![0.0; 3]);
    }

    #[test]
    fn zero_nets_energy_is_input_norm() {
        let spec = AutoencoderSpec { dim: 2, code_dim: 3, encoder_hidden: vec![], decoder_hidden: vec![], code_activation: Activation::Tanh };
        let ae = AutoencoderEnergy::new(Mlp::zeros(&spec.encoder()), Mlp::zeros(&spec.decoder())).unwrap();
        assert_eq!(phi(&ae, &[3.0, 0.0], None).unwrap(), 3.0);
        assert!((phi(&ae, &[1.8, 2.4], None).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_and_gmm_scores() {
        let g = AnalyticTarget::gaussian(vec![2.0], vec![1.0]).unwrap();
        assert_eq!(g.grad_log_density(&[3.0]), vec![-1.0]);
        let m = AnalyticTarget::gmm(vec![0.5, 0.5], vec![vec![-3.0], vec![3.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        let own = AnalyticTarget::gaussian(vec![3.0], vec![1.0]).unwrap();
        let x = [4.0];
        let (a, b) = (m.grad_log_density(&x)[0], own.grad_log_density(&x)[0]);
        assert!(((a - b) / b).abs() <= 1e-3, "{a} vs {b}");
    }

    #[test]
    fn analytic_scores_match_finite_differences() {
        let m = AnalyticTarget::gmm(
            vec![0.2, 0.5, 0.3],
            vec![vec![-1.0, 2.0], vec![0.5, 0.0], vec![3.0, -1.0]],
            vec![vec![0.5, 1.0], vec![2.0, 0.3], vec![1.0, 1.0]],
        )
        .unwrap();
        let pts = Tensor::from_rows(&[vec![0.0, 0.0], vec![-1.5, 2.5], vec![2.0, -2.0]]).unwrap();
        assert!(crate::svgd::check_target_gradient(&m, &pts, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn invalid_targets_are_rejected() {
        assert!(AnalyticTarget::gaussian(vec![0.0], vec![0.0]).is_err());
        assert!(AnalyticTarget::gmm(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(AnalyticTarget::gmm(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn sampling_moments_and_reproducibility() {
        let t = AnalyticTarget::standard_normal(1);
        let s = sample_analytic(&t, 100_000, 3).unwrap();
        assert!(s.mean()[0].abs() < 0.02 && (s.variance()[0] - 1.0).abs() < 0.05);
        assert_eq!(s, sample_analytic(&t, 100_000, 3).unwrap());
        let single = AnalyticTarget::gmm(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let s = sample_analytic(&single, 50_000, 4).unwrap();
        assert!(s.mean()[0].abs() < 0.03 && (s.variance()[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn autoencoder_gradients_match_finite_differences() {
        let mut rng = seeded(12);
        for _ in 0..20 {
            let ae = random_ae(&mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = EnergyTarget::new(&ae);
            let err = crate::svgd::check_target_gradient(&t, &Tensor::matrix(1, 3, x.clone()).unwrap(), 1e-5).unwrap();
            assert!(err < 1e-5, "score err {err}");
            let g = grad_theta_phi(&ae, &x, None).unwrap();
            let e = relative_error(&g, &fd_theta(&ae, &x, None));
            assert!(e < 1e-5, "theta err {e}");
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let mut rng = seeded(13);
        for _ in 0..20 {
            let base = random_ae(&mut rng);
            let head = Mlp::init_gaussian(&MlpSpec::new(2, &[], 4), 1.0, &mut rng).unwrap();
            let je = JointEnergy::new(base, head, 0.05).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = rng.random_range(0..4);
            let t = EnergyTarget::with_label(&je, y);
            let err = crate::svgd::check_target_gradient(&t, &Tensor::matrix(1, 3, x.clone()).unwrap(), 1e-5).unwrap();
            assert!(err < 1e-5, "score err {err}");
            let e = relative_error(&grad_theta_phi(&je, &x, Some(y)).unwrap(), &fd_theta(&je, &x, Some(y)));
            assert!(e < 1e-5, "theta err {e}");
        }
    }

    #[test]
    fn clamped_joint_term_contributes_margin_and_no_head_gradient() {
        let mut rng = seeded(14);
        let base = random_ae(&mut rng);
        // A head that is very confident in class 1 whatever the code.
        let head = Mlp::new(vec![Layer::new(
            Tensor::zeros(&[2, 3]),
            Tensor::vector(vec![-10.0, 10.0, -10.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let je = JointEnergy::new(base.clone(), head, 0.2).unwrap();
        let x = [0.3, -0.7, 1.1];
        let total = phi(&je, &x, Some(1)).unwrap();
        let res = phi(&base, &x, None).unwrap();
        assert!((total - (res + 0.2)).abs() < 1e-15);
        let g = grad_theta_phi(&je, &x, Some(1)).unwrap();
        let nb = base.num_params();
        assert!(g[nb..].iter().all(|&v| v == 0.0));
        assert!(phi(&je, &x, Some(0)).unwrap() >= res + 0.2);
    }

    #[test]
    fn frozen_downstream_zeroes_encoder_gradient() {
        let mut rng = seeded(15);
        let mut ae = random_ae(&mut rng);
        // Decoder that ignores its input: the encoder can no longer affect φ.
        for l in ae.decoder.layers_mut().iter_mut().take(1) {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let g = grad_theta_phi(&ae, &[0.5, 0.1, -0.4], None).unwrap();
        let ne = ae.encoder.num_params();
        assert!(g[..ne].iter().all(|&v| v == 0.0));
        assert!(g[ne..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn label_contracts() {
        let mut rng = seeded(16);
        let je = JointEnergy::init(
            &AutoencoderSpec { dim: 3, code_dim: 2, encoder_hidden: vec![], decoder_hidden: vec![], code_activation: Activation::Tanh },
            3,
            0.2,
            0.1,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(phi(&je, &[0.0; 3], Some(3)), Err(Error::Contract(_))));
        assert!(matches!(phi(&je, &[0.0; 3], None), Err(Error::Contract(_))));
        let ae = random_ae(&mut rng);
        assert!(matches!(phi(&ae, &[0.0; 3], Some(0)), Err(Error::Contract(_))));
        assert!(JointEnergy::new(ae.clone(), Mlp::zeros(&MlpSpec::new(2, &[], 1)), 0.2).is_err());
        assert!(JointEnergy::new(ae, Mlp::zeros(&MlpSpec::new(2, &[], 2)), -1.0).is_err());
    }

    #[test]
    fn energy_is_non_negative_and_translation_covariant() {
        let mut rng = seeded(17);
        let ae = random_ae(&mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(phi(&ae, &x, None).unwrap() >= 0.0);
        }
        let c = 1.7;
        let a = AnalyticTarget::gaussian(vec![0.5, -1.0], vec![2.0, 0.5]).unwrap();
        let b = AnalyticTarget::gaussian(vec![0.5 + c, -1.0 + c], vec![2.0, 0.5]).unwrap();
        let (ga, gb) = (a.grad_log_density(&[0.1, 0.2]), b.grad_log_density(&[0.1 + c, 0.2 + c]));
        assert!(ga.iter().zip(&gb).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn linear_energy_batch_gradients() {
        let m = LinearEnergy { theta: vec![2.0, -1.0] };
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(m.phi_batch(&x, None).unwrap(), vec![0.0, 6.0]);
        assert_eq!(m.mean_grad_theta(&x, None).unwrap(), vec![2.0, 1.0]);
        assert_eq!(m.score_batch(&x, None).unwrap().scores.row(1), &[-2.0, 1.0]);
    }
}
