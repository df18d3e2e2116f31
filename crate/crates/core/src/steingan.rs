//! Amortized maximum likelihood for energy models.
//!
//! Training alternates two updates. The generator follows SVGD against the
//! current energy model `p(x|θ) ∝ exp(−φ(x, θ))`, with a kernel measured in
//! the model's encoder space. The energy model then takes a discounted
//! likelihood step using the generator's samples in place of the intractable
//! model expectation. A pacing controller keys the energy learning rate to
//! the gap between real and generated batch energies.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adcore::{Checkpoint, Entry, Mlp, Tensor};
use crate::amortize::{apply_rule, AmortizeConfig, AmortizeRule, ChainUpdate, NoiseConfig, NoiseLaw, NoiseSource};
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::kernels::{median_bandwidth, Embedder, FeatureKernel, RbfKernel};
use crate::optim::{Direction, Optimizer, OptimizerConfig};
use crate::par::Exec;
use crate::rng::{seeded, substream, Rng, Stream};
use crate::svgd::{direction_from_scores, direction_from_scores_grouped, guard, BandwidthPolicy, ParticleSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacingMode {
    #[default]
    Normal,
    Fast,
    Frozen,
}

impl PacingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PacingMode::Normal => "normal",
            PacingMode::Fast => "fast",
            PacingMode::Frozen => "frozen",
        }
    }
}

/// Whether the pacing controller runs, or the energy model is pinned to one mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacingPolicy {
    #[default]
    Adaptive,
    AlwaysNormal,
    AlwaysFrozen,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PacingState {
    pub mode: PacingMode,
    pub last_real: f64,
    pub last_fake: f64,
}

/// The pacing rule: frozen when the energy gap exceeds `freeze_gap`,
/// otherwise fast when real data has the higher energy, otherwise normal.
pub fn pacing_mode(mean_real: f64, mean_fake: f64, freeze_gap: f64) -> PacingMode {
    if (mean_real - mean_fake).abs() > freeze_gap {
        PacingMode::Frozen
    } else if mean_real > mean_fake {
        PacingMode::Fast
    } else {
        PacingMode::Normal
    }
}

/// Re-evaluates the mode from the latest batch energies. The previous state
/// does not influence the result.
pub fn pacing_update(_state: &PacingState, mean_real: f64, mean_fake: f64, cfg: &SteinGanConfig) -> PacingState {
    let mode = match cfg.pacing {
        PacingPolicy::Adaptive => pacing_mode(mean_real, mean_fake, cfg.freeze_gap),
        PacingPolicy::AlwaysNormal => PacingMode::Normal,
        PacingPolicy::AlwaysFrozen => PacingMode::Frozen,
    };
    PacingState { mode, last_real: mean_real, last_fake: mean_fake }
}

fn check_pair<M: EnergyModel + ?Sized>(model: &M, real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(Error::contract("real and generated batches must be non-empty"));
    }
    if real.cols() != fake.cols() || real.cols() != model.dim() {
        return Err(Error::dim(format!(
            "model dimension {}, real batch {}, generated batch {}",
            model.dim(),
            real.cols(),
            fake.cols()
        )));
    }
    Ok(())
}

/// `mean_fake ∂_θφ − mean_real ∂_θφ`, the ascent direction of the
/// log-likelihood with the model expectation replaced by generated samples.
pub fn mle_theta_gradient<M: EnergyModel + ?Sized>(
    model: &M,
    real: &Tensor,
    real_labels: Option<&[usize]>,
    fake: &Tensor,
    fake_labels: Option<&[usize]>,
) -> Result<Vec<f64>> {
    check_pair(model, real, fake)?;
    let gf = model.mean_grad_theta(fake, fake_labels)?;
    let gr = model.mean_grad_theta(real, real_labels)?;
    Ok(gf.iter().zip(&gr).map(|(f, r)| f - r).collect())
}

/// `(1−γ) mean_fake ∂_θφ − mean_real ∂_θφ`.
pub fn mle_theta_gradient_discounted<M: EnergyModel + ?Sized>(
    model: &M,
    real: &Tensor,
    real_labels: Option<&[usize]>,
    fake: &Tensor,
    fake_labels: Option<&[usize]>,
    gamma: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::contract(format!("discount must be in [0, 1], got {gamma}")));
    }
    check_pair(model, real, fake)?;
    let gf = model.mean_grad_theta(fake, fake_labels)?;
    let gr = model.mean_grad_theta(real, real_labels)?;
    Ok(gf.iter().zip(&gr).map(|(f, r)| (1.0 - gamma) * f - r).collect())
}

fn default_gamma() -> f64 {
    0.7
}

fn default_gen_lr() -> f64 {
    1e-3
}

fn default_energy_lr() -> f64 {
    1e-4
}

fn default_energy_lr_fast() -> f64 {
    5e-4
}

fn default_freeze_gap() -> f64 {
    0.5
}

fn default_batch() -> usize {
    100
}

fn default_one() -> usize {
    1
}

fn default_margin() -> f64 {
    0.2
}

fn default_kernel_scale() -> f64 {
    0.5
}

fn default_step() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteinGanConfig {
    /// Discount on the generated-sample term of the energy update.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_gen_lr")]
    pub gen_lr: f64,
    #[serde(default = "default_energy_lr")]
    pub energy_lr: f64,
    #[serde(default = "default_energy_lr_fast")]
    pub energy_lr_fast: f64,
    #[serde(default = "default_freeze_gap")]
    pub freeze_gap: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Generator updates per energy update.
    #[serde(default = "default_one")]
    pub eta_steps_per_theta: usize,
    /// Floor on the classification term of a joint energy.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Feature-kernel bandwidth as a multiple of the median code distance.
    #[serde(default = "default_kernel_scale")]
    pub kernel_scale: f64,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rule: AmortizeRule,
    /// Particle step ε for the plain chain rule and the fit and least-squares rules.
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub pacing: PacingPolicy,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_one")]
    pub log_every: usize,
}

impl SteinGanConfig {
    pub fn new(iterations: usize) -> Self {
        Self {
            gamma: default_gamma(),
            gen_lr: default_gen_lr(),
            energy_lr: default_energy_lr(),
            energy_lr_fast: default_energy_lr_fast(),
            freeze_gap: default_freeze_gap(),
            batch: default_batch(),
            eta_steps_per_theta: 1,
            margin: default_margin(),
            kernel_scale: default_kernel_scale(),
            iterations,
            seed: 0,
            rule: AmortizeRule::ChainRule,
            step: default_step(),
            pacing: PacingPolicy::Adaptive,
            noise: NoiseConfig::default(),
            log_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        for (name, v) in [("gen_lr", self.gen_lr), ("energy_lr", self.energy_lr), ("energy_lr_fast", self.energy_lr_fast)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.freeze_gap > 0.0) {
            return Err(Error::Config(format!("freeze_gap must be positive, got {}", self.freeze_gap)));
        }
        if self.batch == 0 || self.eta_steps_per_theta == 0 {
            return Err(Error::Config("batch and eta_steps_per_theta must be at least 1".into()));
        }
        if !(self.margin >= 0.0) || !(self.kernel_scale > 0.0) || !(self.step > 0.0) {
            return Err(Error::Config("margin must be non-negative; kernel_scale and step positive".into()));
        }
        if self.noise.dim == 0 {
            return Err(Error::Config("noise dimension must be at least 1".into()));
        }
        Ok(())
    }

    fn amortize(&self) -> AmortizeConfig {
        let mut a = AmortizeConfig::new(self.rule, self.iterations);
        a.batch = self.batch;
        a.step = self.step;
        a.bandwidth = BandwidthPolicy::Median { scale: self.kernel_scale };
        a.optimizer = OptimizerConfig::adam(self.gen_lr);
        a.chain_update = ChainUpdate::Optimizer;
        a.noise = self.noise;
        a.seed = self.seed;
        a
    }
}

/// What a generator needs besides its weights to be sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerMeta {
    pub noise: NoiseConfig,
    /// Set for label-conditional generators, whose input is `[ξ, onehot(y)]`.
    pub num_classes: Option<usize>,
}

impl SamplerMeta {
    pub fn input_dim(&self) -> usize {
        self.noise.dim + self.num_classes.unwrap_or(0)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let law = match self.noise.law {
            NoiseLaw::Uniform => "uniform",
            NoiseLaw::Normal => "normal",
        };
        ck.insert("noise.dim", Entry::Integer(self.noise.dim as u64))
            .insert("noise.law", Entry::Text(law.into()))
            .insert("num_classes", Entry::Integer(self.num_classes.unwrap_or(0) as u64));
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let law = match ck.text("noise.law")? {
            "uniform" => NoiseLaw::Uniform,
            "normal" => NoiseLaw::Normal,
            other => return Err(Error::contract(format!("unknown noise law '{other}' in checkpoint"))),
        };
        let k = ck.integer("num_classes")? as usize;
        Ok(Self {
            noise: NoiseConfig { dim: ck.integer("noise.dim")? as usize, law },
            num_classes: (k > 0).then_some(k),
        })
    }
}

/// `[ξ, onehot(y)]` rows, or `ξ` alone when there are no labels.
pub fn generator_input(noise: &Tensor, labels: Option<&[usize]>, num_classes: Option<usize>) -> Result<Tensor> {
    match (labels, num_classes) {
        (None, None) => Ok(noise.clone()),
        (Some(ys), Some(k)) => {
            if ys.len() != noise.rows() {
                return Err(Error::dim("one label per noise row is required"));
            }
            let w = noise.cols() + k;
            let mut data = Vec::with_capacity(noise.rows() * w);
            for (row, &y) in noise.iter_rows().zip(ys) {
                if y >= k {
                    return Err(Error::contract(format!("label {y} out of range for {k} classes")));
                }
                data.extend_from_slice(row);
                data.extend((0..k).map(|c| if c == y { 1.0 } else { 0.0 }));
            }
            Tensor::matrix(noise.rows(), w, data)
        }
        (Some(_), None) => Err(Error::contract("label given to an unconditional generator")),
        (None, Some(_)) => Err(Error::contract("conditional generator needs a label")),
    }
}

fn check_generator(gen: &Mlp, meta: &SamplerMeta) -> Result<()> {
    if gen.in_dim() != meta.input_dim() {
        return Err(Error::dim(format!(
            "generator reads {} inputs, noise and labels give {}",
            gen.in_dim(),
            meta.input_dim()
        )));
    }
    Ok(())
}

/// Draws `n` generator samples with noise seeded by `seed`.
pub fn sample_generator(gen: &Mlp, meta: &SamplerMeta, n: usize, seed: u64, label: Option<usize>) -> Result<ParticleSet> {
    check_generator(gen, meta)?;
    let xi = NoiseSource::new(meta.noise.dim, meta.noise.law, seeded(seed))?.draw(n);
    let labels = label.map(|y| vec![y; n]);
    ParticleSet::new(gen.forward(&generator_input(&xi, labels.as_deref(), meta.num_classes)?)?)
}

/// Outputs along the noise random walk `ξ ← ξ + 0.01·U[−1, 1]`.
pub fn random_walk(gen: &Mlp, meta: &SamplerMeta, steps: usize, seed: u64, label: Option<usize>) -> Result<ParticleSet> {
    check_generator(gen, meta)?;
    let mut rng = seeded(seed);
    let mut xi = NoiseSource::new(meta.noise.dim, meta.noise.law, rng.clone())?.draw(1).into_data();
    let mut rows = Vec::with_capacity(steps * meta.noise.dim);
    for _ in 0..steps {
        rows.extend_from_slice(&xi);
        for v in xi.iter_mut() {
            *v += 0.01 * rng.random_range(-1.0..=1.0);
        }
    }
    let walk = Tensor::matrix(steps, meta.noise.dim, rows)?;
    let labels = label.map(|y| vec![y; steps]);
    ParticleSet::new(gen.forward(&generator_input(&walk, labels.as_deref(), meta.num_classes)?)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteinGanRow {
    pub iteration: usize,
    pub mean_real_energy: f64,
    pub mean_fake_energy: f64,
    pub pacing: PacingMode,
    pub bandwidth: f64,
    pub gen_update_norm: f64,
    pub theta_update_norm: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SteinGanTrace {
    pub rows: Vec<SteinGanRow>,
}

impl SteinGanTrace {
    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.mean.len());
        let mut s = String::from(
            "iter,mean_real_energy,mean_fake_energy,pacing_mode,bandwidth,gen_update_norm,theta_update_norm",
        );
        for k in 0..d {
            write!(s, ",mean_{k}").unwrap();
        }
        for k in 0..d {
            write!(s, ",var_{k}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(
                s,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.mean_real_energy,
                r.mean_fake_energy,
                r.pacing.as_str(),
                r.bandwidth,
                r.gen_update_norm,
                r.theta_update_norm
            )
            .unwrap();
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

/// Training state. Kept as a value so that a failed step can still be
/// checkpointed by the caller.
pub struct SteinGan<'d, M: EnergyModel> {
    pub gen: Mlp,
    pub model: M,
    pub pacing: PacingState,
    pub iteration: usize,
    cfg: SteinGanConfig,
    amortize: AmortizeConfig,
    data: &'d Dataset,
    meta: SamplerMeta,
    gen_opt: Optimizer,
    energy_opt: Optimizer,
    noise: NoiseSource,
    data_rng: Rng,
    label_rng: Rng,
    label_freqs: Option<Vec<f64>>,
}

impl<'d, M: EnergyModel> SteinGan<'d, M> {
    pub fn new(gen: Mlp, model: M, data: &'d Dataset, cfg: SteinGanConfig) -> Result<Self> {
        cfg.validate()?;
        if data.dim() != model.dim() || gen.out_dim() != model.dim() {
            return Err(Error::dim(format!(
                "data dimension {}, generator output {}, energy dimension {}",
                data.dim(),
                gen.out_dim(),
                model.dim()
            )));
        }
        let label_freqs = match model.num_classes() {
            Some(k) => {
                let freqs = data
                    .class_frequencies()
                    .ok_or_else(|| Error::Config("a joint energy needs a labeled dataset".into()))?;
                if freqs.len() != k {
                    return Err(Error::Config(format!("dataset has {} classes, energy model {k}", freqs.len())));
                }
                Some(freqs)
            }
            None => None,
        };
        let meta = SamplerMeta { noise: cfg.noise, num_classes: model.num_classes() };
        check_generator(&gen, &meta)?;
        Ok(Self {
            gen_opt: Optimizer::new(OptimizerConfig::adam(cfg.gen_lr), gen.num_params())?,
            energy_opt: Optimizer::new(OptimizerConfig::adam(cfg.energy_lr), model.num_params())?,
            noise: NoiseSource::new(cfg.noise.dim, cfg.noise.law, substream(cfg.seed, Stream::Noise))?,
            data_rng: substream(cfg.seed, Stream::Data),
            label_rng: substream(cfg.seed, Stream::Labels),
            amortize: cfg.amortize(),
            pacing: PacingState::default(),
            iteration: 0,
            gen,
            model,
            cfg,
            data,
            meta,
            label_freqs,
        })
    }

    pub fn config(&self) -> &SteinGanConfig {
        &self.cfg
    }

    pub fn meta(&self) -> SamplerMeta {
        self.meta
    }

    fn draw_labels(&mut self, m: usize) -> Option<Vec<usize>> {
        let freqs = self.label_freqs.as_ref()?;
        let rng = &mut self.label_rng;
        Some(
            (0..m)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (k, f) in freqs.iter().enumerate() {
                        acc += f;
                        if u < acc {
                            return k;
                        }
                    }
                    freqs.len() - 1
                })
                .collect(),
        )
    }

    /// One generator phase and one energy update.
    pub fn step(&mut self) -> Result<SteinGanRow> {
        let it = self.iteration + 1;
        let exec = Exec::default();
        let m = self.cfg.batch;
        let mut last = None;
        let mut gen_norm = 0.0;
        let mut h = 0.0;
        for _ in 0..self.cfg.eta_steps_per_theta {
            let xi = self.noise.draw(m);
            let labels = self.draw_labels(m);
            let input = generator_input(&xi, labels.as_deref(), self.meta.num_classes)?;
            let x = self.gen.forward(&input)?;
            guard(&x, it)?;
            let scores = self.model.score_batch(&x, labels.as_deref())?.scores;
            let delta = match self.model.encoder() {
                Some(enc) => {
                    h = median_bandwidth(&x, self.cfg.kernel_scale, Some(enc as &dyn Embedder))?;
                    let kernel = FeatureKernel::new(h, enc)?;
                    match &labels {
                        Some(ys) => direction_from_scores_grouped(&x, &scores, ys, &kernel, exec)?,
                        None => direction_from_scores(&x, &scores, &kernel, exec)?,
                    }
                }
                None => {
                    h = median_bandwidth(&x, self.cfg.kernel_scale, None)?;
                    let kernel = RbfKernel::new(h)?;
                    match &labels {
                        Some(ys) => direction_from_scores_grouped(&x, &scores, ys, &kernel, exec)?,
                        None => direction_from_scores(&x, &scores, &kernel, exec)?,
                    }
                }
            };
            gen_norm = apply_rule(&mut self.gen, &input, &delta, &self.amortize, &mut self.gen_opt)?.update_norm;
            last = Some((input, labels));
        }
        let (input, fake_labels) = last.expect("at least one generator step");
        let fake = self.gen.forward(&input)?;
        guard(&fake, it)?;
        let (real, real_labels) = self.data.sample_batch(m, &mut self.data_rng);
        let real_labels = if self.label_freqs.is_some() { real_labels } else { None };

        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let e_real = mean(self.model.phi_batch(&real, real_labels.as_deref())?);
        let e_fake = mean(self.model.phi_batch(&fake, fake_labels.as_deref())?);
        if !e_real.is_finite() || !e_fake.is_finite() {
            return Err(Error::NonFinite(format!("batch energy at iteration {it}")));
        }
        self.pacing = pacing_update(&self.pacing, e_real, e_fake, &self.cfg);
        let theta_norm = match self.pacing.mode {
            PacingMode::Frozen => 0.0,
            mode => {
                let lr = if mode == PacingMode::Fast { self.cfg.energy_lr_fast } else { self.cfg.energy_lr };
                self.energy_opt.set_lr(lr)?;
                let g = mle_theta_gradient_discounted(
                    &self.model,
                    &real,
                    real_labels.as_deref(),
                    &fake,
                    fake_labels.as_deref(),
                    self.cfg.gamma,
                )?;
                let mut params = self.model.params_flat();
                let norm = self.energy_opt.step(&mut params, &g, Direction::Ascent)?;
                if params.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("energy parameters at iteration {it}")));
                }
                self.model.set_params_flat(&params)?;
                norm
            }
        };
        if self.gen.params_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("generator parameters at iteration {it}")));
        }
        self.iteration = it;
        let ps = ParticleSet::new(fake)?;
        Ok(SteinGanRow {
            iteration: it,
            mean_real_energy: e_real,
            mean_fake_energy: e_fake,
            pacing: self.pacing.mode,
            bandwidth: h,
            gen_update_norm: gen_norm,
            theta_update_norm: theta_norm,
            mean: ps.mean(),
            var: ps.variance(),
        })
    }

    /// Runs the remaining configured iterations.
    pub fn train(&mut self) -> Result<SteinGanTrace> {
        let mut trace = SteinGanTrace::default();
        while self.iteration < self.cfg.iterations {
            let row = self.step()?;
            let it = row.iteration;
            if it == self.cfg.iterations || (self.cfg.log_every > 0 && it % self.cfg.log_every == 0) {
                trace.rows.push(row);
            }
        }
        Ok(trace)
    }

    /// Generator, energy parameters, optimizer states and sampler metadata.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("generator", Entry::Net(self.gen.clone()))
            .insert("energy.params", Entry::Vector(self.model.params_flat()))
            .insert("iteration", Entry::Integer(self.iteration as u64))
            .insert("pacing.mode", Entry::Text(self.pacing.mode.as_str().into()));
        self.meta.save_into(&mut ck);
        self.gen_opt.save_into(&mut ck, "opt.gen");
        self.energy_opt.save_into(&mut ck, "opt.energy");
        ck
    }
}

/// Trains a generator and energy model together for `cfg.iterations` steps.
pub fn steingan_train<M: EnergyModel>(
    data: &Dataset,
    gen: Mlp,
    model: M,
    cfg: &SteinGanConfig,
) -> Result<(Mlp, M, SteinGanTrace)> {
    let mut run = SteinGan::new(gen, model, data, cfg.clone())?;
    let trace = run.train()?;
    Ok((run.gen, run.model, trace))
}
