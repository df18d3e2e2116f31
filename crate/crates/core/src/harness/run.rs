//! Executes an [`ExperimentConfig`] and writes its artifacts.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::adcore::{Checkpoint, Entry, Mlp, Tensor};
use crate::amortize::amortize_train;
use crate::energy::{AutoencoderEnergy, EnergyModel, JointEnergy};
use crate::error::{Error, Result};
use crate::harness::check::{format_table, run_checks, CheckResult};
use crate::harness::config::{DatasetSpec, ExperimentConfig, Mode};
use crate::harness::data::{gen_synthetic, load_idx, nearest_centroid, Dataset};
use crate::harness::output::{write_samples, ShapeHint};
use crate::rng::{substream, Rng, Stream};
use crate::steingan::{sample_generator, SamplerMeta, SteinGan, SteinGanConfig, SteinGanTrace};
use crate::svgd::{svgd_run, ParticleSet, TargetDensity};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ABORT_FILE: &str = "abort.bin";

/// Process exit status for a failed run: configuration problems and numerical
/// blow-ups get their own codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Diverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overwrite: bool,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub out_dir: Option<PathBuf>,
    pub files: Vec<PathBuf>,
    pub checks: Vec<CheckResult>,
    pub summary: String,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Creates `dir` if needed. A non-empty directory is only reused with `overwrite`.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --overwrite to reuse it",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn run_path(path: &Path, opts: &RunOptions) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    run_config(cfg, base, opts)
}

/// Runs `cfg`; relative IDX paths resolve against `base`.
pub fn run_config(mut cfg: ExperimentConfig, base: &Path, opts: &RunOptions) -> Result<RunReport> {
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    let out_dir = match (&cfg.out, cfg.mode) {
        (Some(dir), _) => Some(dir.clone()),
        (None, Mode::Check) => None,
        (None, _) => return Err(Error::Config("no output directory: set `out` or pass --out".into())),
    };
    let mut report = RunReport { out_dir: out_dir.clone(), files: Vec::new(), checks: Vec::new(), summary: String::new() };
    if let Some(dir) = &out_dir {
        prepare_out_dir(dir, opts.overwrite)?;
        // Written first so an unwritable directory fails before any compute.
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()?)?;
        report.files.push(path);
    }
    match cfg.mode {
        Mode::Check => run_check(&cfg, out_dir.as_deref(), &mut report)?,
        Mode::Svgd => run_svgd(&cfg, out_dir.as_deref().unwrap(), &mut report)?,
        Mode::Amortize => run_amortize(&cfg, out_dir.as_deref().unwrap(), &mut report)?,
        Mode::Steingan => run_steingan(&cfg, base, out_dir.as_deref().unwrap(), &mut report)?,
    }
    Ok(report)
}

fn sample_file(dir: &Path, image_side: Option<usize>) -> (PathBuf, ShapeHint) {
    match image_side {
        Some(side) => (dir.join("samples.pgm"), ShapeHint::Image { height: side, width: side }),
        None => (dir.join("samples.csv"), ShapeHint::Columns),
    }
}

fn run_check(cfg: &ExperimentConfig, out: Option<&Path>, report: &mut RunReport) -> Result<()> {
    report.checks = run_checks(cfg.seed)?;
    report.summary = format_table(&report.checks);
    if let Some(dir) = out {
        let path = dir.join("checks.txt");
        std::fs::write(&path, &report.summary)?;
        report.files.push(path);
    }
    Ok(())
}

fn run_svgd(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let target = cfg.target.as_ref().unwrap();
    let init = cfg.particles.as_ref().unwrap();
    let mut svgd = cfg.svgd.clone().unwrap();
    svgd.seed = cfg.seed;
    let mut rng = substream(cfg.seed, Stream::Init);
    let d = TargetDensity::dim(target);
    let data = (0..init.n * d)
        .map(|i| init.mean[i % d] + init.std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let particles = ParticleSet::new(Tensor::matrix(init.n, d, data)?)?;
    let (particles, trace) = svgd_run(particles, target, &svgd)?;
    let path = out.join(TRACE_FILE);
    trace.write_csv(&path)?;
    report.files.push(path);
    let (path, hint) = sample_file(out, cfg.output.image_side);
    write_samples(&particles, hint, &path)?;
    report.files.push(path);
    report.summary = format!("final mean {:?}, variance {:?}", particles.mean(), particles.variance());
    Ok(())
}

fn eval_seed(seed: u64) -> u64 {
    substream(seed, Stream::Eval).random()
}

fn run_amortize(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let target = cfg.target.as_ref().unwrap();
    let mut acfg = cfg.amortize.clone().unwrap();
    acfg.seed = cfg.seed;
    let spec = cfg.generator.as_ref().unwrap();
    let mut rng = substream(cfg.seed, Stream::Init);
    let gen = Mlp::init_gaussian(&spec.mlp(acfg.noise.dim, TargetDensity::dim(target)), spec.init_std, &mut rng)?;
    let (gen, trace) = amortize_train(gen, target, &acfg)?;
    let path = out.join(TRACE_FILE);
    trace.write_csv(&path)?;
    report.files.push(path);

    let meta = SamplerMeta { noise: acfg.noise, num_classes: None };
    let mut ck = Checkpoint::new();
    ck.insert("generator", Entry::Net(gen.clone()));
    meta.save_into(&mut ck);
    save_checkpoint(&mut ck, cfg.output.image_side, &out.join(CHECKPOINT_FILE), report)?;

    let samples = sample_generator(&gen, &meta, cfg.output.samples, eval_seed(cfg.seed), None)?;
    let (path, hint) = sample_file(out, cfg.output.image_side);
    write_samples(&samples, hint, &path)?;
    report.files.push(path);
    report.summary = format!("sample mean {:?}, variance {:?}", samples.mean(), samples.variance());
    Ok(())
}

fn save_checkpoint(ck: &mut Checkpoint, image_side: Option<usize>, path: &Path, report: &mut RunReport) -> Result<()> {
    if let Some(side) = image_side {
        ck.insert("sample.image_side", Entry::Integer(side as u64));
    }
    ck.save(path)?;
    report.files.push(path.to_path_buf());
    Ok(())
}

fn load_dataset(spec: &DatasetSpec, seed: u64, base: &Path) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic { spec } => gen_synthetic(spec, seed),
        DatasetSpec::Idx { images, labels, transform } => {
            let labels = labels.as_ref().map(|p| base.join(p));
            load_idx(&base.join(images), labels.as_deref(), transform.unwrap_or_default())
        }
    }
}

fn run_steingan(cfg: &ExperimentConfig, base: &Path, out: &Path, report: &mut RunReport) -> Result<()> {
    let data = load_dataset(cfg.dataset.as_ref().unwrap(), cfg.seed, base)?;
    let espec = cfg.energy.as_ref().unwrap();
    let mut scfg = cfg.steingan.clone().unwrap();
    scfg.seed = cfg.seed;
    let mut rng = substream(cfg.seed, Stream::Init);
    let ae = espec.autoencoder(data.dim());
    if espec.joint {
        let k = data
            .num_classes
            .ok_or_else(|| Error::Config("a joint energy needs a labeled dataset".into()))?;
        let model = JointEnergy::init(&ae, k, scfg.margin, espec.init_std, &mut rng)?;
        train_gan(cfg, &data, model, scfg, rng, out, report)
    } else {
        let model = AutoencoderEnergy::init(&ae, espec.init_std, &mut rng)?;
        train_gan(cfg, &data, model, scfg, rng, out, report)
    }
}

fn train_gan<M: EnergyModel>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: M,
    scfg: SteinGanConfig,
    mut rng: Rng,
    out: &Path,
    report: &mut RunReport,
) -> Result<()> {
    let spec = cfg.generator.as_ref().unwrap();
    let input_dim = scfg.noise.dim + model.num_classes().unwrap_or(0);
    let gen = Mlp::init_gaussian(&spec.mlp(input_dim, data.dim()), spec.init_std, &mut rng)?;
    let (iterations, log_every) = (scfg.iterations, scfg.log_every);
    let mut run = SteinGan::new(gen, model, data, scfg)?;
    let mut trace = SteinGanTrace::default();
    let trace_path = out.join(TRACE_FILE);
    while run.iteration < iterations {
        match run.step() {
            Ok(row) => {
                if row.iteration == iterations || (log_every > 0 && row.iteration % log_every == 0) {
                    trace.rows.push(row);
                }
            }
            Err(e) => {
                trace.write_csv(&trace_path)?;
                let path = out.join(ABORT_FILE);
                let mut ck = run.checkpoint();
                save_checkpoint(&mut ck, cfg.output.image_side, &path, report)?;
                log::error!("training aborted; state dumped to {}", path.display());
                return Err(e);
            }
        }
    }
    trace.write_csv(&trace_path)?;
    report.files.push(trace_path);
    let mut ck = run.checkpoint();
    save_checkpoint(&mut ck, cfg.output.image_side, &out.join(CHECKPOINT_FILE), report)?;

    let meta = run.meta();
    let seed = eval_seed(cfg.seed);
    let samples = draw_samples(&run.gen, &meta, cfg.output.samples, seed, None)?;
    let (path, hint) = sample_file(out, cfg.output.image_side);
    write_samples(&samples, hint, &path)?;
    report.files.push(path);

    let last = trace.rows.last().expect("at least one iteration");
    report.summary = format!(
        "mean real energy {:.4}, mean generated energy {:.4}",
        last.mean_real_energy, last.mean_fake_energy
    );
    if let Some(k) = meta.num_classes {
        let centroids = data.class_centroids()?;
        let mut hits = 0;
        for y in 0..k {
            let s = sample_generator(&run.gen, &meta, 100, seed.wrapping_add(y as u64), Some(y))?;
            hits += (0..s.n()).filter(|&i| nearest_centroid(&centroids, s.row(i)) == y).count();
        }
        report.summary.push_str(&format!(", conditional accuracy {:.3}", hits as f64 / (100 * k) as f64));
    }
    Ok(())
}

/// `n` samples; conditional generators get an even split over the classes
/// unless `label` pins one.
pub fn draw_samples(gen: &Mlp, meta: &SamplerMeta, n: usize, seed: u64, label: Option<usize>) -> Result<ParticleSet> {
    match (meta.num_classes, label) {
        (None, Some(_)) => Err(Error::Config("this generator is not label-conditional".into())),
        (Some(k), Some(y)) if y >= k => Err(Error::Config(format!("label {y} out of range for {k} classes"))),
        (Some(k), None) => {
            let per = n.div_ceil(k);
            let mut rows = Vec::with_capacity(per * k * gen.out_dim());
            for y in 0..k {
                let s = sample_generator(gen, meta, per, seed.wrapping_add(y as u64), Some(y))?;
                rows.extend_from_slice(s.positions().data());
            }
            ParticleSet::new(Tensor::matrix(per * k, gen.out_dim(), rows)?)
        }
        _ => sample_generator(gen, meta, n, seed, label),
    }
}

/// Draws samples from a saved generator into `out`, returning the written file.
pub fn sample_checkpoint(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    label: Option<usize>,
    out: &Path,
    overwrite: bool,
) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let gen = ck.net("generator")?;
    let meta = SamplerMeta::load_from(&ck)?;
    let side = ck.integer("sample.image_side").ok().map(|v| v as usize);
    let samples = draw_samples(gen, &meta, n, seed, label)?;
    std::fs::create_dir_all(out)?;
    let (path, hint) = sample_file(out, side);
    if path.exists() && !overwrite {
        return Err(Error::Config(format!("{} exists; pass --overwrite to replace it", path.display())));
    }
    write_samples(&samples, hint, &path)?;
    Ok(path)
}
