//! Built-in self-tests behind `stein check`.

use rand::Rng as _;

use crate::adcore::{grad_wrt_params, Activation, Mlp, MlpSpec, Tape, Tensor};
use crate::energy::{grad_theta_phi, phi, sample_analytic, AnalyticTarget, AutoencoderEnergy, AutoencoderSpec, EnergyModel, EnergyTarget, JointEnergy};
use crate::error::Result;
use crate::kernels::{FeatureKernel, Kernel, RbfKernel};
use crate::rng::{substream, Rng, Stream};
use crate::steingan::{pacing_mode, PacingMode};
use crate::svgd::{check_target_gradient, relative_error, stein_operator_stats, svgd_direction, MlpField, ParticleSet, TargetDensity};

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn gradient_result(name: &'static str, worst: f64) -> CheckResult {
    CheckResult { name, passed: worst <= GRAD_TOL, detail: format!("worst rel err {worst:.2e}") }
}

fn random_point(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let (mut a, mut b) = (x.to_vec(), x.to_vec());
        a[k] += FD_STEP;
        b[k] -= FD_STEP;
        out.push((f(&a)? - f(&b)?) / (2.0 * FD_STEP));
    }
    Ok(out)
}

fn small_spec() -> AutoencoderSpec {
    AutoencoderSpec { dim: 3, code_dim: 2, encoder_hidden: vec![4], decoder_hidden: vec![4], code_activation: Activation::Tanh }
}

fn small_autoencoder(rng: &mut Rng) -> Result<AutoencoderEnergy> {
    AutoencoderEnergy::init(&small_spec(), 0.5, rng)
}

fn mlp_params(cases: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let net = Mlp::init_gaussian(&MlpSpec::new(3, &[5], 2), 0.7, rng)?;
        let x = Tensor::matrix(2, 3, random_point(rng, 6))?;
        let loss = |tape: &mut Tape, y| {
            let sq = tape.square(y);
            Ok(tape.sum(sq))
        };
        let (_, g) = grad_wrt_params(&net, &x, loss)?;
        let fd = central_diff(&net.params_flat(), |p| {
            let mut n = net.clone();
            n.set_params_flat(p)?;
            Ok(n.forward(&x)?.data().iter().map(|v| v * v).sum())
        })?;
        worst = worst.max(relative_error(&g, &fd));
    }
    Ok(worst)
}

fn energy_input(cases: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let model = small_autoencoder(rng)?;
        let x = Tensor::matrix(1, 3, random_point(rng, 3))?;
        worst = worst.max(check_target_gradient(&EnergyTarget::new(&model), &x, FD_STEP)?);
    }
    Ok(worst)
}

fn theta_error<M: EnergyModel + Clone>(model: &M, x: &[f64], y: Option<usize>) -> Result<f64> {
    let g = grad_theta_phi(model, x, y)?;
    let fd = central_diff(&model.params_flat(), |p| {
        let mut m = model.clone();
        m.set_params_flat(p)?;
        phi(&m, x, y)
    })?;
    Ok(relative_error(&g, &fd))
}

fn energy_params(cases: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let x = random_point(rng, 3);
        let err = if c % 2 == 0 {
            theta_error(&small_autoencoder(rng)?, &x, None)?
        } else {
            // A zero margin keeps the cross-entropy branch active.
            let model = JointEnergy::init(&small_spec(), 3, 0.0, 0.5, rng)?;
            theta_error(&model, &x, Some(c % 3))?
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn feature_kernel(cases: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let enc = Mlp::init_gaussian(&MlpSpec::new(3, &[4], 2), 0.7, rng)?;
        let k = FeatureKernel::new(rng.random_range(0.5..2.0), &enc)?;
        let (x, x2) = (random_point(rng, 3), random_point(rng, 3));
        let fd = central_diff(&x, |a| k.eval(a, &x2))?;
        worst = worst.max(relative_error(&k.grad_x(&x, &x2)?, &fd));
    }
    Ok(worst)
}

/// Fraction of trials whose Stein-operator mean lies within the 4σ/√N bound.
pub fn stein_identity_pass_rate(target: &AnalyticTarget, trials: usize, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = substream(seed, Stream::Eval);
    let d = TargetDensity::dim(target);
    let mut passed = 0;
    for t in 0..trials {
        let field = MlpField::new(Mlp::init_gaussian(&MlpSpec::new(d, &[8], d), 0.5, &mut rng)?)?;
        let xs = sample_analytic(target, samples, seed.wrapping_mul(1000).wrapping_add(t as u64))?;
        let stats = stein_operator_stats(target, &field, &xs)?;
        if stats.mean.abs() <= stats.clt_bound() {
            passed += 1;
        }
    }
    Ok(passed as f64 / trials as f64)
}

fn single_particle(cases: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let target = AnalyticTarget::gaussian(random_point(rng, 2), vec![rng.random_range(0.5..2.0); 2])?;
        let x = random_point(rng, 2);
        let dir = svgd_direction(&ParticleSet::from_rows(&[x.clone()])?, &target, &RbfKernel::new(1.0)?)?;
        let g = target.grad_log_density(&x);
        worst = worst.max(dir.data().iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(worst)
}

fn pacing_table(cases: usize, rng: &mut Rng) -> usize {
    (0..cases)
        .filter(|_| {
            let (real, fake): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let expect = if (real - fake).abs() > 0.5 {
                PacingMode::Frozen
            } else if real > fake {
                PacingMode::Fast
            } else {
                PacingMode::Normal
            };
            pacing_mode(real, fake, 0.5) != expect
        })
        .count()
}

/// Runs every self-test with randomness drawn from `seed`.
pub fn run_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = substream(seed, Stream::Eval);
    let gmm = AnalyticTarget::gmm(vec![0.3, 0.7], vec![vec![-2.0], vec![2.0]], vec![vec![1.0], vec![0.5]])?;
    let mut out = vec![
        gradient_result("mlp parameter gradients", mlp_params(20, &mut rng)?),
        gradient_result("energy input gradients", energy_input(20, &mut rng)?),
        gradient_result("energy parameter gradients", energy_params(20, &mut rng)?),
        gradient_result("feature kernel gradients", feature_kernel(20, &mut rng)?),
    ];
    for (name, target) in [("stein identity, gaussian", AnalyticTarget::standard_normal(1)), ("stein identity, mixture", gmm)] {
        let rate = stein_identity_pass_rate(&target, 20, 10_000, seed)?;
        out.push(CheckResult { name, passed: rate >= 0.9, detail: format!("{:.0}% of trials within bound", rate * 100.0) });
    }
    let err = single_particle(20, &mut rng)?;
    out.push(CheckResult { name: "single particle is gradient ascent", passed: err <= 1e-12, detail: format!("max abs err {err:.1e}") });
    let bad = pacing_table(10_000, &mut rng);
    out.push(CheckResult { name: "pacing rule table", passed: bad == 0, detail: format!("{bad} mismatches") });
    Ok(out)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{verdict}  {:width$}  {}\n", r.name, r.detail));
    }
    s
}
