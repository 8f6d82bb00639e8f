//! Oracle-based sampler checks run by `pfbdiff selftest`.

use pfbdiff_core::denoiser::Denoiser;
use pfbdiff_core::oracle::{gmm_marginal, GaussianComponent, GaussianMixture, MixtureDenoiser};
use pfbdiff_core::pipeline::reconstruct;
use pfbdiff_core::rng::Rng;
use pfbdiff_core::schedule::{ddim_encode_loop, ddim_sample_loop, NoiseSchedule, ScheduleConfig, TimestepPlan};
use pfbdiff_core::textcond::{encode_prompt, PromptEmbedding, TextConfig};
use pfbdiff_core::Tensor;

use crate::engine::{Engine, DEFAULT_WEIGHTS_SEED};
use crate::weights_file;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Per-dimension sample mean and (population) variance of DDIM samples
/// drawn with the exact noise predictor of `mixture`.
pub struct SampleMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn oracle_sample_moments(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    steps: usize,
    runs: usize,
    seed: u64,
) -> pfbdiff_core::Result<SampleMoments> {
    let d = mixture.dim();
    let model = MixtureDenoiser { schedule: schedule.clone(), mixture: mixture.clone() };
    let plan = TimestepPlan::uniform(schedule.train_steps(), steps)?;
    let cond = encode_prompt("oracle", &TextConfig::default())?;
    let mut sum = vec![0.0f64; d];
    let mut sum_sq = vec![0.0f64; d];
    for run in 0..runs {
        let x_t = Rng::stream(seed, run as u64).gaussian_tensor(&[d]);
        let x0 = ddim_sample_loop(&model, &x_t, &cond, &plan, schedule)?;
        for (i, &v) in x0.data().iter().enumerate() {
            sum[i] += f64::from(v);
            sum_sq[i] += f64::from(v) * f64::from(v);
        }
    }
    let n = runs as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let variance = sum_sq.iter().zip(&mean).map(|(s, m)| s / n - m * m).collect();
    Ok(SampleMoments { mean, variance })
}

/// Compares sampled moments against the closed-form data marginal.
pub fn check_mixture(
    name: &str,
    mixture: &GaussianMixture,
    runs: usize,
    mean_tol: f64,
    var_tol: f64,
) -> CheckResult {
    let schedule = ScheduleConfig::default().build().expect("default schedule");
    let outcome = oracle_sample_moments(mixture, &schedule, 50, runs, 0x0ac1e).and_then(|m| {
        let target = gmm_marginal(0, &schedule, mixture)?;
        let (tm, tv) = (target.mean(), target.variance());
        let mean_err = m.mean.iter().zip(&tm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let var_err = m.variance.iter().zip(&tv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((mean_err, var_err))
    });
    match outcome {
        Ok((mean_err, var_err)) => CheckResult {
            name: name.into(),
            passed: mean_err <= mean_tol && var_err <= var_tol,
            detail: format!(
                "{runs} runs, 50 steps: max |mean err| {mean_err:.4} (tol {mean_tol}), max |var err| {var_err:.4} (tol {var_tol})"
            ),
        },
        Err(e) => CheckResult { name: name.into(), passed: false, detail: e.to_string() },
    }
}

struct Constant(f32);

impl Denoiser for Constant {
    fn predict_eps(&self, x: &Tensor, _: usize, _: &PromptEmbedding) -> pfbdiff_core::Result<Tensor> {
        Ok(Tensor::full(x.shape(), self.0))
    }
}

fn check_round_trip(name: &str, eps: f32) -> CheckResult {
    let schedule = ScheduleConfig::default().build().expect("default schedule");
    let cond = encode_prompt("round trip", &TextConfig::default()).expect("prompt");
    let x0 = Rng::new(7).gaussian_tensor(&[3, 8, 8]);
    let result = reconstruct(&x0, &cond, 50, &Constant(eps), &schedule).and_then(|r| r.max_abs_diff(&x0));
    match result {
        Ok(err) => CheckResult {
            name: name.into(),
            passed: err <= 1e-5,
            detail: format!("decode(encode(x)) with eps = {eps}: L-inf error {err:.3e} (tol 1e-5)"),
        },
        Err(e) => CheckResult { name: name.into(), passed: false, detail: e.to_string() },
    }
}

fn check_encode_levels() -> CheckResult {
    let name = "zero-model-encode";
    let schedule = ScheduleConfig::default().build().expect("default schedule");
    let cond = encode_prompt("levels", &TextConfig::default()).expect("prompt");
    let x0 = Rng::new(8).gaussian_tensor(&[16]);
    let plan = TimestepPlan::encode(schedule.train_steps(), 50, 1.0).expect("plan");
    let worst = ddim_encode_loop(&Constant(0.0), &x0, &cond, &plan, &schedule).map(|levels| {
        levels
            .iter()
            .map(|(t, y)| {
                let r = schedule.alpha_bar(*t).expect("t in range").sqrt();
                y.data().iter().zip(x0.data()).map(|(a, b)| (f64::from(*a) - r * f64::from(*b)).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    });
    match worst {
        Ok(err) => CheckResult {
            name: name.into(),
            passed: err <= 1e-5,
            detail: format!("y_t = sqrt(alpha_bar_t) x0 at every level: max error {err:.3e} (tol 1e-5)"),
        },
        Err(e) => CheckResult { name: name.into(), passed: false, detail: e.to_string() },
    }
}

fn check_weights_file() -> CheckResult {
    let name = "weights-file-round-trip";
    let engine = Engine::seeded(DEFAULT_WEIGHTS_SEED);
    let w = engine.model.weights();
    let back = weights_file::encode(w.iter()).and_then(|b| weights_file::decode(&b));
    match back {
        Ok(back) => {
            let exact = back.len() == w.len()
                && w.iter().all(|(k, t)| {
                    back.get(k).is_some_and(|b| {
                        b.shape() == t.shape() && b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                    })
                });
            CheckResult { name: name.into(), passed: exact, detail: format!("{} tensors, bit-exact: {exact}", w.len()) }
        }
        Err(e) => CheckResult { name: name.into(), passed: false, detail: e.to_string() },
    }
}

/// The built-in two-component mixture used when none is supplied.
pub fn default_mixture() -> GaussianMixture {
    GaussianMixture::new(vec![
        GaussianComponent { weight: 0.3, mean: vec![-1.5, 0.5], variance: 0.25 },
        GaussianComponent { weight: 0.7, mean: vec![1.0, -0.5], variance: 0.5 },
    ])
    .expect("valid mixture")
}

/// Runs every check; `mixtures` are extra mixtures to verify.
pub fn run(runs: usize, mixtures: &[(String, GaussianMixture)]) -> Vec<CheckResult> {
    let mut out = vec![
        check_mixture("oracle-standard-normal", &GaussianMixture::standard_normal(8), runs, 0.05, 0.10),
        check_mixture("oracle-mixture", &default_mixture(), runs, 0.05, 0.10),
    ];
    for (name, m) in mixtures {
        out.push(check_mixture(name, m, runs, 0.05, 0.10));
    }
    out.push(check_round_trip("constant-model-round-trip", 0.37));
    out.push(check_round_trip("zero-model-round-trip", 0.0));
    out.push(check_encode_levels());
    out.push(check_weights_file());
    out
}
