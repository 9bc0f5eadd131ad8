//! Self-check suite: every gradient the trainer relies on against central
//! finite differences, and the divergence identities against direct
//! quadrature. Deterministic for a fixed seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::aggregation::{
    dagg_ddi, dagg_dlambda, f2a_aggregate, f2u_select, generator_gradient, lambda_gradient_with,
    AggregationStrategy, JudgmentBatch, LambdaParam,
};
use crate::analysis::{
    bce_constant, bce_generator_objective, discrete_p_max, f_bce, f_bce_second_derivative,
    f_divergence_bce, f_divergence_lsgan, f_lsgan, f_lsgan_second_derivative, lsgan_constant,
    lsgan_generator_objective, optimal_discriminator, optimal_max_discriminator, DiscreteDensity,
};
use crate::datagen::{compute_z, p_max_density, ClientDistribution, ComponentDensity, GridDomain};
use crate::error::Result;
use crate::numcore::{central_difference, rel_error, second_difference, Activation, LossSpec, Mlp, Tensor2D};
use crate::protocol::backprop_generator;

pub const DEFAULT_SEED: u64 = 0x5eed_f2a;

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Default,
    /// Every tolerance halved. Quadrature-bound checks may fail here.
    Strict,
}

impl Profile {
    fn scale(self) -> f64 {
        match self {
            Profile::Default => 1.0,
            Profile::Strict => 0.5,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "default" => Ok(Profile::Default),
            "strict" => Ok(Profile::Strict),
            other => Err(format!("unknown profile '{other}' (expected default or strict)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst error seen over all instances, on the check's own scale.
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub instances: usize,
    /// Error is dominated by quadrature, not by the formula under test.
    pub quadrature_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub profile: Profile,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn find(&self, name_prefix: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name.starts_with(name_prefix))
    }
}

/// Replaceable pieces of the code under test, so a harness can confirm the
/// suite notices a broken implementation.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub dagg_dlambda: fn(&JudgmentBatch, f64) -> Vec<f64>,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks { dagg_dlambda }
    }
}

pub fn run(profile: Profile) -> Result<Report> {
    run_with(profile, DEFAULT_SEED, Hooks::default())
}

pub fn run_with(profile: Profile, seed: u64, hooks: Hooks) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Suite {
        scale: profile.scale(),
        checks: Vec::new(),
    };
    check_dagg_dlambda(&mut out, &mut rng, &hooks)?;
    check_dagg_ddi(&mut out, &mut rng)?;
    check_lambda_gradient(&mut out, &mut rng, &hooks)?;
    check_generator_gradient(&mut out, &mut rng)?;
    check_limits(&mut out, &mut rng)?;
    check_forgiving_identity(&mut out, &mut rng)?;
    check_objective_identities(&mut out, &mut rng)?;
    check_global_optimum(&mut out, &mut rng)?;
    check_f_properties(&mut out)?;
    check_quadrature(&mut out)?;
    Ok(Report {
        profile,
        seed,
        checks: out.checks,
    })
}

struct Suite {
    scale: f64,
    checks: Vec<CheckResult>,
}

impl Suite {
    fn push(&mut self, name: &str, measured: f64, tolerance: f64, instances: usize, quadrature_bound: bool) {
        let tolerance = tolerance * self.scale;
        self.checks.push(CheckResult {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            instances,
            quadrature_bound,
        });
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, b: usize, range: f64) -> JudgmentBatch {
    let data = (0..n * b).map(|_| rng.random_range(-range..range)).collect();
    JudgmentBatch::from_values(Tensor2D::from_vec(n, b, data).expect("shape")).expect("finite")
}

fn with_values(values: Vec<f64>, n: usize, b: usize) -> JudgmentBatch {
    JudgmentBatch::from_values(Tensor2D::from_vec(n, b, values).expect("shape")).expect("finite")
}

fn worst(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

fn check_dagg_dlambda(out: &mut Suite, rng: &mut ChaCha8Rng, hooks: &Hooks) -> Result<()> {
    let mut err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let b = rng.random_range(1..=4);
        let j = random_batch(rng, n, b, 2.0);
        let lambda = rng.random_range(0.05..3.0);
        let analytic = (hooks.dagg_dlambda)(&j, lambda);
        let up = f2a_aggregate(&j, lambda + FD_STEP);
        let down = f2a_aggregate(&j, lambda - FD_STEP);
        for s in 0..b {
            let fd = (up[s] - down[s]) / (2.0 * FD_STEP);
            err = err.max(rel_error(analytic[s], fd, FD_FLOOR));
        }
    }
    out.push("f2a aggregate: d/d(lambda) vs central differences", err, 1e-5, 1000, false);
    Ok(())
}

fn check_dagg_ddi(out: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let b = rng.random_range(1..=4);
        let j = random_batch(rng, n, b, 2.0);
        let lambda = rng.random_range(0.0..3.0);
        let base = j.values().data().to_vec();
        for i in 0..n {
            let analytic = dagg_ddi(&j, lambda, i)?;
            for s in 0..b {
                let fd = central_difference(
                    |v| {
                        let mut probe = base.clone();
                        probe[i * b + s] = v[0];
                        f2a_aggregate(&with_values(probe, n, b), lambda)[s]
                    },
                    &[base[i * b + s]],
                    FD_STEP,
                )[0];
                err = err.max(rel_error(analytic[s], fd, FD_FLOOR));
            }
        }
    }
    out.push("f2a aggregate: Jacobian wrt each judgment vs central differences", err, 1e-5, 1000, false);
    Ok(())
}

/// Loss on the generator side with target label 1, written out directly.
fn g_loss(bce: bool, d: f64) -> f64 {
    if bce {
        -d.ln()
    } else {
        0.5 * (d - 1.0) * (d - 1.0)
    }
}

fn g_loss_derivative(bce: bool, d: f64) -> f64 {
    if bce {
        -1.0 / d
    } else {
        d - 1.0
    }
}

fn check_lambda_gradient(out: &mut Suite, rng: &mut ChaCha8Rng, hooks: &Hooks) -> Result<()> {
    let mut err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let b = rng.random_range(1..=8);
        let bce = rng.random_bool(0.5);
        let j = if bce {
            let data = (0..n * b).map(|_| rng.random_range(0.02..0.98)).collect();
            with_values(data, n, b)
        } else {
            random_batch(rng, n, b, 2.0)
        };
        let param = LambdaParam::new(rng.random_range(0.05..3.0), rng.random_range(0.0..0.5))?;
        let agg = f2a_aggregate(&j, param.lambda());
        let dl: Vec<f64> = agg.iter().map(|&a| g_loss_derivative(bce, a)).collect();
        let analytic = lambda_gradient_with(&dl, &j, &param, hooks.dagg_dlambda)?.wrt_lambda_star;
        let objective = |ls: &[f64]| {
            let lambda = ls[0].max(0.0);
            let a = f2a_aggregate(&j, lambda);
            a.iter().map(|&v| g_loss(bce, v)).sum::<f64>() / b as f64 + param.beta * lambda * lambda
        };
        let fd = central_difference(objective, &[param.lambda_star], FD_STEP)[0];
        err = err.max(rel_error(analytic, fd, FD_FLOOR));
    }
    out.push("lambda gradient of the regularized objective vs central differences", err, 1e-5, 1000, false);
    Ok(())
}

/// Generator objective for the toy check, evaluated from raw judgments
/// without the aggregation module.
fn toy_objective(strategy: &AggregationStrategy, bce: bool, values: &[Vec<f64>], scheduled: usize) -> f64 {
    let b = values[0].len() as f64;
    let mean_loss = |col: &dyn Fn(usize) -> f64| (0..values[0].len()).map(|s| g_loss(bce, col(s))).sum::<f64>() / b;
    let softmax_mix = |xs: &[f64], lambda: f64| {
        let e: Vec<f64> = xs.iter().map(|x| (lambda * x).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().zip(xs).map(|(e, x)| e * x).sum::<f64>() / z
    };
    let column = |s: usize| values.iter().map(|v| v[s]).collect::<Vec<_>>();
    match *strategy {
        AggregationStrategy::F2u => mean_loss(&|s| column(s).into_iter().fold(f64::NEG_INFINITY, f64::max)),
        AggregationStrategy::MdGan => mean_loss(&|s| values[scheduled][s]),
        AggregationStrategy::FixedLambda(l) => mean_loss(&|s| softmax_mix(&column(s), l)),
        AggregationStrategy::F2a(p) => {
            let l = p.lambda_star.max(0.0);
            mean_loss(&|s| softmax_mix(&column(s), l)) + p.beta * l * l
        }
        AggregationStrategy::GmanStar(p) => {
            let l = p.lambda_star.max(0.0);
            let losses: Vec<f64> = values
                .iter()
                .map(|v| v.iter().map(|&d| g_loss(bce, d)).sum::<f64>() / b)
                .collect();
            softmax_mix(&losses, l) + p.beta * l * l
        }
        AggregationStrategy::Gman0 => {
            values
                .iter()
                .map(|v| v.iter().map(|&d| g_loss(bce, d)).sum::<f64>() / b)
                .sum::<f64>()
                / values.len() as f64
        }
    }
}

fn random_discriminator(rng: &mut ChaCha8Rng, bce: bool) -> Result<Mlp> {
    let head = if bce { Activation::Sigmoid } else { Activation::Linear };
    let mut d = Mlp::random(1, &[(4, Activation::Tanh), (1, head)], rng)?;
    let flat: Vec<f64> = d.flat_params().iter().map(|_| rng.random_range(-1.5..1.5)).collect();
    d.set_flat_params(&flat)?;
    Ok(d)
}

fn judge_all(discs: &[Mlp], x: &Tensor2D) -> Result<(Vec<Vec<f64>>, Vec<Tensor2D>)> {
    let mut values = Vec::with_capacity(discs.len());
    let mut grads = Vec::with_capacity(discs.len());
    for d in discs {
        let (out, cache) = d.forward(x)?;
        let unit = Tensor2D::from_vec(out.rows(), 1, vec![1.0; out.rows()])?;
        grads.push(d.backward_input(&cache, &unit)?);
        values.push(out.into_vec());
    }
    Ok((values, grads))
}

fn check_generator_gradient(out: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut err = 0.0f64;
    let mut instances = 0;
    while instances < 1000 {
        let n = rng.random_range(1..=4);
        let b = rng.random_range(2..=6);
        let bce = rng.random_bool(0.5);
        let loss = if bce { LossSpec::bce() } else { LossSpec::lsgan() };
        let param = LambdaParam::new(rng.random_range(0.05..3.0), 0.1)?;
        let strategy = match instances % 6 {
            0 => AggregationStrategy::F2u,
            1 => AggregationStrategy::F2a(param),
            2 => AggregationStrategy::FixedLambda(rng.random_range(0.0..4.0)),
            3 => AggregationStrategy::MdGan,
            4 => AggregationStrategy::GmanStar(param),
            _ => AggregationStrategy::Gman0,
        };
        let mut gen = Mlp::random(1, &[(1, Activation::Tanh), (1, Activation::Linear)], rng)?;
        let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        gen.set_flat_params(&theta)?;
        let discs = (0..n).map(|_| random_discriminator(rng, bce)).collect::<Result<Vec<_>>>()?;
        let z = Tensor2D::from_vec(b, 1, (0..b).map(|_| rng.sample(StandardNormal)).collect())?;
        let scheduled = rng.random_range(0..n);

        let (x, cache) = gen.forward(&z)?;
        let (values, grads) = judge_all(&discs, &x)?;
        if matches!(strategy, AggregationStrategy::F2u) && n > 1 {
            // keep clear of the argmax switching inside the difference stencil
            let j = with_values(values.concat(), n, b);
            let (top, _) = f2u_select(&j);
            let close = (0..b).any(|s| values.iter().filter(|v| top[s] - v[s] < 1e-3).count() > 1);
            if close {
                continue;
            }
        }
        let batch = if matches!(strategy, AggregationStrategy::MdGan) {
            JudgmentBatch::new(Tensor2D::from_vec(1, b, values[scheduled].clone())?, vec![grads[scheduled].clone()])?
        } else {
            JudgmentBatch::new(Tensor2D::from_vec(n, b, values.concat())?, grads)?
        };
        let g = generator_gradient(&strategy, &loss, &batch)?;
        let analytic = backprop_generator(&gen, &cache, &g.sample_grads)?.flatten();

        let eval = |theta: &[f64], strategy: &AggregationStrategy| -> f64 {
            let mut probe = gen.clone();
            probe.set_flat_params(theta).expect("same size");
            let x = probe.predict(&z).expect("shape");
            let (values, _) = judge_all(&discs, &x).expect("shape");
            toy_objective(strategy, bce, &values, scheduled)
        };
        let fd = central_difference(|t| eval(t, &strategy), &theta, FD_STEP);
        for (a, f) in analytic.iter().zip(&fd) {
            err = err.max(rel_error(*a, *f, FD_FLOOR));
        }
        if let (Some(lg), Some(p)) = (g.lambda_grad, strategy_param(&strategy)) {
            let fd = central_difference(
                |ls| {
                    let mut s = strategy;
                    s.lambda_param_mut().expect("trainable").lambda_star = ls[0];
                    eval(&theta, &s)
                },
                &[p.lambda_star],
                FD_STEP,
            )[0];
            err = err.max(rel_error(lg.wrt_lambda_star, fd, FD_FLOOR));
        }
        instances += 1;
    }
    out.push(
        "generator parameter and lambda gradients through the networks vs central differences",
        err,
        1e-4,
        instances,
        false,
    );
    Ok(())
}

fn strategy_param(s: &AggregationStrategy) -> Option<LambdaParam> {
    match *s {
        AggregationStrategy::F2a(p) | AggregationStrategy::GmanStar(p) => Some(p),
        _ => None,
    }
}

fn check_limits(out: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut mean_err = 0.0f64;
    let mut max_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let b = rng.random_range(1..=8);
        let j = random_batch(rng, n, b, 3.0);
        let agg = f2a_aggregate(&j, 0.0);
        for (s, a) in agg.iter().enumerate() {
            let col = j.column(s);
            let mean = col.iter().sum::<f64>() / n as f64;
            mean_err = mean_err.max((a - mean).abs());
        }

        // enforce a top-two gap of at least 0.1 in every column
        let mut data = j.values().data().to_vec();
        for s in 0..b {
            let best = (0..n).max_by(|&a, &c| data[a * b + s].total_cmp(&data[c * b + s])).unwrap_or(0);
            for i in 0..n {
                if i != best {
                    data[i * b + s] = data[i * b + s].min(data[best * b + s] - 0.1);
                }
            }
        }
        let j = with_values(data, n, b);
        let (top, _) = f2u_select(&j);
        let sharp = f2a_aggregate(&j, 1e3);
        max_err = max_err.max(worst(top.iter().zip(&sharp).map(|(t, a)| (t - a).abs())));
    }
    out.push("f2a at lambda = 0 equals the arithmetic mean", mean_err, 0.0, 1000, false);
    out.push("f2a at lambda = 1e3 matches f2u (top-two gap >= 0.1)", max_err, 1e-6, 1000, false);
    Ok(())
}

/// Random densities over `bins` 1D cells; some cells of `p` are emptied so
/// the support-mismatch branches are exercised.
fn random_density(rng: &mut ChaCha8Rng, grid: &GridDomain, zero_fraction: f64) -> Result<DiscreteDensity> {
    let w = (0..grid.len())
        .map(|_| {
            if rng.random_bool(zero_fraction) {
                0.0
            } else {
                rng.random_range(0.0..1.0f64).powi(2) + 1e-6
            }
        })
        .collect();
    DiscreteDensity::from_weights(grid.clone(), w)
}

fn random_grid(rng: &mut ChaCha8Rng) -> Result<GridDomain> {
    GridDomain::new(vec![-1.0], vec![1.0], rng.random_range(64..=4096))
}

fn check_forgiving_identity(out: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut err = 0.0f64;
    for _ in 0..100 {
        let grid = random_grid(rng)?;
        let n = rng.random_range(1..=6);
        let clients = (0..n).map(|_| random_density(rng, &grid, 0.0)).collect::<Result<Vec<_>>>()?;
        let p_g = random_density(rng, &grid, 0.0)?;
        let (p_max, alpha) = discrete_p_max(&clients)?;
        let rhs = optimal_max_discriminator(&p_max, &p_g, alpha)?;
        let per_client = clients
            .iter()
            .map(|c| optimal_discriminator(c, &p_g))
            .collect::<Result<Vec<_>>>()?;
        for (k, r) in rhs.iter().enumerate() {
            let lhs = per_client.iter().map(|d| d[k]).fold(f64::NEG_INFINITY, f64::max);
            err = err.max((lhs - r).abs());
        }
    }
    out.push("max of client-optimal discriminators equals p_max / (p_max + alpha p_g)", err, 1e-12, 100, false);
    Ok(())
}

fn check_objective_identities(out: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut ls_err = 0.0f64;
    let mut bce_err = 0.0f64;
    let mut nonneg = 0.0f64;
    for _ in 0..100 {
        let grid = random_grid(rng)?;
        let n = rng.random_range(1..=5);
        let clients = (0..n).map(|_| random_density(rng, &grid, 0.2)).collect::<Result<Vec<_>>>()?;
        let (p_max, alpha) = discrete_p_max(&clients)?;
        let p_g = random_density(rng, &grid, 0.2)?;

        let direct = lsgan_generator_objective(&p_max, &p_g, alpha)?;
        let div = f_divergence_lsgan(&p_g, &p_max, alpha)?;
        ls_err = ls_err.max((direct - (0.5 * div.value - 0.5 * lsgan_constant(alpha))).abs());

        let direct = bce_generator_objective(&p_max, &p_g, alpha)?;
        let div_b = f_divergence_bce(&p_g, &p_max, alpha)?;
        bce_err = bce_err.max((direct - (div_b.value - bce_constant(alpha))).abs());

        nonneg = nonneg.max(-div.value).max(-div_b.value);
    }
    out.push("least-squares objective equals D_f / 2 - C / 2", ls_err, 1e-10, 100, false);
    out.push("cross-entropy objective equals D_f - C", bce_err, 1e-10, 100, false);
    out.push("f-divergences are non-negative", nonneg, 1e-9, 100, false);
    Ok(())
}

/// Along `p_t = (1 - t) p_max + t p_other` both objectives must be smallest
/// at `t = 0`. Reports the worst `objective(0) - min_t objective(t)`.
fn check_global_optimum(out: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut err = 0.0f64;
    for _ in 0..50 {
        let grid = GridDomain::new(vec![-1.0], vec![1.0], 256)?;
        let clients = (0..3).map(|_| random_density(rng, &grid, 0.3)).collect::<Result<Vec<_>>>()?;
        let (p_max, alpha) = discrete_p_max(&clients)?;
        let other = random_density(rng, &grid, 0.3)?;
        let at = |t: f64| -> Result<(f64, f64)> {
            let m: Vec<f64> = p_max
                .mass()
                .iter()
                .zip(other.mass())
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect();
            let p_t = DiscreteDensity::from_weights(grid.clone(), m)?;
            Ok((
                lsgan_generator_objective(&p_max, &p_t, alpha)?,
                bce_generator_objective(&p_max, &p_t, alpha)?,
            ))
        };
        let (ls0, bce0) = at(0.0)?;
        for k in 1..=100 {
            let (ls, bce) = at(k as f64 / 100.0)?;
            err = err.max(ls0 - ls).max(bce0 - bce);
        }
    }
    out.push("generator objectives are minimized at p_g = p_max", err, 1e-12, 50, false);
    Ok(())
}

fn check_f_properties(out: &mut Suite) -> Result<()> {
    let alphas = [0.1, 0.5, 1.0];
    let mut at_one = 0.0f64;
    for k in 1..=100 {
        let a = k as f64 / 100.0;
        at_one = at_one.max(f_lsgan(1.0, a)?.abs()).max(f_bce(1.0, a)?.abs());
    }
    out.push("f(1) = 0 for both generators", at_one, 1e-15, 200, false);

    let mut negative = 0.0f64;
    for &a in &alphas {
        for k in 0..=1000 {
            let x = k as f64 / 100.0;
            negative = negative
                .max(-f_lsgan_second_derivative(x, a)?)
                .max(-f_bce_second_derivative(x, a)?);
        }
    }
    out.push("f'' >= 0 on [0, 10] for both generators", negative, 0.0, 3 * 1001 * 2, false);

    let mut err = 0.0f64;
    for &a in &alphas {
        for k in 1..=100 {
            let x = k as f64 / 10.0;
            let fd = second_difference(|v| f_lsgan(v, a).expect("x > 0"), x, 1e-3);
            err = err.max(rel_error(f_lsgan_second_derivative(x, a)?, fd, 0.0));
            let fd = second_difference(|v| f_bce(v, a).expect("x > 0"), x, 1e-3);
            err = err.max(rel_error(f_bce_second_derivative(x, a)?, fd, 0.0));
        }
    }
    out.push("closed-form f'' vs second differences", err, 1e-4, 3 * 100 * 2, false);
    Ok(())
}

/// Composite Simpson on `[lo, hi]` with `intervals` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let h = (hi - lo) / intervals as f64;
    let mut s = f(lo) + f(hi);
    for k in 1..intervals {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + k as f64 * h);
    }
    s * h / 3.0
}

fn check_quadrature(out: &mut Suite) -> Result<()> {
    let one_d: Vec<ClientDistribution> = [-4.0, 0.0, 4.0]
        .iter()
        .map(|&m| ClientDistribution::single(ComponentDensity::gaussian1d(m, 0.5)?))
        .collect::<Result<_>>()?;
    let grid = GridDomain::new(vec![-10.0], vec![10.0], 4096)?;
    let z = compute_z(&one_d, &grid)?.z;
    let max_pdf = |x: f64| {
        one_d
            .iter()
            .map(|c| c.density(&[x]).expect("1d"))
            .fold(0.0, f64::max)
    };
    // the kinks of max_i p_i sit at +-2; integrate each smooth piece apart
    let oracle = simpson(&max_pdf, -12.0, -2.0, 20_000)
        + simpson(&max_pdf, -2.0, 2.0, 8_000)
        + simpson(&max_pdf, 2.0, 12.0, 20_000);
    let rel = (z - oracle).abs() / oracle;
    out.push("Z of the three-mode 1D scenario vs Simpson on the smooth pieces", rel, 1e-6, 1, true);

    let p_max_mass = grid.integrate(|x| p_max_density(&one_d, z, x).expect("1d"));
    out.push("p_max integrates to one", (p_max_mass - 1.0).abs(), 1e-9, 1, true);

    let two_d: Vec<ClientDistribution> = [[-3.0, 0.0], [3.0, 0.0], [0.0, 6.0]]
        .iter()
        .map(|&m| ClientDistribution::single(ComponentDensity::gaussian2d(m, [[0.25, 0.0], [0.0, 0.25]])?))
        .collect::<Result<_>>()?;
    let grid = GridDomain::new(vec![-8.0, -5.0], vec![8.0, 11.0], 512)?;
    let z = compute_z(&two_d, &grid)?.z;
    // separated by >= 12 sigma: tails overlap far below the tolerance
    let rel = (z - 3.0).abs() / 3.0;
    out.push("Z of a well-separated 2D scenario vs 3", rel, 1e-6, 1, true);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(j: &JudgmentBatch, lambda: f64) -> Vec<f64> {
        dagg_dlambda(j, lambda).into_iter().map(|v| -v).collect()
    }

    #[test]
    fn default_profile_passes() {
        let report = run(Profile::Default).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{} measured {:e} > {:e}", c.name, c.measured, c.tolerance);
        }
    }

    #[test]
    fn sign_flip_is_caught_by_lambda_gradient_check() {
        let report = run_with(
            Profile::Default,
            DEFAULT_SEED,
            Hooks {
                dagg_dlambda: flipped,
            },
        )
        .unwrap();
        assert!(!report.find("lambda gradient").unwrap().passed);
        assert!(report.find("generator parameter").unwrap().passed);
    }

    #[test]
    fn strict_halves_tolerances() {
        let d = run(Profile::Default).unwrap();
        let s = run(Profile::Strict).unwrap();
        for (a, b) in d.checks.iter().zip(&s.checks) {
            assert_eq!(a.name, b.name);
            assert_eq!(b.tolerance, a.tolerance * 0.5);
        }
    }

    #[test]
    fn profile_parses() {
        assert_eq!("strict".parse::<Profile>().unwrap(), Profile::Strict);
        assert!("lenient".parse::<Profile>().is_err());
    }
}
