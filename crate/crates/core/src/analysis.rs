//! Quadrature-level oracles for the optimality theory and empirical sample
//! quality metrics.
//!
//! Every theory quantity is evaluated on a [`DiscreteDensity`]: cell masses
//! on a shared grid. The integrands used here are all jointly
//! 1-homogeneous in `(p, q)`, so summing them over cell masses is the
//! quadrature of the continuous integral with the grid's weights.

use serde::Serialize;

use crate::datagen::GridDomain;
use crate::error::{Error, Result};
use crate::numcore::Tensor2D;

const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDensity {
    grid: GridDomain,
    mass: Vec<f64>,
}

impl DiscreteDensity {
    pub fn new(grid: GridDomain, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return Err(Error::dim("discrete density cells", grid.len(), mass.len()));
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::NumericDomain("cell masses must be finite and non-negative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::NumericDomain(format!("cell masses sum to {total}, not 1")));
        }
        Ok(DiscreteDensity { grid, mass })
    }

    /// Normalizes arbitrary non-negative weights.
    pub fn from_weights(grid: GridDomain, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::NumericDomain("weights have no mass".into()));
        }
        DiscreteDensity::new(grid, weights.into_iter().map(|w| w / total).collect())
    }

    /// Cell masses `f(x_k) w_k`, renormalized.
    pub fn from_density(grid: GridDomain, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let weights = (0..grid.len())
            .map(|k| f(&grid.point(k)) * grid.weight(k))
            .collect();
        DiscreteDensity::from_weights(grid, weights)
    }

    pub fn grid(&self) -> &GridDomain {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }
}

fn check_pair(p: &DiscreteDensity, q: &DiscreteDensity) -> Result<()> {
    if p.grid != q.grid {
        return Err(Error::Config("densities live on different grids".into()));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

fn check_x(x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!("f is defined for x >= 0, got {x}")))
    }
}

/// `D*_i = p_i / (p_i + p_g)` per cell, `0/0 := 0`.
pub fn optimal_discriminator(p_i: &DiscreteDensity, p_g: &DiscreteDensity) -> Result<Vec<f64>> {
    check_pair(p_i, p_g)?;
    Ok(p_i
        .mass
        .iter()
        .zip(&p_g.mass)
        .map(|(&a, &g)| if a + g > 0.0 { a / (a + g) } else { 0.0 })
        .collect())
}

/// Right-hand side of the forgiving-discriminator identity:
/// `p_max / (p_max + alpha p_g)` per cell.
pub fn optimal_max_discriminator(
    p_max: &DiscreteDensity,
    p_g: &DiscreteDensity,
    alpha: f64,
) -> Result<Vec<f64>> {
    check_pair(p_max, p_g)?;
    Ok(p_max
        .mass
        .iter()
        .zip(&p_g.mass)
        .map(|(&m, &g)| {
            let den = m + alpha * g;
            if den > 0.0 {
                m / den
            } else {
                0.0
            }
        })
        .collect())
}

/// `p_max` and `alpha = 1/Z` from client cell masses.
pub fn discrete_p_max(clients: &[DiscreteDensity]) -> Result<(DiscreteDensity, f64)> {
    let first = clients
        .first()
        .ok_or_else(|| Error::Config("no client densities".into()))?;
    for c in clients {
        check_pair(first, c)?;
    }
    let max: Vec<f64> = (0..first.mass.len())
        .map(|k| clients.iter().map(|c| c.mass[k]).fold(0.0, f64::max))
        .collect();
    let z: f64 = max.iter().sum();
    let p = DiscreteDensity::new(first.grid.clone(), max.iter().map(|m| m / z).collect())?;
    // Z >= 1 exactly; rounding alone can push the sum a few ulps below it
    Ok((p, 1.0 / z.max(1.0)))
}

/// Generator of the least-squares divergence:
/// `(x + 1) a^2 x^2 / (1 + a x)^2 - 2 a^2 / (1 + a)^2`.
pub fn f_lsgan(x: f64, alpha: f64) -> Result<f64> {
    check_x(x)?;
    check_alpha(alpha)?;
    Ok(f_lsgan_raw(x, alpha))
}

fn f_lsgan_raw(x: f64, a: f64) -> f64 {
    let den = 1.0 + a * x;
    (x + 1.0) * a * a * x * x / (den * den) + lsgan_constant(a)
}

/// `C = -2 a^2 / (1 + a)^2`
pub fn lsgan_constant(alpha: f64) -> f64 {
    -2.0 * alpha * alpha / ((1.0 + alpha) * (1.0 + alpha))
}

/// `2 a^2 (1 + (3 - 2a) x) / (1 + a x)^4`
pub fn f_lsgan_second_derivative(x: f64, alpha: f64) -> Result<f64> {
    check_x(x)?;
    check_alpha(alpha)?;
    let a = alpha;
    Ok(2.0 * a * a * (1.0 + (3.0 - 2.0 * a) * x) / (1.0 + a * x).powi(4))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub value: f64,
    pub constant_c: f64,
    pub alpha: f64,
    /// Per-cell contribution `q f(p/q)`.
    pub integrand: Vec<f64>,
    /// Cells with `q = 0 < p`, evaluated through the `q -> 0` limit.
    pub limit_cells: Vec<usize>,
}

fn f_divergence(
    p: &DiscreteDensity,
    q: &DiscreteDensity,
    alpha: f64,
    constant_c: f64,
    f: impl Fn(f64) -> f64,
    limit: impl Fn(f64) -> f64,
) -> Result<DivergenceReport> {
    check_pair(p, q)?;
    check_alpha(alpha)?;
    let mut limit_cells = Vec::new();
    let integrand: Vec<f64> = p
        .mass
        .iter()
        .zip(&q.mass)
        .enumerate()
        .map(|(k, (&pk, &qk))| {
            if qk > 0.0 {
                qk * f(pk / qk)
            } else if pk > 0.0 {
                limit_cells.push(k);
                limit(pk)
            } else {
                0.0
            }
        })
        .collect();
    Ok(DivergenceReport {
        value: integrand.iter().sum(),
        constant_c,
        alpha,
        integrand,
        limit_cells,
    })
}

/// `D_f(p || q) = sum q f(p / q)` for the least-squares generator.
/// Where `q = 0 < p` the cell contributes `lim_{q->0} q f(p/q) = p`.
pub fn f_divergence_lsgan(
    p: &DiscreteDensity,
    q: &DiscreteDensity,
    alpha: f64,
) -> Result<DivergenceReport> {
    f_divergence(p, q, alpha, lsgan_constant(alpha), |x| f_lsgan_raw(x, alpha), |pk| pk)
}

/// `1/2 integral (p_max + p_g) a^2 p_g^2 / (p_max + a p_g)^2`
pub fn lsgan_generator_objective(
    p_max: &DiscreteDensity,
    p_g: &DiscreteDensity,
    alpha: f64,
) -> Result<f64> {
    check_pair(p_max, p_g)?;
    check_alpha(alpha)?;
    let a = alpha;
    Ok(0.5
        * p_max
            .mass
            .iter()
            .zip(&p_g.mass)
            .map(|(&m, &g)| {
                let den = m + a * g;
                if den > 0.0 {
                    (m + g) * a * a * g * g / (den * den)
                } else {
                    0.0
                }
            })
            .sum::<f64>())
}

/// Generator of the cross-entropy divergence:
/// `-(1 + x) ln(1 + a x) + x ln x + 2 ln(1 + a)`, with `0 ln 0 = 0`.
pub fn f_bce(x: f64, alpha: f64) -> Result<f64> {
    check_x(x)?;
    check_alpha(alpha)?;
    Ok(f_bce_raw(x, alpha))
}

fn f_bce_raw(x: f64, a: f64) -> f64 {
    -(1.0 + x) * (a * x).ln_1p() + xlogx(x) + 2.0 * a.ln_1p()
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// `C = 2 ln(1 + a) - ln a`
pub fn bce_constant(alpha: f64) -> f64 {
    2.0 * alpha.ln_1p() - alpha.ln()
}

/// `(1 + a^2 x) / (x (1 + a x)^2)`, defined for `x > 0`.
pub fn f_bce_second_derivative(x: f64, alpha: f64) -> Result<f64> {
    check_x(x)?;
    check_alpha(alpha)?;
    if x == 0.0 {
        return Ok(f64::INFINITY);
    }
    let a = alpha;
    Ok((1.0 + a * a * x) / (x * (1.0 + a * x) * (1.0 + a * x)))
}

/// `D_f(p || q)` for the cross-entropy generator. Where `q = 0 < p` the
/// cell contributes `lim_{q->0} q f(p/q) = -p ln a`.
pub fn f_divergence_bce(p: &DiscreteDensity, q: &DiscreteDensity, alpha: f64) -> Result<DivergenceReport> {
    f_divergence(p, q, alpha, bce_constant(alpha), |x| f_bce_raw(x, alpha), |pk| -pk * alpha.ln())
}

/// `integral p_max ln(p_max / (p_max + a p_g)) + p_g ln(a p_g / (p_max + a p_g))`
pub fn bce_generator_objective(
    p_max: &DiscreteDensity,
    p_g: &DiscreteDensity,
    alpha: f64,
) -> Result<f64> {
    check_pair(p_max, p_g)?;
    check_alpha(alpha)?;
    let a = alpha;
    Ok(p_max
        .mass
        .iter()
        .zip(&p_g.mass)
        .map(|(&m, &g)| {
            let den = m + a * g;
            let mut v = 0.0;
            if m > 0.0 {
                v += m * (m / den).ln();
            }
            if g > 0.0 {
                v += g * (a * g / den).ln();
            }
            v
        })
        .sum())
}

/// A target mode: samples within `radius` (Euclidean) of `center` count
/// toward it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mode {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeStat {
    pub center: Vec<f64>,
    pub radius: f64,
    pub mass_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeCoverageReport {
    pub modes: Vec<ModeStat>,
    pub covered_count: usize,
}

/// Fraction of samples near each mode; a mode is covered when its fraction
/// reaches `threshold`.
pub fn mode_coverage(samples: &Tensor2D, modes: &[Mode], threshold: f64) -> Result<ModeCoverageReport> {
    if samples.rows() == 0 {
        return Err(Error::Usage("mode coverage of an empty sample set".into()));
    }
    let n = samples.rows() as f64;
    let mut stats = Vec::with_capacity(modes.len());
    for m in modes {
        if !(m.radius > 0.0) {
            return Err(Error::Config(format!("mode radius must be positive, got {}", m.radius)));
        }
        if m.center.len() != samples.cols() {
            return Err(Error::dim("mode center", samples.cols(), m.center.len()));
        }
        let r2 = m.radius * m.radius;
        let hits = samples
            .iter_rows()
            .filter(|x| x.iter().zip(&m.center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() <= r2)
            .count();
        stats.push(ModeStat {
            center: m.center.clone(),
            radius: m.radius,
            mass_fraction: hits as f64 / n,
        });
    }
    let covered_count = stats.iter().filter(|s| s.mass_fraction >= threshold).count();
    Ok(ModeCoverageReport {
        modes: stats,
        covered_count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalDivergence {
    pub value: f64,
    /// Samples that fell outside the grid and were counted in boundary cells.
    pub outside: usize,
}

pub const MIN_EMPIRICAL_SAMPLES: usize = 1000;
const SMOOTHING: f64 = 1e-9;

/// `KL(hist(samples) || reference)` on the reference grid, each sample
/// binned to its nearest node, with `1e-9` additive smoothing per cell.
pub fn empirical_divergence(samples: &Tensor2D, reference: &DiscreteDensity) -> Result<EmpiricalDivergence> {
    if samples.rows() < MIN_EMPIRICAL_SAMPLES {
        return Err(Error::Usage(format!(
            "empirical divergence needs at least {MIN_EMPIRICAL_SAMPLES} samples, got {}",
            samples.rows()
        )));
    }
    let grid = reference.grid();
    if samples.cols() != grid.dim() {
        return Err(Error::dim("sample dimension", grid.dim(), samples.cols()));
    }
    let mut counts = vec![0usize; grid.len()];
    let mut outside = 0;
    for x in samples.iter_rows() {
        let (idx, clamped) = grid.nearest(x);
        counts[idx] += 1;
        outside += usize::from(clamped);
    }
    let n = samples.rows() as f64;
    let k = grid.len() as f64;
    let norm = 1.0 + k * SMOOTHING;
    let value = counts
        .iter()
        .zip(reference.mass())
        .map(|(&c, &r)| {
            let h = (c as f64 / n + SMOOTHING) / norm;
            let q = (r + SMOOTHING) / norm;
            h * (h / q).ln()
        })
        .sum::<f64>()
        .max(0.0);
    Ok(EmpiricalDivergence { value, outside })
}
