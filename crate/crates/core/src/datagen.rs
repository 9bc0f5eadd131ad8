//! Analytic client distributions, class partitions and quadrature for the
//! normalizing constant of the pointwise-max target.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor2D;

/// A single class density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentDensity {
    Gaussian1d { mean: f64, std: f64 },
    Gaussian2d { mean: [f64; 2], cov: [[f64; 2]; 2] },
}

impl ComponentDensity {
    pub fn gaussian1d(mean: f64, std: f64) -> Result<Self> {
        let c = ComponentDensity::Gaussian1d { mean, std };
        c.validate()?;
        Ok(c)
    }

    pub fn gaussian2d(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let c = ComponentDensity::Gaussian2d { mean, cov };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ComponentDensity::Gaussian1d { mean, std } => {
                if !(*std > 0.0) || !mean.is_finite() || !std.is_finite() {
                    return Err(Error::Config(format!("gaussian std must be positive, got {std}")));
                }
            }
            ComponentDensity::Gaussian2d { mean, cov } => {
                if !mean.iter().all(|m| m.is_finite()) {
                    return Err(Error::Config("gaussian mean must be finite".into()));
                }
                let sym = (cov[0][1] - cov[1][0]).abs() <= 1e-12 * (1.0 + cov[0][1].abs());
                let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
                if !sym || !(cov[0][0] > 0.0) || !(det > 0.0) {
                    return Err(Error::Config(
                        "covariance must be symmetric positive definite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ComponentDensity::Gaussian1d { .. } => 1,
            ComponentDensity::Gaussian2d { .. } => 2,
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            ComponentDensity::Gaussian1d { mean, .. } => vec![*mean],
            ComponentDensity::Gaussian2d { mean, .. } => mean.to_vec(),
        }
    }

    /// Per-axis standard deviations.
    pub fn axis_std(&self) -> Vec<f64> {
        match self {
            ComponentDensity::Gaussian1d { std, .. } => vec![*std],
            ComponentDensity::Gaussian2d { cov, .. } => vec![cov[0][0].sqrt(), cov[1][1].sqrt()],
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            ComponentDensity::Gaussian1d { mean, std } => {
                let z = (x[0] - mean) / std;
                (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
            }
            ComponentDensity::Gaussian2d { mean, cov } => {
                let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
                let dx = x[0] - mean[0];
                let dy = x[1] - mean[1];
                // inverse covariance applied to (dx, dy)
                let q = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
                (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
            }
        }
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            ComponentDensity::Gaussian1d { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                out[0] = mean + std * z;
            }
            ComponentDensity::Gaussian2d { mean, cov } => {
                let l00 = cov[0][0].sqrt();
                let l10 = cov[1][0] / l00;
                let l11 = (cov[1][1] - l10 * l10).sqrt();
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                out[0] = mean[0] + l00 * z0;
                out[1] = mean[1] + l10 * z0 + l11 * z1;
            }
        }
    }
}

/// Mixture `p_i(x) = sum_k w_i(k) rho_k(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDistribution {
    components: Vec<ComponentDensity>,
    weights: Vec<f64>,
}

impl ClientDistribution {
    pub fn new(components: Vec<ComponentDensity>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(Error::Config(format!(
                "mixture needs matching non-empty component and weight lists ({} vs {})",
                components.len(),
                weights.len()
            )));
        }
        let dim = components[0].dim();
        for c in &components {
            c.validate()?;
            if c.dim() != dim {
                return Err(Error::dim("mixture component dimension", dim, c.dim()));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(ClientDistribution {
            components,
            weights,
        })
    }

    /// Equal weights over `components`.
    pub fn uniform(components: Vec<ComponentDensity>) -> Result<Self> {
        let n = components.len().max(1);
        ClientDistribution::new(components, vec![1.0 / n as f64; n])
    }

    pub fn single(component: ComponentDensity) -> Result<Self> {
        ClientDistribution::new(vec![component], vec![1.0])
    }

    pub fn components(&self) -> &[ComponentDensity] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim("density point", self.dim(), x.len()));
        }
        Ok(self.density_unchecked(x))
    }

    fn density_unchecked(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(c, w)| w * c.density(x))
            .sum()
    }

    /// `n` draws, one per row. The component is picked by inverse CDF on
    /// the weights, then sampled.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor2D {
        let dim = self.dim();
        let mut out = Tensor2D::zeros(n, dim);
        for r in 0..n {
            let k = self.pick_component(rng);
            self.components[k].sample_into(rng, out.row_mut(r));
        }
        out
    }

    fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (k, &w) in self.weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last_positive = k;
            acc += w;
            if u < acc {
                return k;
            }
        }
        last_positive
    }

    /// Pools several mixtures with equal weight into one.
    pub fn pooled(clients: &[ClientDistribution]) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Config("cannot pool an empty client list".into()));
        }
        let share = 1.0 / clients.len() as f64;
        let mut components = Vec::new();
        let mut weights = Vec::new();
        for c in clients {
            components.extend(c.components.iter().cloned());
            weights.extend(c.weights.iter().map(|w| w * share));
        }
        if clients.len() == 1 {
            return Ok(clients[0].clone());
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        ClientDistribution::new(components, weights)
    }
}

/// Uniform grid supporting trapezoid quadrature in one or two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points_per_dim: usize,
}

impl GridDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points_per_dim: usize) -> Result<Self> {
        let dim = lower.len();
        if !(1..=2).contains(&dim) || upper.len() != dim {
            return Err(Error::Config("grid must be 1- or 2-dimensional".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Config("grid lower bounds must be below upper bounds".into()));
        }
        if points_per_dim < 16 {
            return Err(Error::Config(format!(
                "grid needs at least 16 points per dimension, got {points_per_dim}"
            )));
        }
        Ok(GridDomain {
            lower,
            upper,
            points_per_dim,
        })
    }

    /// `[min mean - 6 sigma, max mean + 6 sigma]` per axis over all components.
    pub fn covering(components: &[ComponentDensity], points_per_dim: usize) -> Result<Self> {
        let dim = components
            .first()
            .ok_or_else(|| Error::Config("no components to cover".into()))?
            .dim();
        let mut lower = vec![f64::INFINITY; dim];
        let mut upper = vec![f64::NEG_INFINITY; dim];
        for c in components {
            for (d, (m, s)) in c.mean().into_iter().zip(c.axis_std()).enumerate() {
                lower[d] = lower[d].min(m - 6.0 * s);
                upper[d] = upper[d].max(m + 6.0 * s);
            }
        }
        GridDomain::new(lower, upper, points_per_dim)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn len(&self) -> usize {
        self.points_per_dim.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.points_per_dim - 1) as f64
    }

    fn coord(&self, axis: usize, k: usize) -> f64 {
        self.lower[axis] + k as f64 * self.spacing(axis)
    }

    /// Node `idx` in row-major order (last axis fastest).
    pub fn point(&self, idx: usize) -> Vec<f64> {
        let n = self.points_per_dim;
        match self.dim() {
            1 => vec![self.coord(0, idx)],
            _ => vec![self.coord(0, idx / n), self.coord(1, idx % n)],
        }
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Trapezoid weight for node `idx`.
    pub fn weight(&self, idx: usize) -> f64 {
        let n = self.points_per_dim;
        let axis_weight = |axis: usize, k: usize| {
            let h = self.spacing(axis);
            if k == 0 || k == n - 1 {
                0.5 * h
            } else {
                h
            }
        };
        match self.dim() {
            1 => axis_weight(0, idx),
            _ => axis_weight(0, idx / n) * axis_weight(1, idx % n),
        }
    }

    /// Trapezoid rule for `f` over the grid.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|i| self.weight(i) * f(&self.point(i))).sum()
    }

    /// Nearest node for `x`, clamped into the grid. The flag reports
    /// whether clamping happened.
    pub fn nearest(&self, x: &[f64]) -> (usize, bool) {
        let n = self.points_per_dim;
        let mut clamped = false;
        let mut axis_index = |axis: usize| {
            let t = ((x[axis] - self.lower[axis]) / self.spacing(axis)).round();
            if !(t >= 0.0 && t <= (n - 1) as f64) {
                clamped = true;
            }
            if t.is_nan() {
                0
            } else {
                t.clamp(0.0, (n - 1) as f64) as usize
            }
        };
        let idx = match self.dim() {
            1 => axis_index(0),
            _ => {
                let i = axis_index(0);
                i * n + axis_index(1)
            }
        };
        (idx, clamped)
    }
}

/// `Z` together with the quadrature diagnostics that produced it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZEstimate {
    pub z: f64,
    /// Grid mass of each client density; should be `1 - O(tail)`.
    pub client_masses: Vec<f64>,
    pub warnings: Vec<String>,
}

const MASS_TOLERANCE: f64 = 1e-6;

/// `Z = integral of max_i p_i(x)`, trapezoid rule on `grid`.
pub fn compute_z(clients: &[ClientDistribution], grid: &GridDomain) -> Result<ZEstimate> {
    check_clients(clients, grid.dim())?;
    let mut masses = vec![0.0; clients.len()];
    let mut z = 0.0;
    for idx in 0..grid.len() {
        let x = grid.point(idx);
        let w = grid.weight(idx);
        let mut best = 0.0f64;
        for (m, c) in masses.iter_mut().zip(clients) {
            let p = c.density_unchecked(&x);
            *m += w * p;
            best = best.max(p);
        }
        z += w * best;
    }
    let warnings = masses
        .iter()
        .enumerate()
        .filter(|(_, m)| (*m - 1.0).abs() > MASS_TOLERANCE)
        .map(|(i, m)| {
            format!("client {i} integrates to {m:.9} on the grid; Z may be inaccurate (grid too coarse or narrow)")
        })
        .collect();
    Ok(ZEstimate {
        z,
        client_masses: masses,
        warnings,
    })
}

/// `max_i p_i(x) / Z`
pub fn p_max_density(clients: &[ClientDistribution], z: f64, x: &[f64]) -> Result<f64> {
    check_clients(clients, x.len())?;
    if !(z > 0.0) {
        return Err(Error::Config(format!("normalizer Z must be positive, got {z}")));
    }
    Ok(max_density(clients, x) / z)
}

pub(crate) fn max_density(clients: &[ClientDistribution], x: &[f64]) -> f64 {
    clients
        .iter()
        .map(|c| c.density_unchecked(x))
        .fold(0.0, f64::max)
}

fn check_clients(clients: &[ClientDistribution], dim: usize) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Config("client list is empty".into()));
    }
    for c in clients {
        if c.dim() != dim {
            return Err(Error::dim("client dimension", dim, c.dim()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    NonOverlapping,
    ModeratelyOverlapping,
    FullyOverlapping,
}

/// Class index sets per client.
///
/// * non-overlapping: `K/N` consecutive classes each; when `N` is a
///   multiple of `K` instead, `N/K` clients share each single class.
/// * moderately overlapping: `2K/N` consecutive classes starting at
///   `i*K/N`, wrapping around.
/// * fully overlapping: every client holds every class.
pub fn partition_class_sets(
    num_classes: usize,
    num_clients: usize,
    scheme: PartitionScheme,
) -> Result<Vec<Vec<usize>>> {
    let (k, n) = (num_classes, num_clients);
    if k == 0 || n == 0 {
        return Err(Error::Config("need at least one class and one client".into()));
    }
    let sets = match scheme {
        PartitionScheme::FullyOverlapping => (0..n).map(|_| (0..k).collect()).collect(),
        PartitionScheme::NonOverlapping => {
            if k % n == 0 {
                let per = k / n;
                (0..n).map(|i| (i * per..(i + 1) * per).collect()).collect()
            } else if n % k == 0 {
                let share = n / k;
                (0..n).map(|i| vec![i / share]).collect()
            } else {
                return Err(Error::Config(format!(
                    "non-overlapping partition needs K divisible by N or N divisible by K (K={k}, N={n})"
                )));
            }
        }
        PartitionScheme::ModeratelyOverlapping => {
            if k % n != 0 || 2 * k / n > k {
                return Err(Error::Config(format!(
                    "moderately-overlapping partition needs K divisible by N and N >= 2 (K={k}, N={n})"
                )));
            }
            let stride = k / n;
            let width = 2 * stride;
            (0..n)
                .map(|i| (0..width).map(|j| (i * stride + j) % k).collect())
                .collect()
        }
    };
    Ok(sets)
}

/// Builds one uniform class mixture per client.
pub fn partition_classes(
    num_clients: usize,
    scheme: PartitionScheme,
    class_densities: &[ComponentDensity],
) -> Result<Vec<ClientDistribution>> {
    partition_class_sets(class_densities.len(), num_clients, scheme)?
        .into_iter()
        .map(|set| {
            ClientDistribution::uniform(set.into_iter().map(|k| class_densities[k].clone()).collect())
        })
        .collect()
}
