//! The continuum kinetic equation for isotropic spectra `n(|k|)` in `d = 2`:
//!
//! ```text
//! dn_k/dt = -2 gamma_k n_k + b_k^2 + eps4 * integral T F dmu
//! F = n1 n2 n3 + n n1 n2 - n n2 n3 - n n1 n3,   T = 1 / (phi (gamma + gamma1 + gamma2 + gamma3))
//! ```
//!
//! `mu` is the measure the momentum and energy deltas induce on the resonant manifold
//! `{k1 + k2 = k + k3, |k1|^2 + |k2|^2 = |k|^2 + |k3|^2}`. With `k2` eliminated and `k1`
//! on the circle of centre `(k + k3)/2` and radius `|k3 - k|/2` at angle `theta`,
//! `dmu = dk3 dtheta / 4`. Equivalently, with `k3 = k1 + t e` and `k2 = k + t e` for the
//! unit `e` orthogonal to `k1 - k`, `dmu = dk1 dt / (2 |k1 - k|)`.

use std::f64::consts::PI;

use num_rational::Ratio;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effective::{trajectory_rng, ResonantSystem};
use crate::lattice::ModeLattice;
use crate::moments::closed_collision;
use crate::stats::CovarianceAccumulator;

const BLOCK: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticError {
    #[error("the continuum collision integral is implemented for d = 2 only (got d = {0})")]
    UnsupportedDimension(usize),
    #[error("invalid kinetic configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("kernel denominator vanishes (sum of damping rates = {0})")]
    ZeroDenominator(f64),
    #[error("spectrum unstable at step {step}: n = {value:e} at k = {k}")]
    Unstable { step: usize, k: f64, value: f64 },
    #[error("k = {0} is outside the spectrum's domain")]
    OutsideDomain(f64),
}

/// What to do with manifold samples whose moduli fall outside a spectrum's window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extension {
    /// Evaluate the analytic formula anyway (power laws only; grids always reject).
    Analytic,
    /// Drop the sample and count it.
    Reject,
}

/// Volume of the unit ball in `R^n`.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / n as f64 * unit_ball_volume(n - 2),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KineticConfig {
    pub d: usize,
    /// Damping exponent of the kernel: `gamma = eps |k|^m`.
    pub m: f64,
    pub eps: f64,
    /// Collision prefactor.
    pub eps4: f64,
    /// Constant stand-in for the manifold area factor `phi`.
    pub phi_const: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub samples: usize,
    pub seed: u64,
    pub extension: Extension,
}

impl KineticConfig {
    /// `phi` defaults to the lower bound `V_1`, the volume of the unit ball in `R^{2d-1}`.
    pub fn new(d: usize, m: f64) -> Self {
        Self {
            d,
            m,
            eps: 1.0,
            eps4: 1.0,
            phi_const: unit_ball_volume(2 * d.max(1) - 1),
            k_min: 1e-3,
            k_max: 1e3,
            samples: 1 << 20,
            seed: 0,
            extension: Extension::Analytic,
        }
    }

    pub fn validate(&self) -> Result<(), KineticError> {
        let bad = |m: &str| Err(KineticError::InvalidConfig(m.to_owned()));
        if !(self.k_min > 0.0 && self.k_max > self.k_min && self.k_max.is_finite()) {
            return bad("need 0 < k_min < k_max");
        }
        if !(self.eps4 >= 0.0 && self.eps4.is_finite()) {
            return bad("eps4 must be non-negative");
        }
        if !(self.phi_const > 0.0 && self.phi_const.is_finite()) {
            return bad("phi_const must be positive");
        }
        if !(self.eps > 0.0 && self.eps.is_finite() && self.m.is_finite()) {
            return bad("kernel damping needs eps > 0 and finite m");
        }
        if self.samples < 2 {
            return bad("need at least two quadrature samples");
        }
        Ok(())
    }

    pub fn gamma(&self, modulus: f64) -> f64 {
        self.eps * modulus.powf(self.m)
    }
}

/// An isotropic spectrum `n(|k|)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumFn {
    /// Nodes `k_i` with values `n_i`, interpolated linearly in `(ln k, ln n)`.
    Grid { nodes: Vec<f64>, values: Vec<f64> },
    /// `a k^sigma`, nominally on `[k_min, k_max]`.
    PowerLaw { amplitude: f64, sigma: f64, k_min: f64, k_max: f64 },
    /// `a exp(-k^2 / w^2)`, defined for every `k`.
    Gaussian { amplitude: f64, width: f64 },
}

impl SpectrumFn {
    pub fn grid(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self, KineticError> {
        let s = SpectrumFn::Grid { nodes, values };
        s.validate()?;
        Ok(s)
    }

    pub fn power_law(amplitude: f64, sigma: f64, k_min: f64, k_max: f64) -> Result<Self, KineticError> {
        let s = SpectrumFn::PowerLaw {
            amplitude,
            sigma,
            k_min,
            k_max,
        };
        s.validate()?;
        Ok(s)
    }

    /// Samples `f` on `count` log-spaced nodes of `[k_min, k_max]`.
    pub fn sampled(k_min: f64, k_max: f64, count: usize, f: impl Fn(f64) -> f64) -> Result<Self, KineticError> {
        let nodes = log_nodes(k_min, k_max, count);
        let values = nodes.iter().map(|&k| f(k)).collect();
        Self::grid(nodes, values)
    }

    pub fn validate(&self) -> Result<(), KineticError> {
        let bad = |m: String| Err(KineticError::InvalidSpectrum(m));
        match self {
            SpectrumFn::Grid { nodes, values } => {
                if nodes.len() < 2 || nodes.len() != values.len() {
                    return bad(format!("grid needs >= 2 nodes and one value per node ({} / {})", nodes.len(), values.len()));
                }
                if !(nodes[0] > 0.0 && nodes.windows(2).all(|w| w[0] < w[1]) && nodes.iter().all(|k| k.is_finite())) {
                    return bad("grid nodes must be positive, finite and strictly increasing".into());
                }
                if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                    return bad(format!("grid values must be positive and finite (found {v})"));
                }
            }
            SpectrumFn::PowerLaw {
                amplitude,
                sigma,
                k_min,
                k_max,
            } => {
                if !(*amplitude > 0.0 && sigma.is_finite() && *k_min > 0.0 && k_max > k_min) {
                    return bad("power law needs a > 0, finite sigma and 0 < k_min < k_max".into());
                }
            }
            SpectrumFn::Gaussian { amplitude, width } => {
                if !(*amplitude > 0.0 && *width > 0.0) {
                    return bad("Gaussian needs a > 0 and w > 0".into());
                }
            }
        }
        Ok(())
    }

    /// `n(k)`, or `None` when `k` falls outside the window under `extension`.
    pub fn eval(&self, k: f64, extension: Extension) -> Option<f64> {
        match self {
            SpectrumFn::Grid { nodes, values } => {
                let (lo, hi) = (nodes[0], nodes[nodes.len() - 1]);
                if !(k >= lo && k <= hi) {
                    return None;
                }
                let i = nodes.partition_point(|&x| x <= k).clamp(1, nodes.len() - 1);
                let (x0, x1) = (nodes[i - 1].ln(), nodes[i].ln());
                let (y0, y1) = (values[i - 1].ln(), values[i].ln());
                let s = (k.ln() - x0) / (x1 - x0);
                Some((y0 + s * (y1 - y0)).exp())
            }
            SpectrumFn::PowerLaw {
                amplitude,
                sigma,
                k_min,
                k_max,
            } => {
                if extension == Extension::Reject && !(k >= *k_min && k <= *k_max) {
                    return None;
                }
                Some(amplitude * k.powf(*sigma))
            }
            SpectrumFn::Gaussian { amplitude, width } => Some(amplitude * (-(k / width).powi(2)).exp()),
        }
    }

    pub fn nodes(&self) -> Option<&[f64]> {
        match self {
            SpectrumFn::Grid { nodes, .. } => Some(nodes),
            _ => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            SpectrumFn::Grid { values, .. } => Some(values),
            _ => None,
        }
    }
}

pub fn log_nodes(k_min: f64, k_max: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    let (a, b) = (k_min.ln(), k_max.ln());
    (0..count)
        .map(|i| {
            if i == 0 {
                k_min
            } else if i + 1 == count {
                k_max
            } else {
                (a + (b - a) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

/// `T = 1 / (phi (gamma + gamma1 + gamma2 + gamma3))` on the moduli `(k, k1, k2, k3)`.
pub fn kernel_t(moduli: [f64; 4], config: &KineticConfig) -> Result<f64, KineticError> {
    let total: f64 = moduli.iter().map(|&k| config.gamma(k)).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(KineticError::ZeroDenominator(total));
    }
    Ok(1.0 / (config.phi_const * total))
}

/// `n1 n2 n3 + n n1 n2 - n n2 n3 - n n1 n3`.
pub fn collision_factor(n: f64, n1: f64, n2: f64, n3: f64) -> f64 {
    n1 * n2 * n3 + n * n1 * n2 - n * n2 * n3 - n * n1 * n3
}

/// `1 + (k3/k)^x - (k1/k)^x - (k2/k)^x`.
pub fn zakharov_bracket(x: f64, k: f64, k1: f64, k2: f64, k3: f64) -> f64 {
    1.0 + (k3 / k).powf(x) - (k1 / k).powf(x) - (k2 / k).powf(x)
}

/// `x = 2 - 3 sigma - m - 3 d`.
pub fn x_of_sigma(sigma: f64, m: f64, d: f64) -> f64 {
    2.0 - 3.0 * sigma - m - 3.0 * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Exponents {
    /// `-(m + 3d - 2) / 3`.
    pub kz_first: Ratio<i64>,
    /// `-(m + 3d) / 3`.
    pub kz_second: Ratio<i64>,
    /// Rayleigh-Jeans: `n = C` and `n = C / k^2`.
    pub rayleigh_jeans: (Ratio<i64>, Ratio<i64>),
}

pub fn kz_exponents(d: i64, m: impl Into<Ratio<i64>>) -> Exponents {
    let m = m.into();
    let three = Ratio::from_integer(3);
    let d3 = Ratio::from_integer(3 * d);
    Exponents {
        kz_first: -(m + d3 - Ratio::from_integer(2)) / three,
        kz_second: -(m + d3) / three,
        rayleigh_jeans: (Ratio::from_integer(0), Ratio::from_integer(-2)),
    }
}

/// A point of the resonant manifold at fixed `k`, with the mixture density that drew it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManifoldSample {
    pub k: [f64; 2],
    pub k1: [f64; 2],
    pub k2: [f64; 2],
    pub k3: [f64; 2],
    /// Density with respect to `mu`.
    pub density: f64,
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn scale(a: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] * s, a[1] * s]
}

impl ManifoldSample {
    /// `(|k|, |k1|, |k2|, |k3|)`.
    pub fn moduli(&self) -> [f64; 4] {
        [norm(self.k), norm(self.k1), norm(self.k2), norm(self.k3)]
    }
}

/// Importance sampler for `mu` restricted to `{|k|, |k1|, |k2|, |k3| <= outer}`.
///
/// Power-law spectra are singular where any of `k1, k2, k3` approaches the origin, so a
/// single proposal has infinite variance. The sampler mixes four proposals:
/// `k3` log-uniform in radius on `[inner, outer]` (the bulk), `k3` concentrated near
/// the origin, and `k1` (or `k2`) concentrated near the origin with a Cauchy offset
/// along the rectangle side.
#[derive(Clone, Debug)]
pub struct ManifoldSampler {
    k: [f64; 2],
    inner: f64,
    outer: f64,
    weights: [f64; 4],
    // density |x|^-a on the disc of radius `near`
    a: f64,
    near: f64,
    cauchy: f64,
}

impl ManifoldSampler {
    pub fn new(k_modulus: f64, inner: f64, outer: f64) -> Self {
        Self {
            k: [k_modulus, 0.0],
            inner,
            outer,
            weights: [0.4, 0.2, 0.2, 0.2],
            a: 1.5,
            near: k_modulus,
            cauchy: k_modulus,
        }
    }

    pub fn outer(&self) -> f64 {
        self.outer
    }

    fn log_radial(&self, x: [f64; 2]) -> f64 {
        let r = norm(x);
        if r < self.inner || r > self.outer {
            return 0.0;
        }
        1.0 / (2.0 * PI * r * r * (self.outer / self.inner).ln())
    }

    fn near_origin(&self, x: [f64; 2]) -> f64 {
        let r = norm(x);
        if r > self.near || r == 0.0 {
            return 0.0;
        }
        (2.0 - self.a) / (2.0 * PI * self.near.powf(2.0 - self.a)) * r.powf(-self.a)
    }

    fn cauchy_density(&self, t: f64) -> f64 {
        let s = self.cauchy;
        1.0 / (PI * s * (1.0 + (t / s) * (t / s)))
    }

    fn draw_near_origin<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let u: f64 = rng.gen();
        let r = self.near * u.powf(1.0 / (2.0 - self.a));
        let phi = 2.0 * PI * rng.gen::<f64>();
        [r * phi.cos(), r * phi.sin()]
    }

    fn side_direction(&self, corner: [f64; 2]) -> Option<[f64; 2]> {
        let d = sub(corner, self.k);
        let len = norm(d);
        (len > 0.0).then(|| [-d[1] / len, d[0] / len])
    }

    /// Mixture density with respect to `mu` at a manifold point.
    pub fn density(&self, k1: [f64; 2], k2: [f64; 2], k3: [f64; 2]) -> f64 {
        let [w0, w3, w1, w2] = self.weights;
        // the theta proposal is uniform, and dmu = dk3 dtheta / 4
        let angular = 4.0 / (2.0 * PI);
        let mut q = w0 * self.log_radial(k3) * angular + w3 * self.near_origin(k3) * angular;
        for (w, corner) in [(w1, k1), (w2, k2)] {
            if let Some(e) = self.side_direction(corner) {
                let t = dot(sub(k3, corner), e);
                let h = self.near_origin(corner);
                if h > 0.0 {
                    q += w * h * self.cauchy_density(t) * 2.0 * norm(sub(corner, self.k));
                }
            }
        }
        q
    }

    fn from_k3_theta(&self, k3: [f64; 2], theta: f64) -> ([f64; 2], [f64; 2]) {
        let c = scale(add(self.k, k3), 0.5);
        let r = 0.5 * norm(sub(k3, self.k));
        let k1 = add(c, [r * theta.cos(), r * theta.sin()]);
        let k2 = sub(add(self.k, k3), k1);
        (k1, k2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ManifoldSample {
        let [w0, w3, w1, _] = self.weights;
        let u: f64 = rng.gen();
        let (k1, k2, k3) = if u < w0 + w3 {
            let k3 = if u < w0 {
                let r = self.inner * (self.outer / self.inner).powf(rng.gen::<f64>());
                let phi = 2.0 * PI * rng.gen::<f64>();
                [r * phi.cos(), r * phi.sin()]
            } else {
                self.draw_near_origin(rng)
            };
            let theta = 2.0 * PI * rng.gen::<f64>();
            let (k1, k2) = self.from_k3_theta(k3, theta);
            (k1, k2, k3)
        } else {
            let corner = self.draw_near_origin(rng);
            let z: f64 = StandardNormal.sample(rng);
            let y: f64 = StandardNormal.sample(rng);
            // ratio of normals is Cauchy
            let t = self.cauchy * z / y;
            let e = self.side_direction(corner).unwrap_or([0.0, 1.0]);
            let k3 = add(corner, scale(e, t));
            let other = add(self.k, scale(e, t));
            if u < w0 + w3 + w1 {
                (corner, other, k3)
            } else {
                (other, corner, k3)
            }
        };
        ManifoldSample {
            k: self.k,
            k1,
            k2,
            k3,
            density: self.density(k1, k2, k3),
        }
    }

    pub fn in_domain(&self, s: &ManifoldSample) -> bool {
        s.moduli().iter().all(|&m| m <= self.outer)
    }
}

/// Monte Carlo estimates of several integrals over `mu` from one shared sample set.
#[derive(Clone, Debug)]
pub struct ManifoldEstimate {
    pub accumulator: CovarianceAccumulator,
    /// Per output, samples dropped by the window rule.
    pub rejected: Vec<usize>,
}

impl ManifoldEstimate {
    pub fn value(&self, i: usize) -> f64 {
        self.accumulator.mean()[i]
    }

    pub fn stderr(&self, i: usize) -> f64 {
        self.accumulator.stderr(i)
    }

    pub fn samples(&self) -> u64 {
        self.accumulator.count()
    }

    pub fn rejected_fraction(&self, i: usize) -> f64 {
        self.rejected[i] as f64 / self.samples().max(1) as f64
    }

    /// Standard error of `sum c_i I_i`.
    pub fn combination_stderr(&self, coefficients: &[(usize, f64)]) -> f64 {
        let n = self.samples();
        if n < 2 {
            return 0.0;
        }
        let mut var = 0.0;
        for &(i, a) in coefficients {
            for &(j, b) in coefficients {
                var += a * b * self.accumulator.covariance(i, j);
            }
        }
        (var.max(0.0) / n as f64).sqrt()
    }
}

/// Integrates `outputs` functions over `mu` with `samples` draws.
///
/// `eval` receives every in-domain sample and fills one integrand value per output; it
/// marks an output as rejected by writing `None`. Blocks of samples use fixed RNG
/// substreams, so the result does not depend on the number of threads.
pub fn integrate_manifold<F>(
    sampler: &ManifoldSampler,
    samples: usize,
    seed: u64,
    outputs: usize,
    eval: F,
) -> ManifoldEstimate
where
    F: Fn(&ManifoldSample, &mut [Option<f64>]) + Sync,
{
    let blocks = samples.div_ceil(BLOCK);
    let partial: Vec<(CovarianceAccumulator, Vec<usize>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng: ChaCha8Rng = trajectory_rng(seed, b);
            let mut acc = CovarianceAccumulator::new(outputs);
            let mut rejected = vec![0; outputs];
            let mut values = vec![None; outputs];
            let mut weights = vec![0.0; outputs];
            let count = BLOCK.min(samples - b * BLOCK);
            for _ in 0..count {
                let s = sampler.sample(&mut rng);
                weights.iter_mut().for_each(|w| *w = 0.0);
                if sampler.in_domain(&s) && s.density > 0.0 {
                    values.iter_mut().for_each(|v| *v = None);
                    eval(&s, &mut values);
                    for (i, v) in values.iter().enumerate() {
                        match v {
                            Some(x) if x.is_finite() => weights[i] = x / s.density,
                            _ => rejected[i] += 1,
                        }
                    }
                }
                acc.push(&weights);
            }
            (acc, rejected)
        })
        .collect();
    let mut acc = CovarianceAccumulator::new(outputs);
    let mut rejected = vec![0; outputs];
    for (a, r) in &partial {
        acc.merge(a);
        for (x, y) in rejected.iter_mut().zip(r) {
            *x += y;
        }
    }
    ManifoldEstimate {
        accumulator: acc,
        rejected,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CollisionEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
    pub rejected_fraction: f64,
}

fn check_continuum(config: &KineticConfig, k: f64) -> Result<(), KineticError> {
    if config.d != 2 {
        return Err(KineticError::UnsupportedDimension(config.d));
    }
    config.validate()?;
    if !(k > 0.0 && k <= config.k_max) {
        return Err(KineticError::OutsideDomain(k));
    }
    Ok(())
}

fn integrand(s: &ManifoldSample, n: &SpectrumFn, config: &KineticConfig) -> Option<f64> {
    let moduli = s.moduli();
    let t = kernel_t(moduli, config).ok()?;
    let [a, b, c, d] = moduli.map(|m| n.eval(m, config.extension));
    Some(config.eps4 * t * collision_factor(a?, b?, c?, d?))
}

/// Collision integrals of several spectra at `|k| = k_modulus`, sharing one sample set.
pub fn collision_integrals(
    k_modulus: f64,
    spectra: &[SpectrumFn],
    config: &KineticConfig,
) -> Result<ManifoldEstimate, KineticError> {
    check_continuum(config, k_modulus)?;
    for s in spectra {
        s.validate()?;
    }
    let sampler = ManifoldSampler::new(k_modulus, config.k_min.min(k_modulus), config.k_max);
    Ok(integrate_manifold(&sampler, config.samples, config.seed, spectra.len(), |s, out| {
        for (o, n) in out.iter_mut().zip(spectra) {
            *o = integrand(s, n, config);
        }
    }))
}

/// `eps4 * integral T F dmu` at `|k| = k_modulus`.
pub fn collision_integral(k_modulus: f64, n: &SpectrumFn, config: &KineticConfig) -> Result<CollisionEstimate, KineticError> {
    let est = collision_integrals(k_modulus, std::slice::from_ref(n), config)?;
    Ok(CollisionEstimate {
        value: est.value(0),
        stderr: est.stderr(0),
        samples: est.samples(),
        rejected_fraction: est.rejected_fraction(0),
    })
}

/// `-2 gamma(k) n(k) + b^2(k) + collision`, with the collision part's standard error.
pub fn kinetic_rhs(
    k_modulus: f64,
    n: &SpectrumFn,
    damping: impl Fn(f64) -> f64,
    forcing_sq: impl Fn(f64) -> f64,
    config: &KineticConfig,
) -> Result<(f64, f64), KineticError> {
    let nk = n
        .eval(k_modulus, config.extension)
        .ok_or(KineticError::OutsideDomain(k_modulus))?;
    let c = collision_integral(k_modulus, n, config)?;
    Ok((-2.0 * damping(k_modulus) * nk + forcing_sq(k_modulus) + c.value, c.stderr))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanRow {
    pub sigma: f64,
    pub residual: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanReport {
    pub k_eval: f64,
    pub rows: Vec<ScanRow>,
    pub samples: u64,
    #[serde(skip)]
    estimate: ManifoldEstimate,
}

impl ScanReport {
    /// Index of the smallest `|residual|`.
    pub fn minimum(&self) -> usize {
        (0..self.rows.len())
            .min_by(|&a, &b| self.rows[a].residual.abs().total_cmp(&self.rows[b].residual.abs()))
            .unwrap_or(0)
    }

    /// `(|r_j| - |r_i|)` over its standard error; the common random numbers make the
    /// two residuals strongly correlated, which the paired error accounts for.
    pub fn separation(&self, i: usize, j: usize) -> f64 {
        let (ri, rj) = (self.rows[i].residual, self.rows[j].residual);
        let gap = rj.abs() - ri.abs();
        let se = self
            .estimate
            .combination_stderr(&[(j, rj.signum()), (i, -ri.signum())]);
        gap / se
    }

    /// Indices whose `|residual|` is below both neighbours in the grid order.
    pub fn dips(&self) -> Vec<usize> {
        let r: Vec<f64> = self.rows.iter().map(|r| r.residual.abs()).collect();
        (1..r.len().saturating_sub(1))
            .filter(|&i| r[i] < r[i - 1] && r[i] < r[i + 1])
            .collect()
    }
}

/// Collision residuals of `n = k^sigma` at `k_eval` for every `sigma`, with common random numbers.
pub fn stationarity_scan(sigmas: &[f64], k_eval: f64, config: &KineticConfig) -> Result<ScanReport, KineticError> {
    if sigmas.iter().any(|s| !s.is_finite()) {
        return Err(KineticError::InvalidConfig("sigma grid must be finite".into()));
    }
    let spectra: Vec<SpectrumFn> = sigmas
        .iter()
        .map(|&s| SpectrumFn::power_law(1.0, s, config.k_min, config.k_max))
        .collect::<Result<_, _>>()?;
    let est = collision_integrals(k_eval, &spectra, config)?;
    Ok(ScanReport {
        k_eval,
        rows: sigmas
            .iter()
            .enumerate()
            .map(|(i, &sigma)| ScanRow {
                sigma,
                residual: est.value(i),
                stderr: est.stderr(i),
            })
            .collect(),
        samples: est.samples(),
        estimate: est,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub dt: f64,
    pub steps: usize,
    /// Lower clamp for `n`.
    pub floor: f64,
    /// Abort once any node exceeds this.
    pub bound: f64,
    /// Keep every `record_every`-th profile.
    pub record_every: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            steps: 1000,
            floor: 1e-12,
            bound: 1e12,
            record_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evolution {
    pub nodes: Vec<f64>,
    /// `(step, n at every node)`.
    pub profiles: Vec<(usize, Vec<f64>)>,
    pub clamped: usize,
    pub rejected_fraction: f64,
}

impl Evolution {
    pub fn last(&self) -> &[f64] {
        &self.profiles.last().expect("at least the initial profile").1
    }

    /// Largest relative change of the profile over the final `fraction` of the recorded steps.
    pub fn relative_drift(&self, fraction: f64) -> f64 {
        let last_step = self.profiles.last().map_or(0, |p| p.0);
        let start = last_step as f64 * (1.0 - fraction);
        let first = self
            .profiles
            .iter()
            .find(|p| p.0 as f64 >= start)
            .unwrap_or_else(|| self.profiles.last().unwrap());
        first
            .1
            .iter()
            .zip(self.last())
            .map(|(a, b)| ((b - a) / a).abs())
            .fold(0.0, f64::max)
    }
}

// Interpolation stencil of one modulus on the grid: lower node and weight in ln k.
type Stencil = (u32, f64);

// Quadrature rule at one node: the four stencils and eps4 T / q of every in-domain
// sample that stays on the grid.
struct FrozenRule {
    points: Vec<([Stencil; 4], f64)>,
    rejected: usize,
    samples: usize,
}

fn stencil(nodes: &[f64], k: f64) -> Option<Stencil> {
    let (lo, hi) = (nodes[0], nodes[nodes.len() - 1]);
    if !(k >= lo && k <= hi) {
        return None;
    }
    let i = nodes.partition_point(|&x| x <= k).clamp(1, nodes.len() - 1);
    let (x0, x1) = (nodes[i - 1].ln(), nodes[i].ln());
    Some(((i - 1) as u32, (k.ln() - x0) / (x1 - x0)))
}

impl FrozenRule {
    fn build(k: f64, config: &KineticConfig, nodes: &[f64]) -> Self {
        let sampler = ManifoldSampler::new(k, nodes[0].min(k), nodes[nodes.len() - 1]);
        let blocks = config.samples.div_ceil(BLOCK);
        let parts: Vec<(Vec<([Stencil; 4], f64)>, usize)> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut rng = trajectory_rng(config.seed, b);
                let count = BLOCK.min(config.samples - b * BLOCK);
                let mut out = Vec::with_capacity(count);
                let mut rejected = 0;
                for _ in 0..count {
                    let s = sampler.sample(&mut rng);
                    if !(sampler.in_domain(&s) && s.density > 0.0) {
                        continue;
                    }
                    let m = s.moduli();
                    let Ok(t) = kernel_t(m, config) else { continue };
                    match m.map(|x| stencil(nodes, x)) {
                        [Some(a), Some(b), Some(c), Some(d)] => out.push(([a, b, c, d], config.eps4 * t / s.density)),
                        _ => rejected += 1,
                    }
                }
                (out, rejected)
            })
            .collect();
        let rejected = parts.iter().map(|p| p.1).sum();
        Self {
            points: parts.into_iter().flat_map(|p| p.0).collect(),
            rejected,
            samples: config.samples,
        }
    }

    fn apply(&self, ln_n: &[f64]) -> f64 {
        let value = |(i, w): Stencil| {
            let i = i as usize;
            let (a, b) = (ln_n[i], ln_n[(i + 1).min(ln_n.len() - 1)]);
            (a + w * (b - a)).exp()
        };
        let total: f64 = self
            .points
            .iter()
            .map(|(st, factor)| {
                let [a, b, c, d] = st.map(value);
                factor * collision_factor(a, b, c, d)
            })
            .sum();
        total / self.samples as f64
    }
}

/// Explicit Euler time stepping of the kinetic equation on the nodes of a grid spectrum.
///
/// Every node keeps one quadrature rule for the whole run, so the scheme is a
/// deterministic ODE system and its stationary states are genuine fixed points.
/// Manifold samples leaving the grid are rejected and counted.
pub fn evolve_spectrum(
    n0: &SpectrumFn,
    damping: impl Fn(f64) -> f64 + Sync,
    forcing_sq: impl Fn(f64) -> f64 + Sync,
    config: &KineticConfig,
    options: &EvolveOptions,
) -> Result<Evolution, KineticError> {
    if config.d != 2 {
        return Err(KineticError::UnsupportedDimension(config.d));
    }
    config.validate()?;
    let (nodes, values) = match n0 {
        SpectrumFn::Grid { nodes, values } => (nodes.clone(), values.clone()),
        _ => return Err(KineticError::InvalidSpectrum("evolution needs a grid spectrum".into())),
    };
    n0.validate()?;
    if !(options.dt > 0.0 && options.floor > 0.0 && options.bound > options.floor && options.record_every > 0) {
        return Err(KineticError::InvalidConfig("evolution needs dt > 0, 0 < floor < bound, record_every >= 1".into()));
    }
    let rules: Vec<FrozenRule> = if config.eps4 == 0.0 {
        Vec::new()
    } else {
        nodes.iter().map(|&k| FrozenRule::build(k, config, &nodes)).collect()
    };
    let linear: Vec<(f64, f64)> = nodes.iter().map(|&k| (damping(k), forcing_sq(k))).collect();
    let mut n = values;
    let mut profiles = vec![(0, n.clone())];
    let mut clamped = 0;
    let rejected: usize = rules.iter().map(|r| r.rejected).sum();
    let kept: usize = rules.iter().map(|r| r.points.len()).sum();
    for step in 1..=options.steps {
        let ln_n: Vec<f64> = n.iter().map(|x| x.ln()).collect();
        let collisions: Vec<f64> = if rules.is_empty() {
            vec![0.0; nodes.len()]
        } else {
            rules.par_iter().map(|r| r.apply(&ln_n)).collect()
        };
        for (i, c) in collisions.into_iter().enumerate() {
            let (g, f) = linear[i];
            let mut next = n[i] + options.dt * (-2.0 * g * n[i] + f + c);
            if !(next <= options.bound) {
                return Err(KineticError::Unstable {
                    step,
                    k: nodes[i],
                    value: next,
                });
            }
            if next < options.floor {
                next = options.floor;
                clamped += 1;
            }
            n[i] = next;
        }
        if step % options.record_every == 0 || step == options.steps {
            profiles.push((step, n.clone()));
        }
    }
    Ok(Evolution {
        nodes,
        profiles,
        clamped,
        rejected_fraction: rejected as f64 / (rejected + kept).max(1) as f64,
    })
}

/// One row of the lattice against continuum comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub scale: f64,
    /// Nontrivial quadruplets at `k`.
    pub count: usize,
    /// `sum T F` over those quadruplets.
    pub lattice_sum: f64,
    /// `lattice_sum / count * mu(D)`.
    pub rescaled: f64,
    pub continuum: f64,
    pub continuum_stderr: f64,
    pub discrepancy: f64,
    /// Error bar of the discrepancy (continuum and `mu(D)` Monte Carlo errors).
    pub stderr: f64,
}

/// Compares the closed lattice collision sum at the wavevector `k` with the continuum
/// integral over `D = {all |k_i| <= cutoff}`, on lattices of box scale `scales`.
///
/// The lattice sum counts each quadruplet once while the number of quadruplets grows
/// with `L`, so it is rescaled by `mu(D) / count`: the lattice average of the integrand
/// times the manifold measure of the same domain.
pub fn lattice_continuum_consistency(
    k: [f64; 2],
    n: &SpectrumFn,
    cutoff: f64,
    scales: &[f64],
    config: &KineticConfig,
) -> Result<Vec<ConsistencyRow>, KineticError> {
    if config.d != 2 {
        return Err(KineticError::UnsupportedDimension(config.d));
    }
    config.validate()?;
    n.validate()?;
    let k_mod = norm(k);
    let sampler = ManifoldSampler::new(k_mod, config.k_min.min(k_mod), cutoff);
    let est = integrate_manifold(&sampler, config.samples, config.seed, 2, |s, out| {
        out[0] = integrand(s, n, config);
        out[1] = Some(1.0);
    });
    let (continuum, measure) = (est.value(0), est.value(1));
    let mut rows = Vec::new();
    for &scale in scales {
        let lattice = ModeLattice::new(2, scale, cutoff)
            .map_err(|e| KineticError::InvalidConfig(e.to_string()))?;
        let pos = lattice
            .position_of_wavevector(&k)
            .ok_or_else(|| KineticError::InvalidConfig(format!("k = {k:?} is not a point of the L = {scale} lattice")))?;
        let second: Vec<f64> = (0..lattice.len())
            .map(|p| n.eval(lattice.modulus(p), Extension::Analytic).unwrap_or(0.0))
            .collect();
        let gamma: Vec<f64> = (0..lattice.len()).map(|p| config.gamma(lattice.modulus(p))).collect();
        let system = ResonantSystem::new(lattice);
        let count = system.table().nontrivial_at(pos).count();
        // 4 rho^2 = 1 turns the closed collision into sum F / (sum gamma)
        let lattice_sum = closed_collision(&system, pos, &second, &gamma, 0.5) * config.eps4 / config.phi_const;
        let rescaled = if count == 0 { 0.0 } else { lattice_sum / count as f64 * measure };
        let ratio = if count == 0 { 0.0 } else { lattice_sum / count as f64 };
        let stderr = est.combination_stderr(&[(0, 1.0), (1, -ratio)]);
        rows.push(ConsistencyRow {
            scale,
            count,
            lattice_sum,
            rescaled,
            continuum,
            continuum_stderr: est.stderr(0),
            discrepancy: (rescaled - continuum).abs(),
            stderr,
        });
    }
    Ok(rows)
}
