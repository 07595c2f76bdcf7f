//! Ensemble moments `M^{k1..kn}_{l1..lm} = E v_k1 .. v_kn conj(v_l1) .. conj(v_lm)`,
//! the second- and fourth-order moment equations, and their Gaussian closure.
//!
//! A fourth moment `M^{k1 k2}_{k k3}` belongs to the quadruplet `(k1, k2; k, k3)`:
//! upper indices are the unconjugated amplitudes.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effective::{Ensemble, ResonantSystem};
use crate::lattice::{LatticeError, ModeIndex, ModeLattice, Quadruplet};
use crate::stats::MeanAccumulator;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentsError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { got: usize, needed: usize },
    #[error("snapshot {index} out of range ({count} snapshots)")]
    SnapshotOutOfRange { index: usize, count: usize },
    #[error("missing moment {0}")]
    MissingMoment(String),
    #[error("moment index {0} violates k != k1, k2 and k3 != k1, k2")]
    RestrictionViolated(String),
    #[error("sum of damping rates must be positive (got {0})")]
    ZeroDamping(f64),
    #[error("expected {expected} values (one per mode), got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("stride must be at least 1 and fit inside the snapshot range")]
    InvalidStride,
}

/// Upper (unconjugated) and lower (conjugated) modes of a moment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MomentIndex {
    pub upper: Vec<ModeIndex>,
    pub lower: Vec<ModeIndex>,
}

impl MomentIndex {
    pub fn new(upper: Vec<ModeIndex>, lower: Vec<ModeIndex>) -> Self {
        Self { upper, lower }
    }

    /// `M^k_k = E|v_k|^2`.
    pub fn second(k: ModeIndex) -> Self {
        Self::new(vec![k], vec![k])
    }

    pub fn order(&self) -> usize {
        self.upper.len() + self.lower.len()
    }

    pub fn conj(&self) -> Self {
        Self::new(self.lower.clone(), self.upper.clone())
    }

    pub fn positions(&self, lattice: &ModeLattice) -> Result<(Vec<usize>, Vec<usize>), MomentsError> {
        let find = |ms: &[ModeIndex]| -> Result<Vec<usize>, MomentsError> {
            ms.iter().map(|m| Ok(lattice.require(m)?)).collect()
        };
        Ok((find(&self.upper)?, find(&self.lower)?))
    }

    pub fn from_positions(lattice: &ModeLattice, upper: &[usize], lower: &[usize]) -> Self {
        Self::new(
            upper.iter().map(|&p| lattice.mode(p)).collect(),
            lower.iter().map(|&p| lattice.mode(p)).collect(),
        )
    }
}

impl fmt::Display for MomentIndex {
    /// `1;0 0;1|0;0 1;1`: upper modes, a bar, lower modes.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |ms: &[ModeIndex]| ms.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" ");
        write!(f, "{}|{}", join(&self.upper), join(&self.lower))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub value: Complex64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    pub samples: usize,
}

impl MomentEstimate {
    /// Standard error of the complex mean, `sqrt(se_re^2 + se_im^2)`.
    pub fn stderr(&self) -> f64 {
        self.stderr_re.hypot(self.stderr_im)
    }

    pub fn conj(&self) -> Self {
        Self {
            value: self.value.conj(),
            stderr_re: self.stderr_re,
            stderr_im: self.stderr_im,
            samples: self.samples,
        }
    }
}

/// Samples of the field at one slow time, or pooled over a time window.
#[derive(Clone, Debug)]
pub struct EnsembleView<'a> {
    lattice: &'a ModeLattice,
    tau: f64,
    samples: Vec<&'a [Complex64]>,
    time_averaged: bool,
}

impl<'a> EnsembleView<'a> {
    /// One sample per trajectory at snapshot `index`.
    pub fn at(ensemble: &'a Ensemble, lattice: &'a ModeLattice, index: usize) -> Result<Self, MomentsError> {
        let count = ensemble.snapshot_count();
        if index >= count {
            return Err(MomentsError::SnapshotOutOfRange { index, count });
        }
        let samples: Vec<&[Complex64]> = ensemble
            .trajectories
            .iter()
            .map(|t| t.snapshots[index].v.as_slice())
            .collect();
        check_sample_len(lattice, &samples)?;
        Ok(Self {
            lattice,
            tau: ensemble.trajectories[0].snapshots[index].tau,
            samples,
            time_averaged: false,
        })
    }

    /// Every snapshot with `tau >= from`, pooled across trajectories.
    ///
    /// Successive snapshots are correlated, so the reported standard errors are too
    /// small unless the snapshot spacing exceeds the decorrelation time.
    pub fn window(ensemble: &'a Ensemble, lattice: &'a ModeLattice, from: f64) -> Result<Self, MomentsError> {
        let samples: Vec<&[Complex64]> = ensemble
            .trajectories
            .iter()
            .flat_map(|t| t.snapshots.iter().filter(|s| s.tau >= from).map(|s| s.v.as_slice()))
            .collect();
        check_sample_len(lattice, &samples)?;
        Ok(Self {
            lattice,
            tau: from,
            samples,
            time_averaged: true,
        })
    }

    pub fn from_samples(lattice: &'a ModeLattice, tau: f64, samples: Vec<&'a [Complex64]>) -> Result<Self, MomentsError> {
        check_sample_len(lattice, &samples)?;
        Ok(Self {
            lattice,
            tau,
            samples,
            time_averaged: false,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn is_time_averaged(&self) -> bool {
        self.time_averaged
    }

    pub fn lattice(&self) -> &ModeLattice {
        self.lattice
    }

    pub fn samples(&self) -> &[&'a [Complex64]] {
        &self.samples
    }

    /// Position-based [`estimate_moment`].
    pub fn estimate_positions(&self, upper: &[usize], lower: &[usize]) -> Result<MomentEstimate, MomentsError> {
        if self.samples.len() < 2 {
            return Err(MomentsError::InsufficientSamples {
                got: self.samples.len(),
                needed: 2,
            });
        }
        if (upper.len() + lower.len()) % 2 == 1 {
            log::warn!("odd-order moment requested; its expectation vanishes");
        }
        let mut re = MeanAccumulator::new();
        let mut im = MeanAccumulator::new();
        for v in &self.samples {
            let z = sample_product(v, upper, lower);
            re.push(z.re);
            im.push(z.im);
        }
        Ok(MomentEstimate {
            value: Complex64::new(re.mean(), im.mean()),
            stderr_re: re.stderr(),
            stderr_im: im.stderr(),
            samples: self.samples.len(),
        })
    }
}

fn check_sample_len(lattice: &ModeLattice, samples: &[&[Complex64]]) -> Result<(), MomentsError> {
    match samples.iter().find(|s| s.len() != lattice.len()) {
        Some(s) => Err(MomentsError::LengthMismatch {
            expected: lattice.len(),
            got: s.len(),
        }),
        None => Ok(()),
    }
}

// P * conj(Q) with P, Q the plain products, so swapping upper and lower conjugates
// the result bit for bit.
fn sample_product(v: &[Complex64], upper: &[usize], lower: &[usize]) -> Complex64 {
    let p = upper.iter().fold(Complex64::new(1.0, 0.0), |acc, &i| acc * v[i]);
    let q = lower.iter().fold(Complex64::new(1.0, 0.0), |acc, &i| acc * v[i]);
    p * q.conj()
}

/// Sample mean of `prod v_upper prod conj(v_lower)` with its standard error.
pub fn estimate_moment(view: &EnsembleView<'_>, idx: &MomentIndex) -> Result<MomentEstimate, MomentsError> {
    let (upper, lower) = idx.positions(view.lattice)?;
    view.estimate_positions(&upper, &lower)
}

/// A table of moment estimates at one slow time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub estimates: BTreeMap<MomentIndex, MomentEstimate>,
    pub sample_count: usize,
    pub tau: f64,
    pub time_averaged: bool,
}

impl EnsembleStats {
    pub fn collect(view: &EnsembleView<'_>, indices: &[MomentIndex]) -> Result<Self, MomentsError> {
        let mut estimates = BTreeMap::new();
        for idx in indices {
            estimates.insert(idx.clone(), estimate_moment(view, idx)?);
        }
        Ok(Self {
            estimates,
            sample_count: view.sample_count(),
            tau: view.tau(),
            time_averaged: view.is_time_averaged(),
        })
    }

    pub fn get(&self, idx: &MomentIndex) -> Option<&MomentEstimate> {
        self.estimates.get(idx)
    }
}

/// Anything that can supply moment values by lattice position.
pub trait MomentLookup {
    fn moment(&self, upper: &[usize], lower: &[usize]) -> Option<Complex64>;
}

impl<F> MomentLookup for F
where
    F: Fn(&[usize], &[usize]) -> Option<Complex64>,
{
    fn moment(&self, upper: &[usize], lower: &[usize]) -> Option<Complex64> {
        self(upper, lower)
    }
}

impl MomentLookup for EnsembleView<'_> {
    fn moment(&self, upper: &[usize], lower: &[usize]) -> Option<Complex64> {
        self.estimate_positions(upper, lower).ok().map(|e| e.value)
    }
}

/// Moments of independent centred complex Gaussians with `E|v_k|^2 = second[k]`.
#[derive(Clone, Debug)]
pub struct GaussianMoments<'a> {
    pub second: &'a [f64],
}

impl MomentLookup for GaussianMoments<'_> {
    fn moment(&self, upper: &[usize], lower: &[usize]) -> Option<Complex64> {
        Some(Complex64::new(wick_moment(upper, lower, self.second), 0.0))
    }
}

impl MomentLookup for (&EnsembleStats, &ModeLattice) {
    fn moment(&self, upper: &[usize], lower: &[usize]) -> Option<Complex64> {
        let idx = MomentIndex::from_positions(self.1, upper, lower);
        if let Some(e) = self.0.get(&idx) {
            return Some(e.value);
        }
        self.0.get(&idx.conj()).map(|e| e.value.conj())
    }
}

fn describe(lattice: &ModeLattice, upper: &[usize], lower: &[usize]) -> String {
    MomentIndex::from_positions(lattice, upper, lower).to_string()
}

/// Right-hand side of `dM^k_k/dtau`:
/// `-2 gamma_k M^k_k + 2 b_k^2 + 2 rho sum Im M^{k1 k2}_{k k3}` over nontrivial quadruplets.
pub fn chain_rhs_second(
    system: &ResonantSystem,
    k: usize,
    moments: &impl MomentLookup,
    gamma: &[f64],
    b: &[f64],
    rho: f64,
) -> Result<f64, MomentsError> {
    let lat = system.lattice();
    let second = moments
        .moment(&[k], &[k])
        .ok_or_else(|| MomentsError::MissingMoment(describe(lat, &[k], &[k])))?;
    let mut collision = 0.0;
    if rho != 0.0 {
        for q in system.table().nontrivial_at(k) {
            let m = moments
                .moment(&[q.k1, q.k2], &[k, q.k3])
                .ok_or_else(|| MomentsError::MissingMoment(describe(lat, &[q.k1, q.k2], &[k, q.k3])))?;
            collision += m.im;
        }
    }
    Ok(-2.0 * gamma[k] * second.re + 2.0 * b[k] * b[k] + 2.0 * rho * collision)
}

fn check_restriction(lat: &ModeLattice, q: &Quadruplet) -> Result<(), MomentsError> {
    if q.k == q.k1 || q.k == q.k2 || q.k3 == q.k1 || q.k3 == q.k2 {
        return Err(MomentsError::RestrictionViolated(describe(lat, &[q.k1, q.k2], &[q.k, q.k3])));
    }
    Ok(())
}

/// The four resonant sixth-moment sums of `dM^{k1 k2}_{k k3}/dtau`, combined as
/// `sum_{Q(k)} M^{k1 k2 c}_{k3 a b} + sum_{Q(k3)} M^{k1 k2 c}_{k a b}
///  - sum_{Q(k1)} M^{k2 a b}_{k k3 c} - sum_{Q(k2)} M^{k1 a b}_{k k3 c}`,
/// where `(a, b, c)` in `Q(p)` means `a + b = p + c` on the resonant set.
///
/// Returns the sum and the number of terms whose index lists repeat a mode.
fn sixth_moment_sums(
    system: &ResonantSystem,
    q: &Quadruplet,
    moments: &impl MomentLookup,
    skip_coincident: bool,
) -> Result<(Complex64, usize), MomentsError> {
    let lat = system.lattice();
    let mut total = Complex64::new(0.0, 0.0);
    let mut coincident = 0;
    let mut term = |upper: [usize; 3], lower: [usize; 3], sign: f64| -> Result<(), MomentsError> {
        let repeats = has_repeat(&upper) || has_repeat(&lower);
        if repeats && skip_coincident {
            // only count the ones that would have contributed
            if moments.moment(&upper, &lower).is_some_and(|m| m != Complex64::new(0.0, 0.0)) {
                coincident += 1;
            }
            return Ok(());
        }
        let m = moments
            .moment(&upper, &lower)
            .ok_or_else(|| MomentsError::MissingMoment(describe(lat, &upper, &lower)))?;
        total += sign * m;
        Ok(())
    };
    for r in system.table().at(q.k) {
        term([q.k1, q.k2, r.k3], [q.k3, r.k1, r.k2], 1.0)?;
    }
    for r in system.table().at(q.k3) {
        term([q.k1, q.k2, r.k3], [q.k, r.k1, r.k2], 1.0)?;
    }
    for r in system.table().at(q.k1) {
        term([q.k2, r.k1, r.k2], [q.k, q.k3, r.k3], -1.0)?;
    }
    for r in system.table().at(q.k2) {
        term([q.k1, r.k1, r.k2], [q.k, q.k3, r.k3], -1.0)?;
    }
    Ok((total, coincident))
}

fn has_repeat(ix: &[usize; 3]) -> bool {
    ix[0] == ix[1] || ix[0] == ix[2] || ix[1] == ix[2]
}

/// Right-hand side of `dM^{k1 k2}_{k k3}/dtau`:
/// `-(gamma_k + gamma_k1 + gamma_k2 + gamma_k3) M + i rho (sixth-moment sums)`.
///
/// Requires `k != k1, k2` and `k3 != k1, k2`; otherwise the noise contributes.
pub fn chain_rhs_fourth(
    system: &ResonantSystem,
    q: &Quadruplet,
    moments: &impl MomentLookup,
    gamma: &[f64],
    rho: f64,
) -> Result<Complex64, MomentsError> {
    let lat = system.lattice();
    check_restriction(lat, q)?;
    let (upper, lower) = ([q.k1, q.k2], [q.k, q.k3]);
    let m = moments
        .moment(&upper, &lower)
        .ok_or_else(|| MomentsError::MissingMoment(describe(lat, &upper, &lower)))?;
    let damping = gamma[q.k] + gamma[q.k1] + gamma[q.k2] + gamma[q.k3];
    let mut rate = -damping * m;
    if rho != 0.0 {
        let (sums, _) = sixth_moment_sums(system, q, moments, false)?;
        rate += Complex64::new(0.0, rho) * sums;
    }
    Ok(rate)
}

/// Quasistationary balance of the fourth-moment equation: `f / (gamma_k + gamma_k1 + gamma_k2 + gamma_k3)`.
pub fn quasistationary_fourth(q: &Quadruplet, f: Complex64, gamma: &[f64]) -> Result<Complex64, MomentsError> {
    let damping = gamma[q.k] + gamma[q.k1] + gamma[q.k2] + gamma[q.k3];
    if !(damping > 0.0) {
        return Err(MomentsError::ZeroDamping(damping));
    }
    Ok(f / damping)
}

/// Gaussian closure of a sixth moment as written for the kinetic derivation:
/// `M_l1 M_l2 M_l3 prod_i (delta^{li}_{l4} + delta^{li}_{l5} + delta^{li}_{l6})`.
///
/// Exact (equal to [`wick_moment`]) when the upper modes are distinct; repeated upper
/// modes are over-counted, which is the coincidence the derivation neglects.
pub fn qg_closure_sixth(upper: &[usize; 3], lower: &[usize; 3], second: &[f64]) -> f64 {
    upper
        .iter()
        .map(|&u| second[u] * lower.iter().filter(|&&l| l == u).count() as f64)
        .product()
}

/// Exact moment of independent centred circular complex Gaussians with
/// `E|v_k|^2 = second[k]`: the permanent of `[second[u_i] delta(u_i, l_j)]`.
pub fn wick_moment(upper: &[usize], lower: &[usize], second: &[f64]) -> f64 {
    let n = upper.len();
    if n != lower.len() {
        return 0.0;
    }
    let mut used = vec![false; n];
    fn permanent(i: usize, upper: &[usize], lower: &[usize], second: &[f64], used: &mut [bool]) -> f64 {
        if i == upper.len() {
            return 1.0;
        }
        let mut total = 0.0;
        for j in 0..lower.len() {
            if !used[j] && lower[j] == upper[i] {
                used[j] = true;
                total += second[upper[i]] * permanent(i + 1, upper, lower, second, used);
                used[j] = false;
            }
        }
        total
    }
    permanent(0, upper, lower, second, &mut used)
}

/// `M1 M2 M3 + M M1 M2 - M M2 M3 - M M1 M3` for the quadruplet `(k1, k2; k, k3)`.
pub fn closure_combination(q: &Quadruplet, second: &[f64]) -> f64 {
    let (m, m1, m2, m3) = (second[q.k], second[q.k1], second[q.k2], second[q.k3]);
    // grouped so that swapping k1 and k2 leaves the result bit for bit unchanged
    m1 * m2 * (m3 + m) - m * m3 * (m1 + m2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClosedRhs {
    /// `-2 gamma_k M_k + 2 b_k^2`.
    pub linear: f64,
    pub collision: f64,
    /// Sixth-moment terms with a repeated index that were left out.
    pub skipped: usize,
}

impl ClosedRhs {
    pub fn total(&self) -> f64 {
        self.linear + self.collision
    }
}

/// The closed second-moment equation at mode `k`, assembled literally: quasistationary
/// fourth moments whose sixth-moment sums use [`qg_closure_sixth`], inserted into
/// [`chain_rhs_second`].
///
/// Costs a sum over four quadruplet lists per quadruplet; [`closed_collision`] is the
/// reduced form for large lattices.
pub fn closed_rhs_discrete(
    system: &ResonantSystem,
    k: usize,
    second: &[f64],
    gamma: &[f64],
    b: &[f64],
    rho: f64,
) -> Result<ClosedRhs, MomentsError> {
    if second.len() != system.len() {
        return Err(MomentsError::LengthMismatch {
            expected: system.len(),
            got: second.len(),
        });
    }
    let closure = |upper: &[usize], lower: &[usize]| -> Option<Complex64> {
        match (upper, lower) {
            ([a, b, c], [d, e, f]) => Some(Complex64::new(qg_closure_sixth(&[*a, *b, *c], &[*d, *e, *f], second), 0.0)),
            _ => None,
        }
    };
    let mut collision = 0.0;
    let mut skipped = 0;
    if rho != 0.0 {
        for q in system.table().nontrivial_at(k) {
            let (sums, coincident) = sixth_moment_sums(system, q, &closure, true)?;
            skipped += coincident;
            let fourth = quasistationary_fourth(q, Complex64::new(0.0, rho) * sums, gamma)?;
            collision += fourth.im;
        }
    }
    Ok(ClosedRhs {
        linear: -2.0 * gamma[k] * second[k] + 2.0 * b[k] * b[k],
        collision: 2.0 * rho * collision,
        skipped,
    })
}

/// Collision part of the closed equation in reduced form:
/// `4 rho^2 sum (M1 M2 M3 + M M1 M2 - M M2 M3 - M M1 M3) / (gamma_k + gamma_k1 + gamma_k2 + gamma_k3)`
/// over the ordered nontrivial quadruplets at `k`.
///
/// Each sixth-moment sum pairs in two ways (`a, b` in either order), hence `4 rho^2`.
pub fn closed_collision(system: &ResonantSystem, k: usize, second: &[f64], gamma: &[f64], rho: f64) -> f64 {
    let mut total = 0.0;
    for q in system.table().nontrivial_at(k) {
        let damping = gamma[q.k] + gamma[q.k1] + gamma[q.k2] + gamma[q.k3];
        total += closure_combination(q, second) / damping;
    }
    4.0 * rho * rho * total
}

/// One row of a moment-equation check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainCheck {
    pub index: String,
    pub tau: f64,
    /// Centred difference of the ensemble moment.
    pub lhs: f64,
    /// Right-hand side averaged over the difference window.
    pub rhs: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
    /// Standard error of `lhs - rhs` from the per-trajectory differences.
    pub stderr: f64,
    pub pass: bool,
}

impl ChainCheck {
    pub fn z_score(&self) -> f64 {
        (self.lhs - self.rhs).abs() / self.stderr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainReport {
    pub test: String,
    pub sample_count: usize,
    pub tolerance_sigmas: f64,
    pub checks: Vec<ChainCheck>,
}

impl ChainReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

// Per-trajectory samples of the moment and of its right-hand side at every snapshot.
fn chain_check_from_samples(
    index: String,
    times: &[f64],
    centre: usize,
    half_width: usize,
    value: &dyn Fn(usize, usize) -> f64,
    rate: &dyn Fn(usize, usize) -> f64,
    trajectories: usize,
    sigmas: f64,
) -> ChainCheck {
    let (lo, hi) = (centre - half_width, centre + half_width);
    let span = times[hi] - times[lo];
    let mut lhs = MeanAccumulator::new();
    let mut rhs = MeanAccumulator::new();
    let mut diff = MeanAccumulator::new();
    for t in 0..trajectories {
        let l = (value(t, hi) - value(t, lo)) / span;
        // trapezoid rule over the snapshots inside the window
        let mut integral = 0.0;
        for s in lo..hi {
            integral += 0.5 * (rate(t, s) + rate(t, s + 1)) * (times[s + 1] - times[s]);
        }
        let r = integral / span;
        lhs.push(l);
        rhs.push(r);
        diff.push(l - r);
    }
    let stderr = diff.stderr();
    ChainCheck {
        index,
        tau: times[centre],
        lhs: lhs.mean(),
        rhs: rhs.mean(),
        lhs_stderr: lhs.stderr(),
        rhs_stderr: rhs.stderr(),
        stderr,
        pass: (lhs.mean() - rhs.mean()).abs() <= sigmas * stderr,
    }
}

fn check_window(ensemble: &Ensemble, centre: usize, half_width: usize) -> Result<(), MomentsError> {
    if ensemble.len() < 2 {
        return Err(MomentsError::InsufficientSamples {
            got: ensemble.len(),
            needed: 2,
        });
    }
    if half_width == 0 || centre < half_width || centre + half_width >= ensemble.snapshot_count() {
        return Err(MomentsError::InvalidStride);
    }
    Ok(())
}

/// Compares the centred difference of `E|v_k|^2` over snapshots
/// `centre - half_width ..= centre + half_width` with the window average of
/// [`chain_rhs_second`], for every mode.
pub fn chain2_check(
    system: &ResonantSystem,
    ensemble: &Ensemble,
    gamma: &[f64],
    b: &[f64],
    rho: f64,
    centre: usize,
    half_width: usize,
    sigmas: f64,
) -> Result<ChainReport, MomentsError> {
    check_window(ensemble, centre, half_width)?;
    let n = system.len();
    let times = ensemble.snapshot_times();
    // rate samples per trajectory and snapshot: the RHS is linear in the moments, so its
    // ensemble mean is the mean of per-trajectory values
    let (lo, hi) = (centre - half_width, centre + half_width);
    let per_traj: Vec<Vec<Vec<f64>>> = ensemble
        .trajectories
        .iter()
        .map(|t| {
            (0..times.len())
                .map(|s| {
                    if s < lo || s > hi {
                        return Vec::new();
                    }
                    let v = &t.snapshots[s].v;
                    let sums = system.resonant_sums(v);
                    (0..n)
                        .map(|k| {
                            // the trivial part of conj(v_k) S_k is real
                            let im = (v[k].conj() * sums[k]).im;
                            -2.0 * gamma[k] * v[k].norm_sqr() + 2.0 * b[k] * b[k] + 2.0 * rho * im
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let checks = (0..n)
        .map(|k| {
            let value = |t: usize, s: usize| ensemble.trajectories[t].snapshots[s].v[k].norm_sqr();
            let rate = |t: usize, s: usize| per_traj[t][s][k];
            chain_check_from_samples(
                MomentIndex::second(system.lattice().mode(k)).to_string(),
                &times,
                centre,
                half_width,
                &value,
                &rate,
                ensemble.len(),
                sigmas,
            )
        })
        .collect();
    Ok(ChainReport {
        test: "chain2".into(),
        sample_count: ensemble.len(),
        tolerance_sigmas: sigmas,
        checks,
    })
}

/// Same as [`chain2_check`] for the real and imaginary parts of the fourth moments of
/// the given nontrivial quadruplets.
pub fn chain4_check(
    system: &ResonantSystem,
    ensemble: &Ensemble,
    quadruplets: &[Quadruplet],
    gamma: &[f64],
    rho: f64,
    centre: usize,
    half_width: usize,
    sigmas: f64,
) -> Result<ChainReport, MomentsError> {
    check_window(ensemble, centre, half_width)?;
    let lat = system.lattice();
    for q in quadruplets {
        check_restriction(lat, q)?;
    }
    let times = ensemble.snapshot_times();
    let (lo, hi) = (centre - half_width, centre + half_width);
    let sample = |v: &[Complex64], q: &Quadruplet| v[q.k1] * v[q.k2] * (v[q.k] * v[q.k3]).conj();
    // per trajectory, snapshot and quadruplet: (moment sample, rate sample)
    let per_traj: Vec<Vec<Vec<(Complex64, Complex64)>>> = ensemble
        .trajectories
        .iter()
        .map(|t| {
            (0..times.len())
                .map(|s| {
                    if s < lo || s > hi {
                        return Vec::new();
                    }
                    let v = &t.snapshots[s].v;
                    let sums = system.resonant_sums(v);
                    quadruplets
                        .iter()
                        .map(|q| {
                            let x = sample(v, q);
                            let (v1, v2, vk, v3) = (v[q.k1], v[q.k2], v[q.k], v[q.k3]);
                            let a = v1 * v2 * v3.conj() * sums[q.k].conj();
                            let b = v1 * v2 * vk.conj() * sums[q.k3].conj();
                            let c = v2 * (vk * v3).conj() * sums[q.k1];
                            let d = v1 * (vk * v3).conj() * sums[q.k2];
                            let damping = gamma[q.k] + gamma[q.k1] + gamma[q.k2] + gamma[q.k3];
                            (x, -damping * x + Complex64::new(0.0, rho) * (a + b - c - d))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut checks = Vec::new();
    for (i, q) in quadruplets.iter().enumerate() {
        let label = MomentIndex::from_positions(lat, &[q.k1, q.k2], &[q.k, q.k3]).to_string();
        for (part, pick) in [("re", (|z: Complex64| z.re) as fn(Complex64) -> f64), ("im", |z: Complex64| z.im)] {
            let value = |t: usize, s: usize| pick(per_traj[t][s][i].0);
            let rate = |t: usize, s: usize| pick(per_traj[t][s][i].1);
            checks.push(chain_check_from_samples(
                format!("{label} {part}"),
                &times,
                centre,
                half_width,
                &value,
                &rate,
                ensemble.len(),
                sigmas,
            ));
        }
    }
    Ok(ChainReport {
        test: "chain4".into(),
        sample_count: ensemble.len(),
        tolerance_sigmas: sigmas,
        checks,
    })
}

/// Compares ensemble sixth moments with [`qg_closure_sixth`] built from the ensemble's
/// own second moments. The closure error bar folds in the second-moment errors linearly.
pub fn closure_check(
    view: &EnsembleView<'_>,
    indices: &[([usize; 3], [usize; 3])],
    sigmas: f64,
) -> Result<ChainReport, MomentsError> {
    let n = view.lattice().len();
    let mut second = vec![0.0; n];
    let mut second_se = vec![0.0; n];
    for k in 0..n {
        let e = view.estimate_positions(&[k], &[k])?;
        second[k] = e.value.re;
        second_se[k] = e.stderr_re;
    }
    let mut checks = Vec::new();
    for (upper, lower) in indices {
        let e = view.estimate_positions(upper, lower)?;
        let closure = qg_closure_sixth(upper, lower, &second);
        let closure_se = if closure == 0.0 {
            0.0
        } else {
            // first-order error propagation through the product
            upper
                .iter()
                .map(|&u| closure / second[u] * second_se[u])
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        };
        let stderr = e.stderr().hypot(closure_se);
        let gap = (e.value - Complex64::new(closure, 0.0)).norm();
        checks.push(ChainCheck {
            index: MomentIndex::from_positions(view.lattice(), upper, lower).to_string(),
            tau: view.tau(),
            lhs: e.value.re,
            rhs: closure,
            lhs_stderr: e.stderr(),
            rhs_stderr: closure_se,
            stderr,
            pass: gap <= sigmas * stderr,
        });
    }
    Ok(ChainReport {
        test: "closure".into(),
        sample_count: view.sample_count(),
        tolerance_sigmas: sigmas,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective::{simulate, InitialCondition, SimConfig};
    use proptest::prelude::*;

    fn nine_modes() -> ResonantSystem {
        ResonantSystem::new(ModeLattice::new(2, 1.0, 1.5).unwrap())
    }

    fn pos(sys: &ResonantSystem, l: &[i64]) -> usize {
        sys.lattice().position(&ModeIndex::new(l).unwrap()).unwrap()
    }

    fn ou_ensemble(sys: &ResonantSystem, size: usize, seed: u64) -> (Ensemble, Vec<f64>, Vec<f64>) {
        let gamma: Vec<f64> = (0..sys.len()).map(|i| 0.5 + 0.1 * i as f64).collect();
        let b: Vec<f64> = (0..sys.len()).map(|i| 1.0 - 0.05 * i as f64).collect();
        let cfg = SimConfig {
            dt: 0.1,
            horizon: 0.1,
            ensemble_size: size,
            seed,
            ..SimConfig::default()
        };
        let ens = simulate(sys, &cfg, &gamma, &b, &InitialCondition::Stationary).unwrap();
        (ens, gamma, b)
    }

    #[test]
    fn conjugation_symmetry_is_exact() {
        let sys = nine_modes();
        let (ens, ..) = ou_ensemble(&sys, 50, 1);
        let view = EnsembleView::at(&ens, sys.lattice(), 1).unwrap();
        let lat = sys.lattice();
        let idx = MomentIndex::new(vec![lat.mode(1), lat.mode(2)], vec![lat.mode(3), lat.mode(5)]);
        let a = estimate_moment(&view, &idx).unwrap();
        let b = estimate_moment(&view, &idx.conj()).unwrap();
        assert_eq!(a.value, b.value.conj());
        assert_eq!(a.stderr(), b.stderr());
        let s = estimate_moment(&view, &MomentIndex::second(lat.mode(4))).unwrap();
        assert_eq!(s.value.im, 0.0);
    }

    #[test]
    fn estimates_need_two_samples_and_known_modes() {
        let sys = nine_modes();
        let (ens, ..) = ou_ensemble(&sys, 1, 1);
        let view = EnsembleView::at(&ens, sys.lattice(), 0).unwrap();
        let k = sys.lattice().mode(0);
        assert!(matches!(
            estimate_moment(&view, &MomentIndex::second(k)),
            Err(MomentsError::InsufficientSamples { got: 1, needed: 2 })
        ));
        let far = ModeIndex::new(&[5, 5]).unwrap();
        assert!(matches!(
            estimate_moment(&view, &MomentIndex::second(far)),
            Err(MomentsError::Lattice(_))
        ));
        assert!(EnsembleView::at(&ens, sys.lattice(), 9).is_err());
    }

    #[test]
    fn ou_second_and_cross_moments() {
        let sys = nine_modes();
        let (ens, gamma, b) = ou_ensemble(&sys, 4000, 2);
        let view = EnsembleView::at(&ens, sys.lattice(), 1).unwrap();
        for k in 0..sys.len() {
            let e = view.estimate_positions(&[k], &[k]).unwrap();
            let want = b[k] * b[k] / gamma[k];
            assert!((e.value.re - want).abs() < 3.5 * e.stderr_re, "mode {k}");
        }
        let e = view.estimate_positions(&[0, 1], &[2, 3]).unwrap();
        assert!(e.value.norm() < 3.5 * e.stderr());
    }

    #[test]
    fn chain_rhs_second_examples() {
        let sys = nine_modes();
        let k = pos(&sys, &[0, 0]);
        let gamma = vec![0.5; 9];
        let b = vec![0.3; 9];
        let real = |u: &[usize], l: &[usize]| Some(Complex64::new(1.0 + u.len() as f64 + l[0] as f64, 0.0));
        let r = chain_rhs_second(&sys, k, &real, &gamma, &b, 0.0).unwrap();
        let m = 2.0 + k as f64;
        assert!((r - (-2.0 * 0.5 * m + 2.0 * 0.09)).abs() < 1e-15);
        // real fourth moments contribute nothing
        let r2 = chain_rhs_second(&sys, k, &real, &gamma, &b, 0.7).unwrap();
        assert_eq!(r, r2);

        let missing = |u: &[usize], _: &[usize]| (u.len() == 1).then(|| Complex64::new(1.0, 0.0));
        let err = chain_rhs_second(&sys, k, &missing, &gamma, &b, 0.7).unwrap_err();
        assert!(matches!(err, MomentsError::MissingMoment(ref s) if s.contains('|')), "{err}");
    }

    #[test]
    fn chain_rhs_fourth_examples() {
        let sys = nine_modes();
        let q = *sys.table().nontrivial_at(pos(&sys, &[0, 0])).next().unwrap();
        let gamma: Vec<f64> = (0..9).map(|i| 0.1 * (i + 1) as f64).collect();
        let m = Complex64::new(0.3, -0.2);
        let lookup = |u: &[usize], _: &[usize]| Some(if u.len() == 2 { m } else { Complex64::new(0.0, 0.0) });
        let damping = gamma[q.k] + gamma[q.k1] + gamma[q.k2] + gamma[q.k3];
        for rho in [0.0, 1.3] {
            let r = chain_rhs_fourth(&sys, &q, &lookup, &gamma, rho).unwrap();
            assert!((r + damping * m).norm() < 1e-15);
        }
        let bad = Quadruplet::new(q.k, q.k3, q.k3, q.k);
        assert!(matches!(
            chain_rhs_fourth(&sys, &bad, &lookup, &gamma, 1.0),
            Err(MomentsError::RestrictionViolated(_))
        ));
    }

    #[test]
    fn fourth_moment_rhs_matches_gaussian_reduction() {
        // with Gaussian sixth moments the four sums collapse to 2 i rho (closure combination)
        let sys = ResonantSystem::new(ModeLattice::new(2, 1.0, 2.3).unwrap());
        let second: Vec<f64> = (0..sys.len()).map(|i| 0.3 + (i as f64 * 0.37).sin().abs()).collect();
        let gamma = vec![0.0; sys.len()];
        let g = GaussianMoments { second: &second };
        for k in 0..sys.len() {
            for q in sys.table().nontrivial_at(k) {
                let rate = chain_rhs_fourth(&sys, q, &g, &gamma, 0.9).unwrap();
                let want = Complex64::new(0.0, 2.0 * 0.9 * closure_combination(q, &second));
                assert!((rate - want).norm() < 1e-12, "{q:?}");
            }
        }
    }

    #[test]
    fn quasistationary_examples() {
        let q = Quadruplet::new(0, 1, 2, 3);
        let g = [0.25; 4];
        assert_eq!(quasistationary_fourth(&q, Complex64::new(0.0, 0.0), &g).unwrap(), Complex64::new(0.0, 0.0));
        assert_eq!(quasistationary_fourth(&q, Complex64::new(1.0, 0.0), &g).unwrap(), Complex64::new(1.0, 0.0));
        assert!(quasistationary_fourth(&q, Complex64::new(1.0, 0.0), &[0.0; 4]).is_err());
    }

    #[test]
    fn closure_examples() {
        let m = [2.0, 3.0, 5.0, 7.0];
        assert_eq!(qg_closure_sixth(&[0, 1, 2], &[2, 0, 1], &m), 30.0);
        assert_eq!(qg_closure_sixth(&[0, 1, 2], &[0, 1, 3], &m), 0.0);
        assert_eq!(wick_moment(&[0, 1, 2], &[2, 0, 1], &m), 30.0);
        // E|v|^4 = 2 M^2, E|v|^6 = 6 M^3
        assert_eq!(wick_moment(&[0, 0], &[0, 0], &m), 8.0);
        assert_eq!(wick_moment(&[1, 1, 1], &[1, 1, 1], &m), 162.0);
        // repeated upper modes: the printed closure over-counts
        assert_eq!(wick_moment(&[0, 0, 1], &[0, 1, 0], &m), 24.0);
        assert_eq!(qg_closure_sixth(&[0, 0, 1], &[0, 1, 0], &m), 48.0);
    }

    #[test]
    fn closed_equation_examples() {
        let sys = ResonantSystem::new(ModeLattice::new(2, 1.0, 2.3).unwrap());
        let n = sys.len();
        let gamma: Vec<f64> = (0..n).map(|i| 0.5 + 0.1 * (i % 3) as f64).collect();
        let b = vec![0.4; n];
        let second: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * (i as f64 * 0.7).cos()).collect();
        for k in 0..n {
            let r = closed_rhs_discrete(&sys, k, &second, &gamma, &b, 0.0).unwrap();
            assert_eq!(r.collision, 0.0);
            assert!((r.total() - (-2.0 * gamma[k] * second[k] + 0.32)).abs() < 1e-15);

            let flat = closed_rhs_discrete(&sys, k, &vec![0.8; n], &gamma, &b, 0.6).unwrap();
            assert!(flat.collision.abs() < 1e-14);

            // the literal composition agrees with the reduced form
            let full = closed_rhs_discrete(&sys, k, &second, &gamma, &b, 0.6).unwrap();
            let reduced = closed_collision(&sys, k, &second, &gamma, 0.6);
            assert!((full.collision - reduced).abs() < 1e-12 * reduced.abs().max(1.0), "k = {k}");
            assert_eq!(full.skipped, 0);
        }
    }

    #[test]
    fn rayleigh_jeans_combination_vanishes_on_quadruplets() {
        // no zero mode: shift the lattice off the origin by using |l|^2 + 1
        let sys = ResonantSystem::new(ModeLattice::new(2, 2.0, 2.0).unwrap());
        let lat = sys.lattice();
        let second: Vec<f64> = (0..lat.len()).map(|p| 1.0 / lat.lambda(p).max(1e-300)).collect();
        for q in sys.table().iter().filter(|q| !q.is_trivial()) {
            if [q.k, q.k1, q.k2, q.k3].iter().any(|&p| lat.lambda(p) == 0.0) {
                continue;
            }
            let c = closure_combination(q, &second);
            let scale = second[q.k] * second[q.k1] * second[q.k2];
            assert!(c.abs() <= 1e-12 * scale, "{q:?}: {c}");
        }
    }

    #[test]
    fn ou_ensemble_passes_closure_and_chain2() {
        let sys = nine_modes();
        let (ens, gamma, b) = ou_ensemble(&sys, 3000, 5);
        let view = EnsembleView::at(&ens, sys.lattice(), 0).unwrap();
        let (a, bb, c) = (pos(&sys, &[0, 0]), pos(&sys, &[1, 0]), pos(&sys, &[0, 1]));
        let report = closure_check(&view, &[([a, bb, c], [c, a, bb]), ([a, bb, c], [a, bb, pos(&sys, &[1, 1])])], 3.0).unwrap();
        assert!(report.all_pass(), "{report:?}");

        let cfg = SimConfig {
            dt: 0.01,
            horizon: 0.4,
            ensemble_size: 2000,
            seed: 3,
            stride: 10,
            ..SimConfig::default()
        };
        let ens = simulate(&sys, &cfg, &gamma, &b, &InitialCondition::Zero).unwrap();
        let report = chain2_check(&sys, &ens, &gamma, &b, 0.0, 2, 2, 3.0).unwrap();
        assert!(report.all_pass(), "{report:?}");
        assert!(chain2_check(&sys, &ens, &gamma, &b, 0.0, 1, 2, 3.0).is_err());
    }

    #[test]
    fn fourth_moment_equation_on_small_ensemble() {
        let sys = nine_modes();
        let n = sys.len();
        let gamma = vec![1.0; n];
        let b = vec![0.8; n];
        let cfg = SimConfig {
            rho: 0.8,
            dt: 0.005,
            horizon: 0.6,
            ensemble_size: 3000,
            seed: 17,
            stride: 20,
            ..SimConfig::default()
        };
        let ens = simulate(&sys, &cfg, &gamma, &b, &InitialCondition::Zero).unwrap();
        let quads: Vec<Quadruplet> = sys.table().nontrivial_at(pos(&sys, &[0, 0])).copied().take(4).collect();
        let report = chain4_check(&sys, &ens, &quads, &gamma, 0.8, 3, 2, 3.5).unwrap();
        assert!(report.all_pass(), "{report:#?}");
    }

    proptest! {
        #[test]
        fn closed_collision_is_symmetric_in_k1_k2(seed in 0u64..1000) {
            let sys = nine_modes();
            let second: Vec<f64> = (0..9).map(|i| 0.5 + ((i as u64 * 7 + seed) % 11) as f64 / 10.0).collect();
            for k in 0..9 {
                for q in sys.table().nontrivial_at(k) {
                    let swapped = Quadruplet::new(q.k2, q.k1, q.k3, q.k);
                    prop_assert_eq!(closure_combination(q, &second), closure_combination(&swapped, &second));
                }
            }
        }

        #[test]
        fn printed_closure_equals_wick_for_distinct_upper(
            upper in proptest::sample::subsequence((0usize..6).collect::<Vec<_>>(), 3),
            lower in proptest::collection::vec(0usize..6, 3),
        ) {
            let m = [0.5, 1.5, 2.0, 0.7, 1.1, 3.0];
            let u = [upper[0], upper[1], upper[2]];
            let l = [lower[0], lower[1], lower[2]];
            let (a, b) = (qg_closure_sixth(&u, &l, &m), wick_moment(&u, &l, &m));
            prop_assert!((a - b).abs() <= 1e-14 * b.abs());
        }
    }
}
