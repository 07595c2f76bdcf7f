//! The cubic effective equation
//!
//! ```text
//! dv_k = ( -gamma_k v_k - i rho sum_{Q(k)} v_k1 v_k2 conj(v_k3) ) dtau + b_k dbeta_k
//! ```
//!
//! and the full fast-rotating system it averages, integrated in the interaction picture.
//! `beta_k` has independent standard Wiener real and imaginary parts, so
//! `E|beta_k(tau)|^2 = 2 tau`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{LatticeError, ModeLattice, QuadrupletTable};

pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

/// Phase advance per step above which the full-system integrator warns.
pub const PHASE_RESOLUTION_LIMIT: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EffectiveError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("expected {expected} values (one per mode), got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("damping must be positive and finite on every mode; mode {mode} has gamma = {gamma}")]
    NonPositiveDamping { mode: usize, gamma: f64 },
    #[error("forcing must be finite and non-negative; mode {mode} has b = {value}")]
    InvalidForcing { mode: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "trajectory {trajectory} blew up at step {step} (tau = {tau}): |v| = {modulus:e} on mode {mode}"
    )]
    BlowUp {
        trajectory: usize,
        step: usize,
        tau: f64,
        mode: usize,
        modulus: f64,
    },
}

/// `gamma_k = eps1 + eps2 |k|^beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampingProfile {
    pub eps1: f64,
    pub eps2: f64,
    pub beta: f64,
}

impl DampingProfile {
    pub fn constant(gamma: f64) -> Self {
        Self {
            eps1: gamma,
            eps2: 0.0,
            beta: 0.0,
        }
    }

    pub fn gamma(&self, modulus: f64) -> f64 {
        let power = if self.eps2 == 0.0 {
            0.0
        } else {
            self.eps2 * modulus.powf(self.beta)
        };
        self.eps1 + power
    }

    /// Damping rates on the lattice; every rate must be positive.
    pub fn rates(&self, lattice: &ModeLattice) -> Result<Vec<f64>, EffectiveError> {
        if !(self.eps1 >= 0.0 && self.eps2 >= 0.0 && self.beta.is_finite()) {
            return Err(EffectiveError::InvalidConfig(format!(
                "damping needs eps1, eps2 >= 0 and finite beta (got {self:?})"
            )));
        }
        (0..lattice.len())
            .map(|p| {
                let gamma = self.gamma(lattice.modulus(p));
                if gamma.is_finite() && gamma > 0.0 {
                    Ok(gamma)
                } else {
                    Err(EffectiveError::NonPositiveDamping { mode: p, gamma })
                }
            })
            .collect()
    }
}

/// Forcing amplitudes `b_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForcingProfile {
    /// `b_k = b0 (1 + |k|^2)^(-p)`.
    Decaying { b0: f64, p: f64 },
    Uniform { b: f64 },
    Zero,
    Values { b: Vec<f64> },
}

impl ForcingProfile {
    pub fn amplitudes(&self, lattice: &ModeLattice) -> Result<Vec<f64>, EffectiveError> {
        let b: Vec<f64> = match self {
            ForcingProfile::Decaying { b0, p } => (0..lattice.len())
                .map(|i| b0 * (1.0 + lattice.lambda(i)).powf(-p))
                .collect(),
            ForcingProfile::Uniform { b } => vec![*b; lattice.len()],
            ForcingProfile::Zero => vec![0.0; lattice.len()],
            ForcingProfile::Values { b } => {
                if b.len() != lattice.len() {
                    return Err(EffectiveError::LengthMismatch {
                        expected: lattice.len(),
                        got: b.len(),
                    });
                }
                b.clone()
            }
        };
        check_forcing(&b)?;
        Ok(b)
    }
}

fn check_forcing(b: &[f64]) -> Result<(), EffectiveError> {
    match b.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        Some(mode) => Err(EffectiveError::InvalidForcing {
            mode,
            value: b[mode],
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rho: f64,
    pub dt: f64,
    /// Horizon `T`.
    pub horizon: f64,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Present only for the full system.
    pub nu_fast: Option<f64>,
    /// Steps between snapshots.
    pub stride: usize,
    pub blowup_bound: f64,
    /// Start of the time-averaging window for `|v_k|^2`; `None` disables it.
    pub average_from: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rho: 0.0,
            dt: 1e-2,
            horizon: 1.0,
            ensemble_size: 1,
            seed: 0,
            nu_fast: None,
            stride: 1,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            average_from: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), EffectiveError> {
        let bad = |msg: &str| Err(EffectiveError::InvalidConfig(msg.to_owned()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.horizon.is_finite() && self.horizon >= self.dt) {
            return bad("horizon must be at least dt");
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1");
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return bad("rho must be non-negative");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if !(self.blowup_bound > 0.0) {
            return bad("blow-up bound must be positive");
        }
        if let Some(nu) = self.nu_fast {
            if !(nu.is_finite() && nu > 0.0) {
                return bad("nu_fast must be positive");
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt + 1e-9).floor() as usize
    }

    pub fn snapshot_count(&self) -> usize {
        self.steps() / self.stride + 1
    }
}

/// Amplitudes `v_k` at slow time `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub tau: f64,
    pub v: Vec<Complex64>,
}

impl FieldState {
    pub fn zeros(len: usize) -> Self {
        Self {
            tau: 0.0,
            v: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn new(v: Vec<Complex64>) -> Self {
        Self { tau: 0.0, v }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn spectrum(&self) -> Vec<f64> {
        self.v.iter().map(|z| z.norm_sqr()).collect()
    }
}

/// The resonant interaction structure of one lattice.
#[derive(Clone, Debug)]
pub struct ResonantSystem {
    lattice: ModeLattice,
    table: QuadrupletTable,
    // nontrivial (k1, k2, k3) of mode k live in terms[offsets[k]..offsets[k + 1]]
    offsets: Vec<usize>,
    terms: Vec<[u32; 3]>,
}

impl ResonantSystem {
    pub fn new(lattice: ModeLattice) -> Self {
        let table = QuadrupletTable::build(&lattice);
        let mut offsets = vec![0];
        let mut terms = Vec::new();
        for k in 0..lattice.len() {
            terms.extend(
                table
                    .nontrivial_at(k)
                    .map(|q| [q.k1 as u32, q.k2 as u32, q.k3 as u32]),
            );
            offsets.push(terms.len());
        }
        Self {
            lattice,
            table,
            offsets,
            terms,
        }
    }

    pub fn lattice(&self) -> &ModeLattice {
        &self.lattice
    }

    pub fn table(&self) -> &QuadrupletTable {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn nontrivial_count(&self) -> usize {
        self.terms.len()
    }

    fn check_len(&self, v: &[Complex64]) -> Result<(), EffectiveError> {
        if v.len() == self.len() {
            Ok(())
        } else {
            Err(EffectiveError::LengthMismatch {
                expected: self.len(),
                got: v.len(),
            })
        }
    }

    /// `H^res = 1/4 sum_k sum_{Q(k)} v_k1 v_k2 conj(v_k3) conj(v_k)`.
    pub fn hamiltonian_res(&self, v: &[Complex64]) -> Result<f64, EffectiveError> {
        self.check_len(v)?;
        let sums = self.resonant_sums(v);
        let total: Complex64 = sums.iter().zip(v).map(|(s, z)| s * z.conj()).sum();
        Ok(0.25 * total.re)
    }

    /// `S_k = sum_{Q(k)} v_k1 v_k2 conj(v_k3)`, trivial quadruplets included.
    pub fn resonant_sums(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); v.len()];
        self.resonant_sums_into(v, &mut out);
        out
    }

    fn resonant_sums_into(&self, v: &[Complex64], out: &mut [Complex64]) {
        // The trivial quadruplets (k, j, j) and (j, k, j) add up to v_k (2 |v|^2 - |v_k|^2).
        let mass: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        for (k, slot) in out.iter_mut().enumerate() {
            let mut s = v[k] * (2.0 * mass - v[k].norm_sqr());
            for &[a, b, c] in &self.terms[self.offsets[k]..self.offsets[k + 1]] {
                s += v[a as usize] * v[b as usize] * v[c as usize].conj();
            }
            *slot = s;
        }
    }

    /// `-i rho S_k`.
    pub fn nonlinear_drift(&self, v: &[Complex64], rho: f64) -> Result<Vec<Complex64>, EffectiveError> {
        self.check_len(v)?;
        let mut out = self.resonant_sums(v);
        for z in &mut out {
            *z *= Complex64::new(0.0, -rho);
        }
        Ok(out)
    }

    /// `-gamma_k v_k - i rho S_k`.
    pub fn drift(&self, v: &[Complex64], gamma: &[f64], rho: f64) -> Result<Vec<Complex64>, EffectiveError> {
        self.check_len(v)?;
        if gamma.len() != v.len() {
            return Err(EffectiveError::LengthMismatch {
                expected: v.len(),
                got: gamma.len(),
            });
        }
        let mut out = self.nonlinear_drift(v, rho)?;
        for ((o, z), g) in out.iter_mut().zip(v).zip(gamma) {
            *o -= z * *g;
        }
        Ok(out)
    }
}

/// Every momentum-conserving `(k1, k2, k3)` for each `k`, resonant or not, with the
/// detuning `lambda_k + lambda_k3 - lambda_k1 - lambda_k2` in units of `1 / L^2`.
#[derive(Clone, Debug)]
pub struct MomentumTable {
    offsets: Vec<usize>,
    terms: Vec<[u32; 3]>,
    detuning: Vec<i64>,
    max_detuning: i64,
    scale: f64,
}

impl MomentumTable {
    pub fn build(lattice: &ModeLattice) -> Self {
        let modes = lattice.modes();
        let per_mode: Vec<(Vec<[u32; 3]>, Vec<i64>)> = (0..lattice.len())
            .into_par_iter()
            .map(|k| {
                let m = modes[k];
                let mut terms = Vec::new();
                let mut detuning = Vec::new();
                for (p1, m1) in modes.iter().enumerate() {
                    for (p3, m3) in modes.iter().enumerate() {
                        let m2 = m + *m3 - *m1;
                        if let Some(p2) = lattice.position(&m2) {
                            terms.push([p1 as u32, p2 as u32, p3 as u32]);
                            detuning.push(m.norm_sq() + m3.norm_sq() - m1.norm_sq() - m2.norm_sq());
                        }
                    }
                }
                (terms, detuning)
            })
            .collect();
        let mut offsets = vec![0];
        let mut terms = Vec::new();
        let mut detuning = Vec::new();
        for (t, d) in per_mode {
            terms.extend(t);
            detuning.extend(d);
            offsets.push(terms.len());
        }
        let max_detuning = detuning.iter().map(|d| d.abs()).max().unwrap_or(0);
        Self {
            offsets,
            terms,
            detuning,
            max_detuning,
            scale: lattice.scale(),
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest `|lambda_k + lambda_k3 - lambda_k1 - lambda_k2|`.
    pub fn max_detuning(&self) -> f64 {
        self.max_detuning as f64 / (self.scale * self.scale)
    }

    /// Interaction-picture nonlinearity
    /// `-i rho sum e^{i (lambda_k + lambda_k3 - lambda_k1 - lambda_k2) tau / nu} w_k1 w_k2 conj(w_k3)`.
    pub fn interaction_drift(&self, w: &[Complex64], rho: f64, tau: f64, nu: f64) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); w.len()];
        self.interaction_drift_into(w, rho, tau, nu, &mut out);
        out
    }

    fn interaction_drift_into(&self, w: &[Complex64], rho: f64, tau: f64, nu: f64, out: &mut [Complex64]) {
        let unit = tau / (nu * self.scale * self.scale);
        let span = self.max_detuning;
        let phases: Vec<Complex64> = (-span..=span)
            .map(|d| Complex64::from_polar(1.0, d as f64 * unit))
            .collect();
        for (k, slot) in out.iter_mut().enumerate() {
            let mut s = Complex64::new(0.0, 0.0);
            for i in self.offsets[k]..self.offsets[k + 1] {
                let [a, b, c] = self.terms[i];
                let phase = phases[(self.detuning[i] + span) as usize];
                s += phase * w[a as usize] * w[b as usize] * w[c as usize].conj();
            }
            *slot = s * Complex64::new(0.0, -rho);
        }
    }
}

/// Exponential (Lawson) midpoint stepper with exact Ornstein-Uhlenbeck noise.
///
/// One step of `v' = -gamma v + N(v) + b beta'` is
///
/// ```text
/// v_half = e^{-gamma dt/2} (v + dt/2 N(v))
/// v_new  = e^{-gamma dt} v + dt e^{-gamma dt/2} N(v_half) + c (xi_re + i xi_im)
/// ```
///
/// with `c^2 = b^2 (1 - e^{-2 gamma dt}) / (2 gamma)`, which is `b^2 dt` to leading order
/// and reproduces the OU transition law exactly when `N = 0`.
#[derive(Clone, Debug)]
pub struct Integrator<'a> {
    system: &'a ResonantSystem,
    momentum: Option<MomentumTable>,
    rho: f64,
    dt: f64,
    bound: f64,
    lambda: Vec<f64>,
    decay: Vec<f64>,
    half_decay: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a> Integrator<'a> {
    /// `gamma` may contain zeros here (conservative test runs); [`DampingProfile`]
    /// is what enforces positivity for experiments.
    pub fn new(
        system: &'a ResonantSystem,
        gamma: &[f64],
        b: &[f64],
        rho: f64,
        dt: f64,
    ) -> Result<Self, EffectiveError> {
        let n = system.len();
        for x in [gamma.len(), b.len()] {
            if x != n {
                return Err(EffectiveError::LengthMismatch { expected: n, got: x });
            }
        }
        if let Some(mode) = gamma.iter().position(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(EffectiveError::NonPositiveDamping {
                mode,
                gamma: gamma[mode],
            });
        }
        check_forcing(b)?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(EffectiveError::InvalidConfig("dt must be positive".into()));
        }
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(EffectiveError::InvalidConfig("rho must be non-negative".into()));
        }
        let noise = gamma
            .iter()
            .zip(b)
            .map(|(&g, &b)| {
                let x = 2.0 * g * dt;
                // (1 - e^{-x}) / x, stable for small x
                let ratio = if x < 1e-12 { 1.0 } else { -(-x).exp_m1() / x };
                b * (dt * ratio).sqrt()
            })
            .collect();
        Ok(Self {
            system,
            momentum: None,
            rho,
            dt,
            bound: DEFAULT_BLOWUP_BOUND,
            lambda: (0..n).map(|p| system.lattice().lambda(p)).collect(),
            decay: gamma.iter().map(|g| (-g * dt).exp()).collect(),
            half_decay: gamma.iter().map(|g| (-0.5 * g * dt).exp()).collect(),
            noise,
        })
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    /// Enables [`step_full`](Self::step_full); builds the non-resonant interaction table.
    pub fn with_full_system(mut self) -> Self {
        if self.momentum.is_none() {
            self.momentum = Some(MomentumTable::build(self.system.lattice()));
        }
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Draws the `2N` standard normals of one step.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Complex64> {
        (0..self.system.len())
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im)
            })
            .collect()
    }

    /// Advances the effective equation by one step.
    pub fn step<R: Rng + ?Sized>(&self, state: &mut FieldState, rng: &mut R) -> Result<(), EffectiveError> {
        let xi = self.draw_noise(rng);
        self.step_with_noise(state, &xi)
    }

    /// [`step`](Self::step) with the normals supplied by the caller.
    pub fn step_with_noise(&self, state: &mut FieldState, xi: &[Complex64]) -> Result<(), EffectiveError> {
        self.system.check_len(&state.v)?;
        let n = state.v.len();
        let mut work = vec![Complex64::new(0.0, 0.0); n];
        let mut half = vec![Complex64::new(0.0, 0.0); n];
        let h = self.dt;
        let nonlinear = self.rho != 0.0;
        if nonlinear {
            self.system.resonant_sums_into(&state.v, &mut work);
            let c = Complex64::new(0.0, -self.rho * 0.5 * h);
            for k in 0..n {
                half[k] = self.half_decay[k] * (state.v[k] + c * work[k]);
            }
            self.system.resonant_sums_into(&half, &mut work);
        }
        let c = Complex64::new(0.0, -self.rho * h);
        for k in 0..n {
            let mut z = self.decay[k] * state.v[k] + self.noise[k] * xi[k];
            if nonlinear {
                z += self.half_decay[k] * c * work[k];
            }
            state.v[k] = z;
        }
        state.tau += h;
        Ok(())
    }

    /// Advances the full system `v' + i lambda v / nu = -gamma v - i rho sum_{momentum} ... + b beta'`
    /// by one step in the interaction picture `w_k = e^{i lambda_k tau / nu} v_k`.
    ///
    /// The state is kept in the lab frame; the fast rotation is applied exactly.
    pub fn step_full<R: Rng + ?Sized>(
        &self,
        state: &mut FieldState,
        nu: f64,
        rng: &mut R,
    ) -> Result<(), EffectiveError> {
        let xi = self.draw_noise(rng);
        self.step_full_with_noise(state, nu, &xi)
    }

    pub fn step_full_with_noise(
        &self,
        state: &mut FieldState,
        nu: f64,
        xi: &[Complex64],
    ) -> Result<(), EffectiveError> {
        self.system.check_len(&state.v)?;
        if !(nu.is_finite() && nu > 0.0) {
            return Err(EffectiveError::InvalidConfig("nu_fast must be positive".into()));
        }
        let table = self.momentum.as_ref().ok_or_else(|| {
            EffectiveError::InvalidConfig("integrator was built without the full-system table".into())
        })?;
        let n = state.v.len();
        let h = self.dt;
        let t0 = state.tau;
        let rotation = |tau: f64, k: usize| Complex64::from_polar(1.0, self.lambda[k] * tau / nu);
        let w: Vec<Complex64> = (0..n).map(|k| rotation(t0, k) * state.v[k]).collect();
        let mut work = vec![Complex64::new(0.0, 0.0); n];
        let mut half = vec![Complex64::new(0.0, 0.0); n];
        let nonlinear = self.rho != 0.0;
        if nonlinear {
            table.interaction_drift_into(&w, self.rho, t0, nu, &mut work);
            for k in 0..n {
                half[k] = self.half_decay[k] * (w[k] + 0.5 * h * work[k]);
            }
            table.interaction_drift_into(&half, self.rho, t0 + 0.5 * h, nu, &mut work);
        }
        let t1 = t0 + h;
        for k in 0..n {
            // The noise is drawn in the rotating frame. Its law is unchanged, and the
            // effective run fed the same normals is the pathwise averaged limit.
            let mut z = self.decay[k] * w[k] + self.noise[k] * xi[k];
            if nonlinear {
                z += self.half_decay[k] * h * work[k];
            }
            state.v[k] = rotation(t1, k).conj() * z;
        }
        state.tau = t1;
        Ok(())
    }

    /// Phase advanced per step by the fastest non-resonant interaction.
    pub fn phase_per_step(&self, nu: f64) -> f64 {
        let detuning = match &self.momentum {
            Some(t) => t.max_detuning(),
            None => 0.0,
        };
        self.dt * detuning / nu
    }

    fn check_bound(&self, state: &FieldState, trajectory: usize, step: usize) -> Result<(), EffectiveError> {
        for (mode, z) in state.v.iter().enumerate() {
            let modulus = z.norm();
            if !(modulus <= self.bound) {
                return Err(EffectiveError::BlowUp {
                    trajectory,
                    step,
                    tau: state.tau,
                    mode,
                    modulus,
                });
            }
        }
        Ok(())
    }
}

/// Starting data of every trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    Zero,
    Given { v: Vec<Complex64> },
    /// Independent draws from the `rho = 0` stationary law `CN(0, b_k^2 / gamma_k)`.
    Stationary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tau: f64,
    pub v: Vec<Complex64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub snapshots: Vec<Snapshot>,
    /// Mean of `|v_k|^2` over the steps with `tau >= average_from`.
    pub time_average: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub trajectories: Vec<Trajectory>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn snapshot_count(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.snapshots.len())
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        self.trajectories
            .first()
            .map(|t| t.snapshots.iter().map(|s| s.tau).collect())
            .unwrap_or_default()
    }

    /// Ensemble mean of the time-averaged spectra.
    pub fn mean_time_average(&self) -> Option<Vec<f64>> {
        let first = self.trajectories.first()?.time_average.as_ref()?;
        let mut acc = vec![0.0; first.len()];
        for t in &self.trajectories {
            for (a, x) in acc.iter_mut().zip(t.time_average.as_ref()?) {
                *a += x;
            }
        }
        let n = self.trajectories.len() as f64;
        Some(acc.into_iter().map(|a| a / n).collect())
    }
}

/// The RNG stream of trajectory `id`: a pure function of `(seed, id)`.
pub fn trajectory_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

/// Runs `ensemble_size` independent trajectories of the effective equation, or of the
/// full system when `config.nu_fast` is set.
pub fn simulate(
    system: &ResonantSystem,
    config: &SimConfig,
    gamma: &[f64],
    b: &[f64],
    initial: &InitialCondition,
) -> Result<Ensemble, EffectiveError> {
    config.validate()?;
    let mut integrator = Integrator::new(system, gamma, b, config.rho, config.dt)?.with_bound(config.blowup_bound);
    if let Some(nu) = config.nu_fast {
        integrator = integrator.with_full_system();
        let phase = integrator.phase_per_step(nu);
        if phase > PHASE_RESOLUTION_LIMIT {
            log::warn!(
                "dt * max|detuning| / nu = {phase:.3} rad per step exceeds {PHASE_RESOLUTION_LIMIT}; \
                 the oscillatory phases are under-resolved"
            );
        }
    }
    if let InitialCondition::Given { v } = initial {
        system.check_len(v)?;
    }
    if matches!(initial, InitialCondition::Stationary) {
        if let Some(mode) = gamma.iter().position(|g| *g <= 0.0) {
            return Err(EffectiveError::NonPositiveDamping {
                mode,
                gamma: gamma[mode],
            });
        }
    }
    let trajectories: Result<Vec<Trajectory>, EffectiveError> = (0..config.ensemble_size)
        .into_par_iter()
        .map(|id| run_trajectory(&integrator, config, gamma, b, initial, id))
        .collect();
    Ok(Ensemble {
        trajectories: trajectories?,
    })
}

fn run_trajectory(
    integrator: &Integrator<'_>,
    config: &SimConfig,
    gamma: &[f64],
    b: &[f64],
    initial: &InitialCondition,
    id: usize,
) -> Result<Trajectory, EffectiveError> {
    let n = gamma.len();
    let mut rng = trajectory_rng(config.seed, id);
    let mut state = match initial {
        InitialCondition::Zero => FieldState::zeros(n),
        InitialCondition::Given { v } => FieldState::new(v.clone()),
        InitialCondition::Stationary => {
            let xi = integrator.draw_noise(&mut rng);
            // each component has variance b^2 / (2 gamma)
            let v = xi
                .iter()
                .zip(gamma.iter().zip(b))
                .map(|(z, (g, b))| z * (b / (2.0 * g).sqrt()))
                .collect();
            FieldState::new(v)
        }
    };
    let steps = config.steps();
    let mut snapshots = Vec::with_capacity(config.snapshot_count());
    snapshots.push(Snapshot {
        tau: 0.0,
        v: state.v.clone(),
    });
    let mut average = config.average_from.map(|_| (vec![0.0; n], 0usize));
    let accumulate = |state: &FieldState, average: &mut Option<(Vec<f64>, usize)>| {
        if let (Some(from), Some((acc, count))) = (config.average_from, average.as_mut()) {
            if state.tau >= from - 1e-12 {
                for (a, z) in acc.iter_mut().zip(&state.v) {
                    *a += z.norm_sqr();
                }
                *count += 1;
            }
        }
    };
    accumulate(&state, &mut average);
    for step in 1..=steps {
        match config.nu_fast {
            Some(nu) => integrator.step_full(&mut state, nu, &mut rng)?,
            None => integrator.step(&mut state, &mut rng)?,
        }
        // snap tau to the grid so snapshot times do not drift
        state.tau = step as f64 * config.dt;
        integrator.check_bound(&state, id, step)?;
        accumulate(&state, &mut average);
        if step % config.stride == 0 {
            snapshots.push(Snapshot {
                tau: state.tau,
                v: state.v.clone(),
            });
        }
    }
    let time_average = average.map(|(acc, count)| {
        let c = count.max(1) as f64;
        acc.into_iter().map(|a| a / c).collect()
    });
    Ok(Trajectory {
        id,
        snapshots,
        time_average,
    })
}
