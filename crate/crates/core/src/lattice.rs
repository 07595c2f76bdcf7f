//! Finite mode sets `k = l / L`, `|k| <= K`, and the resonant quadruplets among them.
//!
//! All resonance tests run on the integer vectors `l`: the momentum condition
//! `l1 + l2 = l + l3` and the energy condition `|l1|^2 + |l2|^2 = |l|^2 + |l3|^2`
//! are exact identities over `Z`, so nothing here compares floats.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use num_integer::Integer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default limit on the number of modes a lattice may hold.
pub const DEFAULT_MODE_CAP: usize = 1 << 20;

const NO_MODE: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("dimension must be 1, 2 or 3 (got {0})")]
    InvalidDimension(usize),
    #[error("box scale L must be positive and finite (got {0})")]
    InvalidScale(f64),
    #[error("cutoff K must be positive and finite (got {0})")]
    InvalidCutoff(f64),
    #[error("lattice would hold {count} modes, above the cap of {cap}")]
    TooManyModes { count: usize, cap: usize },
    #[error("mode {0} is not part of the lattice")]
    UnknownMode(ModeIndex),
    #[error("mode {mode} has dimension {got}, lattice has dimension {expected}")]
    DimensionMismatch {
        mode: ModeIndex,
        expected: usize,
        got: usize,
    },
    #[error("expected one value per mode ({expected}), got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shell edges must be finite, strictly increasing, start at 0 and reach the cutoff")]
    InvalidShellEdges,
    #[error("cannot parse mode index from {0:?}")]
    Parse(String),
}

/// Integer label `l` of a Fourier mode; the wavevector is `l / L`.
///
/// Unused trailing components are zero, so ordering is lexicographic on `l`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeIndex {
    l: [i64; 3],
    dim: u8,
}

impl ModeIndex {
    pub fn new(components: &[i64]) -> Result<Self, LatticeError> {
        let dim = components.len();
        if !(1..=3).contains(&dim) {
            return Err(LatticeError::InvalidDimension(dim));
        }
        let mut l = [0; 3];
        l[..dim].copy_from_slice(components);
        Ok(Self { l, dim: dim as u8 })
    }

    pub fn zero(dim: usize) -> Result<Self, LatticeError> {
        Self::new(&vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn components(&self) -> &[i64] {
        &self.l[..self.dim()]
    }

    /// `|l|^2`, i.e. `L^2 * lambda_k`.
    pub fn norm_sq(&self) -> i64 {
        self.l.iter().map(|c| c * c).sum()
    }

    pub fn dot(&self, other: &Self) -> i64 {
        self.l.iter().zip(other.l.iter()).map(|(a, b)| a * b).sum()
    }

    /// `|k| = |l| / L`.
    pub fn modulus(&self, scale: f64) -> f64 {
        (self.norm_sq() as f64).sqrt() / scale
    }

    pub fn wavevector(&self, scale: f64) -> Vec<f64> {
        self.components().iter().map(|&c| c as f64 / scale).collect()
    }

    fn raw(&self) -> [i64; 3] {
        self.l
    }

    fn from_raw(l: [i64; 3], dim: u8) -> Self {
        Self { l, dim }
    }
}

impl std::ops::Add for ModeIndex {
    type Output = ModeIndex;
    fn add(self, rhs: Self) -> Self {
        let mut l = self.l;
        for (a, b) in l.iter_mut().zip(rhs.l) {
            *a += b;
        }
        Self::from_raw(l, self.dim)
    }
}

impl std::ops::Sub for ModeIndex {
    type Output = ModeIndex;
    fn sub(self, rhs: Self) -> Self {
        let mut l = self.l;
        for (a, b) in l.iter_mut().zip(rhs.l) {
            *a -= b;
        }
        Self::from_raw(l, self.dim)
    }
}

impl fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.components().iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({self})")
    }
}

impl FromStr for ModeIndex {
    type Err = LatticeError;

    /// Parses `"1;-2"` (the CSV convention) or `"1,-2"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Result<Vec<i64>, _> = s
            .trim()
            .trim_matches(|c| c == '(' || c == ')')
            .split([';', ','])
            .map(|p| p.trim().parse::<i64>())
            .collect();
        let parts = parts.map_err(|_| LatticeError::Parse(s.to_owned()))?;
        ModeIndex::new(&parts).map_err(|_| LatticeError::Parse(s.to_owned()))
    }
}

/// The modes `{ l in Z^d : |l / L| <= K }` in lexicographic order.
#[derive(Clone, Debug)]
pub struct ModeLattice {
    dim: usize,
    scale: f64,
    cutoff: f64,
    radius_sq: i64,
    radius: i64,
    modes: Vec<ModeIndex>,
    // dense position table over the bounding box [-radius, radius]^dim
    lookup: Vec<u32>,
    shell_edges: Vec<f64>,
}

impl ModeLattice {
    pub fn new(dim: usize, scale: f64, cutoff: f64) -> Result<Self, LatticeError> {
        Self::with_cap(dim, scale, cutoff, DEFAULT_MODE_CAP)
    }

    pub fn with_cap(dim: usize, scale: f64, cutoff: f64, cap: usize) -> Result<Self, LatticeError> {
        if !(1..=3).contains(&dim) {
            return Err(LatticeError::InvalidDimension(dim));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(LatticeError::InvalidScale(scale));
        }
        if !(cutoff.is_finite() && cutoff > 0.0) {
            return Err(LatticeError::InvalidCutoff(cutoff));
        }
        let reach = cutoff * scale;
        // (K L)^2 is rounded down to the integer bound on |l|^2; the tiny slack keeps
        // exact squares such as (1.5 * 2)^2 = 9 from losing their boundary shell.
        let radius_sq = (reach * reach * (1.0 + 1e-12)).floor() as i64;
        let radius = integer_sqrt(radius_sq);
        let side = (2 * radius + 1) as usize;
        let box_size = side.pow(dim as u32);
        // Cheap guard before allocating the bounding box: the ball fills at least
        // a quarter of its box in every dimension we support.
        if box_size / 4 > cap.saturating_mul(2) {
            return Err(LatticeError::TooManyModes {
                count: box_size / 4,
                cap,
            });
        }

        let mut modes = Vec::new();
        let r = radius;
        let ranges: [std::ops::RangeInclusive<i64>; 3] = [
            -r..=r,
            if dim >= 2 { -r..=r } else { 0..=0 },
            if dim >= 3 { -r..=r } else { 0..=0 },
        ];
        for a in ranges[0].clone() {
            for b in ranges[1].clone() {
                for c in ranges[2].clone() {
                    if a * a + b * b + c * c <= radius_sq {
                        modes.push(ModeIndex::from_raw([a, b, c], dim as u8));
                    }
                }
            }
        }
        if modes.len() > cap {
            return Err(LatticeError::TooManyModes {
                count: modes.len(),
                cap,
            });
        }

        let mut lookup = vec![NO_MODE; box_size];
        for (pos, m) in modes.iter().enumerate() {
            let slot = box_slot(m.raw(), radius, dim).expect("mode inside its own bounding box");
            lookup[slot] = pos as u32;
        }

        let bins = ((reach - 1e-12).ceil() as usize).max(1);
        let shell_edges = (0..=bins).map(|i| i as f64 / scale).collect();

        Ok(Self {
            dim,
            scale,
            cutoff,
            radius_sq,
            radius,
            modes,
            lookup,
            shell_edges,
        })
    }

    /// Replaces the radial binning used by [`shell_average`].
    pub fn with_shell_edges(mut self, edges: Vec<f64>) -> Result<Self, LatticeError> {
        let valid = edges.len() >= 2
            && edges.iter().all(|e| e.is_finite())
            && edges[0] == 0.0
            && edges.windows(2).all(|w| w[0] < w[1])
            && *edges.last().unwrap() >= self.max_modulus();
        if !valid {
            return Err(LatticeError::InvalidShellEdges);
        }
        self.shell_edges = edges;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Largest admissible `|l|^2`.
    pub fn radius_sq(&self) -> i64 {
        self.radius_sq
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn mode(&self, pos: usize) -> ModeIndex {
        self.modes[pos]
    }

    pub fn shell_edges(&self) -> &[f64] {
        &self.shell_edges
    }

    /// `lambda_k = |l|^2 / L^2` for the mode at `pos`.
    pub fn lambda(&self, pos: usize) -> f64 {
        self.modes[pos].norm_sq() as f64 / (self.scale * self.scale)
    }

    pub fn modulus(&self, pos: usize) -> f64 {
        self.modes[pos].modulus(self.scale)
    }

    fn max_modulus(&self) -> f64 {
        (self.radius_sq as f64).sqrt() / self.scale
    }

    pub fn position(&self, mode: &ModeIndex) -> Option<usize> {
        if mode.dim() != self.dim {
            return None;
        }
        self.position_raw(mode.raw())
    }

    /// Like [`position`](Self::position) but with a descriptive error.
    pub fn require(&self, mode: &ModeIndex) -> Result<usize, LatticeError> {
        if mode.dim() != self.dim {
            return Err(LatticeError::DimensionMismatch {
                mode: *mode,
                expected: self.dim,
                got: mode.dim(),
            });
        }
        self.position(mode).ok_or(LatticeError::UnknownMode(*mode))
    }

    fn position_raw(&self, l: [i64; 3]) -> Option<usize> {
        let slot = box_slot(l, self.radius, self.dim)?;
        match self.lookup[slot] {
            NO_MODE => None,
            p => Some(p as usize),
        }
    }

    /// Lattice position of the physical wavevector `k`, if it is a lattice point.
    pub fn position_of_wavevector(&self, k: &[f64]) -> Option<usize> {
        if k.len() != self.dim {
            return None;
        }
        let mut l = [0i64; 3];
        for (slot, &c) in l.iter_mut().zip(k) {
            let x = c * self.scale;
            let r = x.round();
            if (x - r).abs() > 1e-9 {
                return None;
            }
            *slot = r as i64;
        }
        self.position_raw(l)
    }
}

fn box_slot(l: [i64; 3], radius: i64, dim: usize) -> Option<usize> {
    let side = 2 * radius + 1;
    let mut slot = 0i64;
    for (i, &c) in l.iter().enumerate() {
        if i >= dim {
            if c != 0 {
                return None;
            }
            continue;
        }
        if c < -radius || c > radius {
            return None;
        }
        slot = slot * side + (c + radius);
    }
    Some(slot as usize)
}

fn integer_sqrt(n: i64) -> i64 {
    if n <= 0 {
        return 0;
    }
    let mut r = (n as f64).sqrt() as i64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// A resonant 4-tuple `(k1, k2; k, k3)` stored as lattice positions:
/// `l1 + l2 = l + l3` and `|l1|^2 + |l2|^2 = |l|^2 + |l3|^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruplet {
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub k: usize,
}

impl Quadruplet {
    pub fn new(k1: usize, k2: usize, k3: usize, k: usize) -> Self {
        Self { k1, k2, k3, k }
    }

    /// `{k1, k2} = {k, k3}`: the moment attached to it is real and only shifts frequencies.
    pub fn is_trivial(&self) -> bool {
        (self.k1 == self.k && self.k2 == self.k3) || (self.k2 == self.k && self.k1 == self.k3)
    }

    /// Checks both Kronecker deltas on the integer labels.
    pub fn is_resonant(&self, lattice: &ModeLattice) -> bool {
        let [a, b, c, d] = [self.k1, self.k2, self.k3, self.k].map(|p| lattice.mode(p));
        a + b == d + c && a.norm_sq() + b.norm_sq() == d.norm_sq() + c.norm_sq()
    }
}

/// Every `(k1, k2, k3)` resonant with the lattice mode `k`, trivial ones included.
///
/// Output is sorted, so identical inputs give identical lists.
pub fn enumerate_quadruplets(
    lattice: &ModeLattice,
    k: &ModeIndex,
) -> Result<Vec<Quadruplet>, LatticeError> {
    let pos = lattice.require(k)?;
    Ok(quadruplets_at(lattice, pos))
}

/// Position-based variant of [`enumerate_quadruplets`].
pub fn quadruplets_at(lattice: &ModeLattice, k: usize) -> Vec<Quadruplet> {
    let mut out = if lattice.dim() == 2 {
        rectangle_quadruplets(lattice, k)
    } else {
        momentum_scan_quadruplets(lattice, k)
    };
    out.sort_unstable();
    out
}

// In d = 2 the two deltas reduce to (l1 - l).(l1 - l3) = 0: for k1 != k the mode k3
// sits on the lattice line through l1 orthogonal to l1 - l, and l2 = l + (l3 - l1).
fn rectangle_quadruplets(lattice: &ModeLattice, k: usize) -> Vec<Quadruplet> {
    let l = lattice.mode(k).raw();
    let r2 = lattice.radius_sq();
    let mut out = Vec::new();
    for (p1, m1) in lattice.modes().iter().enumerate() {
        let l1 = m1.raw();
        if p1 == k {
            // k1 = k forces k2 = k3.
            out.extend((0..lattice.len()).map(|p3| Quadruplet::new(k, p3, p3, k)));
            continue;
        }
        let (dx, dy) = (l1[0] - l[0], l1[1] - l[1]);
        let g = dx.abs().gcd(&dy.abs());
        let (px, py) = (-dy / g, dx / g);
        out.push(Quadruplet::new(p1, k, p1, k));
        for sign in [1i64, -1] {
            let mut t = sign;
            loop {
                let l3 = [l1[0] + t * px, l1[1] + t * py, 0];
                if l3[0] * l3[0] + l3[1] * l3[1] > r2 {
                    break;
                }
                let Some(p2) = lattice.position_raw([l[0] + t * px, l[1] + t * py, 0]) else {
                    break;
                };
                let p3 = lattice.position_raw(l3).expect("l3 lies inside the ball");
                out.push(Quadruplet::new(p1, p2, p3, k));
                t += sign;
            }
        }
    }
    out
}

// Eliminates k2 with the momentum delta and tests the energy delta; O(N^2) per mode.
fn momentum_scan_quadruplets(lattice: &ModeLattice, k: usize) -> Vec<Quadruplet> {
    let m = lattice.mode(k);
    let e = m.norm_sq();
    let mut out = Vec::new();
    for (p1, m1) in lattice.modes().iter().enumerate() {
        for (p3, m3) in lattice.modes().iter().enumerate() {
            let m2 = m + *m3 - *m1;
            if m1.norm_sq() + m2.norm_sq() != e + m3.norm_sq() {
                continue;
            }
            if let Some(p2) = lattice.position_raw(m2.raw()) {
                out.push(Quadruplet::new(p1, p2, p3, k));
            }
        }
    }
    out
}

/// Reference enumeration over all `(k1, k2, k3)` triples checking both deltas.
///
/// O(N^3) per mode, O(N^4) for the whole table; kept as the oracle for the
/// structured enumerators.
pub fn brute_force_quadruplets(lattice: &ModeLattice, k: usize) -> Vec<Quadruplet> {
    let n = lattice.len();
    // components fit in 21 bits each, so one i64 identifies a mode
    let pack = |x: [i64; 3]| (x[0] << 42) + (x[1] << 21) + x[2];
    let keys: Vec<i64> = lattice.modes().iter().map(|m| pack(m.raw())).collect();
    let es: Vec<i64> = lattice.modes().iter().map(|m| m.norm_sq()).collect();
    let (key, e) = (keys[k], es[k]);
    let mut out = Vec::new();
    for p1 in 0..n {
        for p2 in 0..n {
            let target = keys[p1] + keys[p2] - key;
            // branch-free scan so the inner loop vectorises
            let mut hit = usize::MAX;
            for (p3, &k3) in keys.iter().enumerate() {
                if k3 == target {
                    hit = p3;
                }
            }
            if hit != usize::MAX && es[hit] == es[p1] + es[p2] - e {
                out.push(Quadruplet::new(p1, p2, hit, k));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Quadruplet lists for every mode of a lattice.
#[derive(Clone, Debug)]
pub struct QuadrupletTable {
    per_mode: Vec<Vec<Quadruplet>>,
}

impl QuadrupletTable {
    pub fn build(lattice: &ModeLattice) -> Self {
        let per_mode = (0..lattice.len())
            .into_par_iter()
            .map(|k| quadruplets_at(lattice, k))
            .collect();
        Self { per_mode }
    }

    pub fn len(&self) -> usize {
        self.per_mode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_mode.is_empty()
    }

    pub fn at(&self, k: usize) -> &[Quadruplet] {
        &self.per_mode[k]
    }

    pub fn nontrivial_at(&self, k: usize) -> impl Iterator<Item = &Quadruplet> + '_ {
        self.per_mode[k].iter().filter(|q| !q.is_trivial())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Quadruplet> + '_ {
        self.per_mode.iter().flatten()
    }

    /// True if `(k1, k2; k, k3)` is a resonant quadruplet of the table.
    pub fn contains(&self, q: &Quadruplet) -> bool {
        self.per_mode
            .get(q.k)
            .is_some_and(|list| list.binary_search(q).is_ok())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ModeCount {
    pub trivial: usize,
    pub nontrivial: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QuadrupletCounts {
    pub per_mode: Vec<ModeCount>,
    pub total_trivial: usize,
    pub total_nontrivial: usize,
}

fn count_of(list: &[Quadruplet]) -> ModeCount {
    let trivial = list.iter().filter(|q| q.is_trivial()).count();
    ModeCount {
        trivial,
        nontrivial: list.len() - trivial,
    }
}

pub fn quadruplet_count(lattice: &ModeLattice) -> QuadrupletCounts {
    let per_mode: Vec<ModeCount> = (0..lattice.len())
        .into_par_iter()
        .map(|k| count_of(&quadruplets_at(lattice, k)))
        .collect();
    QuadrupletCounts {
        total_trivial: per_mode.iter().map(|c| c.trivial).sum(),
        total_nontrivial: per_mode.iter().map(|c| c.nontrivial).sum(),
        per_mode,
    }
}

/// Nontrivial quadruplet counts at a fixed physical wavevector for a family of box scales.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub wavevector: Vec<f64>,
    pub scales: Vec<f64>,
    pub counts: Vec<usize>,
    /// Least-squares slope of `ln count` against `ln L`.
    pub slope: f64,
}

/// Counts nontrivial quadruplets at the physical wavevector `k` for each `L`.
///
/// `k * L` must be a lattice point for every scale. Scales with a zero count are
/// kept in the table but left out of the fit.
pub fn count_scaling(
    dim: usize,
    cutoff: f64,
    scales: &[f64],
    k: &[f64],
) -> Result<ScalingReport, LatticeError> {
    let mut counts = Vec::with_capacity(scales.len());
    for &scale in scales {
        let lattice = ModeLattice::new(dim, scale, cutoff)?;
        let pos = lattice.position_of_wavevector(k).ok_or_else(|| {
            let l: Vec<i64> = k.iter().map(|c| (c * scale).round() as i64).collect();
            LatticeError::UnknownMode(ModeIndex::new(&l).unwrap_or(ModeIndex::from_raw([0; 3], 1)))
        })?;
        counts.push(count_of(&quadruplets_at(&lattice, pos)).nontrivial);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = scales
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(&s, &c)| (s.ln(), (c as f64).ln()))
        .unzip();
    Ok(ScalingReport {
        wavevector: k.to_vec(),
        scales: scales.to_vec(),
        counts,
        slope: crate::stats::least_squares_slope(&xs, &ys),
    })
}

/// One radial bin of a shell average. `mean` is `None` for bins without modes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Shell {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean: Option<f64>,
}

impl Shell {
    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Averages one value per mode over the lattice's radial shells `[e_i, e_{i+1})`
/// (the last shell is closed).
pub fn shell_average(lattice: &ModeLattice, values: &[f64]) -> Result<Vec<Shell>, LatticeError> {
    if values.len() != lattice.len() {
        return Err(LatticeError::LengthMismatch {
            expected: lattice.len(),
            got: values.len(),
        });
    }
    let edges = lattice.shell_edges();
    let bins = edges.len() - 1;
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (pos, &v) in values.iter().enumerate() {
        let r = lattice.modulus(pos);
        // first edge strictly above r, minus one
        let upper = edges.partition_point(|&e| e <= r);
        let bin = upper.saturating_sub(1).min(bins - 1);
        sums[bin] += v;
        counts[bin] += 1;
    }
    Ok((0..bins)
        .map(|i| Shell {
            lower: edges[i],
            upper: edges[i + 1],
            count: counts[i],
            mean: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
        })
        .collect())
}

/// Writes `k1,k2,k3,k,trivial` rows, vector components joined by `;`.
pub fn write_quadruplets_csv<W: Write>(
    lattice: &ModeLattice,
    quads: &[Quadruplet],
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "k1,k2,k3,k,trivial")?;
    for q in quads {
        writeln!(
            out,
            "{},{},{},{},{}",
            lattice.mode(q.k1),
            lattice.mode(q.k2),
            lattice.mode(q.k3),
            lattice.mode(q.k),
            u8::from(q.is_trivial())
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mode(c: &[i64]) -> ModeIndex {
        ModeIndex::new(c).unwrap()
    }

    #[test]
    fn one_dimensional_lattice() {
        let lat = ModeLattice::new(1, 1.0, 2.0).unwrap();
        let ls: Vec<i64> = lat.modes().iter().map(|m| m.components()[0]).collect();
        assert_eq!(ls, vec![-2, -1, 0, 1, 2]);
    }

    #[test]
    fn nine_and_thirteen_mode_lattices() {
        let lat = ModeLattice::new(2, 1.0, 1.5).unwrap();
        assert_eq!(lat.len(), 9);
        for c in [[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1]] {
            assert!(lat.position(&mode(&c)).is_some(), "{c:?}");
        }
        // enumeration of l1^2 + l2^2 <= 4
        let mut brute = 0;
        for a in -3i64..=3 {
            for b in -3i64..=3 {
                if a * a + b * b <= 4 {
                    brute += 1;
                }
            }
        }
        let lat = ModeLattice::new(2, 2.0, 1.0).unwrap();
        assert_eq!(lat.len(), brute);
        assert_eq!(lat.len(), 13);
    }

    #[test]
    fn modes_are_sorted_and_unique() {
        let lat = ModeLattice::new(3, 1.0, 2.2).unwrap();
        assert!(lat.modes().windows(2).all(|w| w[0] < w[1]));
        for (p, m) in lat.modes().iter().enumerate() {
            assert_eq!(lat.position(m), Some(p));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(
            ModeLattice::new(2, 0.0, 1.0).unwrap_err(),
            LatticeError::InvalidScale(0.0)
        );
        assert_eq!(
            ModeLattice::new(2, 1.0, -1.0).unwrap_err(),
            LatticeError::InvalidCutoff(-1.0)
        );
        assert_eq!(
            ModeLattice::new(4, 1.0, 1.0).unwrap_err(),
            LatticeError::InvalidDimension(4)
        );
        assert!(matches!(
            ModeLattice::with_cap(2, 1.0, 10.0, 50),
            Err(LatticeError::TooManyModes { cap: 50, .. })
        ));
        assert!(matches!(
            ModeLattice::with_cap(3, 1000.0, 1000.0, 1000),
            Err(LatticeError::TooManyModes { .. })
        ));
    }

    #[test]
    fn mode_index_text_round_trip() {
        let m = mode(&[3, -1]);
        assert_eq!(m.to_string(), "3;-1");
        assert_eq!("3;-1".parse::<ModeIndex>().unwrap(), m);
        assert_eq!("(3,-1)".parse::<ModeIndex>().unwrap(), m);
        assert!("x;1".parse::<ModeIndex>().is_err());
    }

    #[test]
    fn one_dimensional_quadruplets_are_trivial() {
        for (scale, cutoff) in [(1.0, 4.0), (2.0, 3.0), (3.0, 1.0)] {
            let lat = ModeLattice::new(1, scale, cutoff).unwrap();
            for k in 0..lat.len() {
                let qs = quadruplets_at(&lat, k);
                assert!(qs.iter().all(|q| q.is_trivial()));
                // ordered pairs (k1, k2) that permute (k, k3): 2N - 1 of them
                assert_eq!(qs.len(), 2 * lat.len() - 1);
            }
        }
    }

    #[test]
    fn origin_sees_the_unit_rectangle() {
        let lat = ModeLattice::new(2, 1.0, 1.5).unwrap();
        let qs = enumerate_quadruplets(&lat, &mode(&[0, 0])).unwrap();
        let want = Quadruplet::new(
            lat.position(&mode(&[1, 0])).unwrap(),
            lat.position(&mode(&[0, 1])).unwrap(),
            lat.position(&mode(&[1, 1])).unwrap(),
            lat.position(&mode(&[0, 0])).unwrap(),
        );
        assert!(qs.contains(&want));
        assert!(!want.is_trivial());
    }

    #[test]
    fn rectangle_enumeration_matches_brute_force() {
        let lat = ModeLattice::new(2, 1.0, 3.0).unwrap();
        for k in 0..lat.len() {
            assert_eq!(quadruplets_at(&lat, k), brute_force_quadruplets(&lat, k), "k = {k}");
        }
        let k = lat.position(&mode(&[1, 0])).unwrap();
        let count = quadruplets_at(&lat, k).iter().filter(|q| !q.is_trivial()).count();
        let brute = brute_force_quadruplets(&lat, k)
            .iter()
            .filter(|q| !q.is_trivial())
            .count();
        assert_eq!(count, brute);
        assert!(count > 0);
    }

    #[test]
    fn three_dimensional_scan_matches_brute_force() {
        let lat = ModeLattice::new(3, 1.0, 1.8).unwrap();
        for k in 0..lat.len() {
            assert_eq!(quadruplets_at(&lat, k), brute_force_quadruplets(&lat, k));
        }
    }

    #[test]
    fn unknown_mode_is_rejected() {
        let lat = ModeLattice::new(2, 1.0, 1.0).unwrap();
        assert_eq!(
            enumerate_quadruplets(&lat, &mode(&[2, 0])).unwrap_err(),
            LatticeError::UnknownMode(mode(&[2, 0]))
        );
        assert!(matches!(
            enumerate_quadruplets(&lat, &mode(&[0])),
            Err(LatticeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn counts_split_trivial_and_nontrivial() {
        let lat = ModeLattice::new(1, 1.0, 4.0).unwrap();
        let c = quadruplet_count(&lat);
        assert_eq!(c.total_nontrivial, 0);
        assert_eq!(c.total_trivial, lat.len() * (2 * lat.len() - 1));

        let lat = ModeLattice::new(2, 1.0, 3.0).unwrap();
        let table = QuadrupletTable::build(&lat);
        assert!(table.iter().all(|q| table.contains(q)));
        let c = quadruplet_count(&lat);
        let brute: usize = (0..lat.len())
            .map(|k| brute_force_quadruplets(&lat, k).iter().filter(|q| !q.is_trivial()).count())
            .sum();
        assert_eq!(c.total_nontrivial, brute);
    }

    #[test]
    fn shell_average_basics() {
        let lat = ModeLattice::new(2, 1.0, 1.5).unwrap();
        let shells = shell_average(&lat, &vec![1.0; lat.len()]).unwrap();
        assert!(shells.iter().all(|s| s.mean.map_or(true, |m| m == 1.0)));
        assert_eq!(shells.iter().map(|s| s.count).sum::<usize>(), 9);

        // shells isolating |l| = 0, 1, sqrt 2
        let lat = lat.with_shell_edges(vec![0.0, 0.5, 1.2, 1.5, 2.0]).unwrap();
        let values: Vec<f64> = lat.modes().iter().map(|m| m.norm_sq() as f64).collect();
        let shells = shell_average(&lat, &values).unwrap();
        assert_eq!(shells[1].count, 4);
        assert_eq!(shells[1].mean, Some(1.0));
        assert_eq!(shells[2].mean, Some(2.0));
        assert_eq!(shells[3].count, 0);
        assert_eq!(shells[3].mean, None);
    }

    #[test]
    fn shell_average_checks_lengths_and_edges() {
        let lat = ModeLattice::new(2, 1.0, 1.5).unwrap();
        assert!(shell_average(&lat, &[1.0]).is_err());
        assert!(lat.clone().with_shell_edges(vec![0.0, 1.0]).is_err());
        assert!(lat.clone().with_shell_edges(vec![0.0, 1.0, 1.0, 2.0]).is_err());
        assert!(lat.with_shell_edges(vec![0.1, 2.0]).is_err());
    }

    #[test]
    fn default_shells_have_width_one_over_l() {
        let lat = ModeLattice::new(2, 4.0, 1.0).unwrap();
        let e = lat.shell_edges();
        assert_eq!(e.len(), 5);
        assert!(e.windows(2).all(|w| (w[1] - w[0] - 0.25).abs() < 1e-15));
        assert!(*e.last().unwrap() >= lat.cutoff());
    }

    #[test]
    fn csv_export_marks_trivial_rows() {
        let lat = ModeLattice::new(2, 1.0, 1.0).unwrap();
        let k = lat.position(&mode(&[0, 0])).unwrap();
        let qs = quadruplets_at(&lat, k);
        let mut buf = Vec::new();
        write_quadruplets_csv(&lat, &qs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k1,k2,k3,k,trivial"));
        assert!(lines.clone().any(|r| r == "0;0,0;1,0;1,0;0,1"));
        assert_eq!(lines.count(), qs.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn quadruplets_satisfy_both_identities_and_symmetries(
            dim in 1usize..=3,
            scale in 1u32..=3,
            cutoff in 0.8f64..2.0,
            pick in 0usize..1000,
        ) {
            let lat = ModeLattice::new(dim, scale as f64, cutoff).unwrap();
            let k = pick % lat.len();
            let qs = quadruplets_at(&lat, k);
            prop_assert_eq!(&qs, &quadruplets_at(&lat, k));
            let mut seen = std::collections::HashMap::new();
            let mut at = |p: usize| seen.entry(p).or_insert_with(|| quadruplets_at(&lat, p)).clone();
            for q in &qs {
                prop_assert!(q.is_resonant(&lat));
                // k1 <-> k2
                prop_assert!(qs.binary_search(&Quadruplet::new(q.k2, q.k1, q.k3, q.k)).is_ok());
                // (k1, k2) <-> (k, k3): the resonance seen from k1
                prop_assert!(at(q.k1).binary_search(&Quadruplet::new(q.k, q.k3, q.k2, q.k1)).is_ok());
                if dim == 2 && !q.is_trivial() {
                    let (l, l1, l3) = (lat.mode(q.k), lat.mode(q.k1), lat.mode(q.k3));
                    prop_assert_eq!((l1 - l).dot(&(l1 - l3)), 0);
                }
            }
        }
    }
}
