//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p wavekin --test acceptance`. A single criterion can be
//! selected by passing its label, e.g. `cargo test -p wavekin --test acceptance -- A10`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use num_rational::Ratio;
use rand::Rng;
use rand_distr::StandardNormal;

use wavekin::effective::{
    simulate, trajectory_rng, DampingProfile, ForcingProfile, InitialCondition, ResonantSystem, SimConfig,
};
use wavekin::kinetic::{
    collision_factor, kz_exponents, lattice_continuum_consistency, stationarity_scan, zakharov_bracket,
    KineticConfig, SpectrumFn,
};
use wavekin::lattice::{
    brute_force_quadruplets, count_scaling, quadruplet_count, quadruplets_at, ModeLattice, QuadrupletTable,
};
use wavekin::moments::{chain2_check, closure_check, EnsembleView};

struct Outcome {
    pass: bool,
    detail: String,
    budget: Option<Duration>,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        budget: None,
    }
}

fn within(mut o: Outcome, seconds: u64) -> Outcome {
    o.budget = Some(Duration::from_secs(seconds));
    o
}

/// Every distinct d = 2 lattice with at most `max_modes` modes. The mode set depends
/// only on the integer radius `floor((K L)^2)`, so `L = 1, K = sqrt(r2)` covers them all.
fn small_planar_lattices(max_modes: usize) -> Vec<ModeLattice> {
    let mut out = Vec::new();
    let mut last = 0;
    for r2 in 1.. {
        let lat = ModeLattice::new(2, 1.0, (r2 as f64).sqrt()).unwrap();
        if lat.len() > max_modes {
            break;
        }
        if lat.len() != last {
            last = lat.len();
            out.push(lat);
        }
    }
    out
}

fn a1() -> Outcome {
    let mut worst = 0;
    let mut checked = 0;
    for scale in [1.0, 2.0] {
        for cutoff in 1..=6 {
            let lat = ModeLattice::new(1, scale, cutoff as f64).unwrap();
            let counts = quadruplet_count(&lat);
            worst = worst.max(counts.total_nontrivial);
            checked += 1;
        }
    }
    within(
        outcome(worst == 0, format!("{checked} lattices, max nontrivial count {worst}")),
        1,
    )
}

fn a2() -> Outcome {
    let lattices = small_planar_lattices(300);
    let mut mismatches = 0;
    let mut quads = 0usize;
    for lat in &lattices {
        for k in 0..lat.len() {
            let fast: BTreeSet<_> = quadruplets_at(lat, k).into_iter().collect();
            let slow: BTreeSet<_> = brute_force_quadruplets(lat, k).into_iter().collect();
            quads += slow.len();
            if fast != slow {
                mismatches += 1;
            }
        }
    }
    let largest = lattices.last().map_or(0, |l| l.len());
    within(
        outcome(
            mismatches == 0,
            format!(
                "{} lattices up to {largest} modes, {quads} quadruplets, {mismatches} mismatching modes",
                lattices.len()
            ),
        ),
        120,
    )
}

fn a3() -> Outcome {
    let mut violations = 0;
    let mut nontrivial = 0usize;
    let mut lattices = small_planar_lattices(300);
    lattices.push(ModeLattice::new(2, 3.0, 4.0).unwrap());
    for lat in &lattices {
        let table = QuadrupletTable::build(lat);
        for q in table.iter().filter(|q| !q.is_trivial()) {
            nontrivial += 1;
            let (l, l1, l3) = (lat.mode(q.k), lat.mode(q.k1), lat.mode(q.k3));
            if (l1 - l).dot(&(l1 - l3)) != 0 {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0 && nontrivial > 0,
        format!("{nontrivial} nontrivial quadruplets, {violations} violations"),
    )
}

fn a4() -> Outcome {
    let scales: Vec<f64> = (1..=6).map(f64::from).collect();
    let r = count_scaling(2, 2.0, &scales, &[1.0, 0.0]).unwrap();
    outcome(
        (2.6..=3.4).contains(&r.slope),
        format!("k = (1, 0), K = 2, counts {:?}, slope {:.3} (band [2.6, 3.4])", r.counts, r.slope),
    )
}

fn random_state(n: usize, amplitude: f64, seed: u64) -> Vec<Complex64> {
    let mut rng = trajectory_rng(seed, 0);
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * amplitude
        })
        .collect()
}

fn a5() -> Outcome {
    let lat = ModeLattice::new(2, 1.0, 8f64.sqrt()).unwrap();
    assert_eq!(lat.len(), 25);
    let lambda: Vec<f64> = (0..lat.len()).map(|p| lat.lambda(p)).collect();
    let sys = ResonantSystem::new(lat);
    let rho = 0.7;
    let v = random_state(sys.len(), 1.0, 11);
    let drift = sys.nonlinear_drift(&v, rho).unwrap();
    // d/dtau of sum w |v|^2 is 2 Re sum w conj(v) drift
    let rate = |w: &dyn Fn(usize) -> f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..v.len() {
            let t = v[k].conj() * drift[k] * w(k);
            num += t.re;
            den += t.norm();
        }
        (num / den).abs()
    };
    let mass = rate(&|_| 1.0);
    let energy = rate(&|k| lambda[k]);

    // -2 i rho dH/dconj(v) with dH/dconj(v) = (dH/dx + i dH/dy) / 2
    let h = 1e-5;
    let (mut err, mut norm) = (0.0f64, 0.0f64);
    for k in 0..v.len() {
        let mut grad = Complex64::new(0.0, 0.0);
        for (dir, unit) in [(0, Complex64::new(1.0, 0.0)), (1, Complex64::new(0.0, 1.0))] {
            let mut plus = v.clone();
            let mut minus = v.clone();
            plus[k] += unit * h;
            minus[k] -= unit * h;
            let d = (sys.hamiltonian_res(&plus).unwrap() - sys.hamiltonian_res(&minus).unwrap()) / (2.0 * h);
            if dir == 0 {
                grad.re = d / 2.0;
            } else {
                grad.im = d / 2.0;
            }
        }
        let fd = Complex64::new(0.0, -2.0 * rho) * grad;
        err = err.max((fd - drift[k]).norm());
        norm = norm.max(drift[k].norm());
    }
    let grad_rel = err / norm;
    outcome(
        mass <= 1e-10 && energy <= 1e-10 && grad_rel <= 1e-6,
        format!(
            "25 modes: mass rate {mass:.1e}, energy rate {energy:.1e} (<= 1e-10); gradient rel. error {grad_rel:.1e} (<= 1e-6)"
        ),
    )
}

fn ou_setup() -> (ResonantSystem, Vec<f64>, Vec<f64>) {
    let lat = ModeLattice::new(2, 1.0, 2f64.sqrt()).unwrap();
    let gamma = DampingProfile {
        eps1: 0.5,
        eps2: 0.5,
        beta: 2.0,
    }
    .rates(&lat)
    .unwrap();
    let b = ForcingProfile::Decaying { b0: 1.0, p: 0.5 }.amplitudes(&lat).unwrap();
    (ResonantSystem::new(lat), gamma, b)
}

fn a6() -> Outcome {
    let (sys, gamma, b) = ou_setup();
    let min_gamma = gamma.iter().copied().fold(f64::INFINITY, f64::min);
    let cfg = SimConfig {
        rho: 0.0,
        dt: 0.01,
        horizon: 5.0 / min_gamma,
        ensemble_size: 1000,
        seed: 6,
        stride: 100,
        ..SimConfig::default()
    };
    let ens = simulate(&sys, &cfg, &gamma, &b, &InitialCondition::Zero).unwrap();
    let view = EnsembleView::at(&ens, sys.lattice(), ens.snapshot_count() - 1).unwrap();
    let mut worst: f64 = 0.0;
    let mut fails = 0;
    for k in 0..sys.len() {
        let n = b[k] * b[k] / gamma[k];
        let m2 = view.estimate_positions(&[k], &[k]).unwrap();
        let m4 = view.estimate_positions(&[k, k], &[k, k]).unwrap();
        for (est, want) in [(m2, n), (m4, 2.0 * n * n)] {
            let z = (est.value.re - want).abs() / est.stderr_re;
            worst = worst.max(z);
            if z > 3.0 {
                fails += 1;
            }
        }
    }
    within(
        outcome(
            fails == 0,
            format!(
                "{} modes, 1000 trajectories, tau = {:.2}: worst deviation {worst:.2} stderr (<= 3)",
                sys.len(),
                view.tau()
            ),
        ),
        60,
    )
}

fn a7() -> Outcome {
    let lat = ModeLattice::new(2, 1.0, 2f64.sqrt()).unwrap();
    let gamma = DampingProfile::constant(1.0).rates(&lat).unwrap();
    let b = ForcingProfile::Uniform { b: 1.0 }.amplitudes(&lat).unwrap();
    let sys = ResonantSystem::new(lat);
    let rho = 0.3;
    let cfg = SimConfig {
        rho,
        dt: 0.002,
        horizon: 0.6,
        ensemble_size: 8000,
        seed: 7,
        stride: 5,
        ..SimConfig::default()
    };
    let ens = simulate(&sys, &cfg, &gamma, &b, &InitialCondition::Zero).unwrap();
    let centre = ens.snapshot_count() / 2;
    let report = chain2_check(&sys, &ens, &gamma, &b, rho, centre, 10, 3.0).unwrap();
    let worst = report.checks.iter().map(|c| c.z_score()).fold(0.0, f64::max);
    within(
        outcome(
            report.all_pass(),
            format!(
                "9 modes, rho = {rho}, {} trajectories, tau = {:.2}: worst |lhs - rhs| = {worst:.2} stderr (<= 3)",
                report.sample_count, report.checks[0].tau
            ),
        ),
        600,
    )
}

fn a8() -> Outcome {
    let (sys, gamma, b) = ou_setup();
    let cfg = SimConfig {
        rho: 0.0,
        dt: 0.05,
        horizon: 1.0,
        ensemble_size: 4000,
        seed: 8,
        stride: 20,
        ..SimConfig::default()
    };
    let ens = simulate(&sys, &cfg, &gamma, &b, &InitialCondition::Stationary).unwrap();
    let view = EnsembleView::at(&ens, sys.lattice(), ens.snapshot_count() - 1).unwrap();
    let n = sys.len();
    let mut indices = Vec::new();
    for (a, c, e) in [(0, 1, 2), (1, 4, 7), (3, 4, 5), (0, 4, 8)] {
        let up = [a % n, c % n, e % n];
        // every ordering of the lower indices, plus one unmatched set
        for lower in [[up[0], up[1], up[2]], [up[2], up[0], up[1]], [up[1], up[0], up[2]]] {
            indices.push((up, lower));
        }
        indices.push((up, [up[0], up[1], (up[2] + 1) % n]));
    }
    let report = closure_check(&view, &indices, 3.0).unwrap();
    let worst = report.checks.iter().map(|c| c.z_score()).fold(0.0, f64::max);
    outcome(
        report.all_pass(),
        format!(
            "{} sixth moments, {} samples: worst deviation {worst:.2} stderr (<= 3)",
            report.checks.len(),
            report.sample_count
        ),
    )
}

fn a9() -> Outcome {
    let mut rng = trajectory_rng(9, 0);
    let mut worst_x0: f64 = 0.0;
    for _ in 0..10_000 {
        let k: [f64; 4] = std::array::from_fn(|_| 10f64.powf(rng.gen_range(-3.0..3.0)));
        worst_x0 = worst_x0.max(zakharov_bracket(0.0, k[0], k[1], k[2], k[3]).abs());
    }
    let mut worst_x2: f64 = 0.0;
    let mut worst_flat: f64 = 0.0;
    let mut worst_rj: f64 = 0.0;
    let mut quads = 0usize;
    for lat in [ModeLattice::new(2, 2.0, 3.0).unwrap(), ModeLattice::new(3, 1.0, 2.0).unwrap()] {
        let table = QuadrupletTable::build(&lat);
        let lambda: Vec<f64> = (0..lat.len()).map(|p| lat.lambda(p)).collect();
        for q in table.iter() {
            quads += 1;
            let (l, l1, l2, l3) = (lambda[q.k], lambda[q.k1], lambda[q.k2], lambda[q.k3]);
            let c = 1.7;
            worst_flat = worst_flat.max(collision_factor(c, c, c, c).abs());
            if l > 0.0 {
                let m = |x: f64| x.sqrt();
                worst_x2 = worst_x2.max(zakharov_bracket(2.0, m(l), m(l1), m(l2), m(l3)).abs());
            }
            if [l, l1, l2, l3].iter().all(|x| *x > 0.0) {
                let (n, n1, n2, n3) = (c / l, c / l1, c / l2, c / l3);
                let scale = n1 * n2 * n3 + n * n1 * n2 + n * n2 * n3 + n * n1 * n3;
                worst_rj = worst_rj.max(collision_factor(n, n1, n2, n3).abs() / scale);
            }
        }
    }
    outcome(
        worst_x0 <= 1e-12 && worst_x2 <= 1e-12 && worst_flat == 0.0 && worst_rj <= 1e-14,
        format!(
            "bracket x=0 {worst_x0:.1e}, x=2 on-shell {worst_x2:.1e}; F over {quads} quadruplets: n=C {worst_flat:.1e}, n=C/lambda {worst_rj:.1e} (relative)"
        ),
    )
}

fn a10() -> Outcome {
    let kz = -4.0 / 3.0;
    let config = KineticConfig {
        samples: 1 << 21,
        seed: 10,
        ..KineticConfig::new(2, 0.0)
    };
    let sigmas = [kz - 0.25, kz, kz + 0.25];
    let k_eval = (config.k_min * config.k_max).sqrt();
    let r = stationarity_scan(&sigmas, k_eval, &config).unwrap();
    let res: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("{:.3}: {:.4} +- {:.4}", row.sigma, row.residual, row.stderr))
        .collect();
    let (lo, hi) = (r.separation(1, 0), r.separation(1, 2));
    within(
        outcome(
            r.minimum() == 1 && lo >= 3.0 && hi >= 3.0,
            format!(
                "{} samples at k = {k_eval}: [{}]; separations {lo:.1}, {hi:.1} stderr (>= 3)",
                r.samples,
                res.join(", ")
            ),
        ),
        300,
    )
}

fn a11() -> Outcome {
    let r = |a, b| Ratio::new(a, b);
    let cases = [((2, 0), (r(-4, 3), r(-2, 1))), ((2, 2), (r(-2, 1), r(-8, 3))), ((3, 0), (r(-7, 3), r(-3, 1)))];
    let mut pass = true;
    let mut shown = Vec::new();
    for ((d, m), want) in cases {
        let e = kz_exponents(d, m);
        pass &= (e.kz_first, e.kz_second) == want && e.rayleigh_jeans == (r(0, 1), r(-2, 1));
        shown.push(format!("(d={d}, m={m}) -> ({}, {})", e.kz_first, e.kz_second));
    }
    outcome(pass, shown.join("; "))
}

fn a12() -> Outcome {
    let config = KineticConfig {
        samples: 1 << 20,
        seed: 12,
        ..KineticConfig::new(2, 0.0)
    };
    let n = SpectrumFn::Gaussian {
        amplitude: 1.0,
        width: 1.0,
    };
    let rows = lattice_continuum_consistency([1.0, 0.0], &n, 2.0, &[2.0, 4.0, 8.0], &config).unwrap();
    let pass = rows.windows(2).all(|w| w[1].discrepancy < w[0].discrepancy);
    let shown: Vec<String> = rows
        .iter()
        .map(|r| format!("L={}: {:.3e} +- {:.1e}", r.scale, r.discrepancy, r.stderr))
        .collect();
    outcome(
        pass,
        format!(
            "Gaussian spectrum, K = 2, k = (1, 0), continuum {:.4e} +- {:.1e}; discrepancy {}",
            rows[0].continuum,
            rows[0].continuum_stderr,
            shown.join(", ")
        ),
    )
}

fn a13() -> Outcome {
    let lat = ModeLattice::new(2, 1.0, 2f64.sqrt()).unwrap();
    let gamma = DampingProfile::constant(1.0).rates(&lat).unwrap();
    let b = ForcingProfile::Uniform { b: 1.0 }.amplitudes(&lat).unwrap();
    let sys = ResonantSystem::new(lat);
    let base = SimConfig {
        rho: 0.3,
        dt: 1e-3,
        horizon: 10.0,
        ensemble_size: 32,
        seed: 13,
        stride: 10_000,
        average_from: Some(2.0),
        ..SimConfig::default()
    };
    let start = Instant::now();
    let eff = simulate(&sys, &base, &gamma, &b, &InitialCondition::Zero).unwrap();
    let reference = eff.mean_time_average().unwrap();
    let mut slowest = start.elapsed();
    let mut distances = Vec::new();
    for nu in [0.1, 0.05, 0.02] {
        let t = Instant::now();
        let cfg = SimConfig {
            nu_fast: Some(nu),
            ..base.clone()
        };
        let full = simulate(&sys, &cfg, &gamma, &b, &InitialCondition::Zero).unwrap();
        let spec = full.mean_time_average().unwrap();
        let d: f64 = spec.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        distances.push((nu, d));
        slowest = slowest.max(t.elapsed());
    }
    let pass = distances.windows(2).all(|w| w[1].1 < w[0].1) && slowest < Duration::from_secs(600);
    let shown: Vec<String> = distances.iter().map(|(nu, d)| format!("nu={nu}: {d:.3e}")).collect();
    outcome(
        pass,
        format!(
            "9 modes, {} trajectories, tau in [2, 10]: L2 distance {}; slowest run {:.1} s",
            base.ensemble_size,
            shown.join(", "),
            slowest.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 13] = [
        ("A1", "d=1 resonance triviality", a1),
        ("A2", "d=2 enumerator equals brute force", a2),
        ("A3", "rectangle property", a3),
        ("A4", "count scaling", a4),
        ("A5", "conservation and Hamiltonian gradient", a5),
        ("A6", "OU baseline", a6),
        ("A7", "second-order moment chain", a7),
        ("A8", "closure calibration", a8),
        ("A9", "exact zeros", a9),
        ("A10", "KZ dip", a10),
        ("A11", "exponent formulas", a11),
        ("A12", "discrete/continuum consistency", a12),
        ("A13", "fast-rotation averaging trend", a13),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (label, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == label) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let in_time = o.budget.map_or(true, |b| elapsed <= b);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = o
            .budget
            .map(|b| format!(", budget {} s", b.as_secs()))
            .unwrap_or_default();
        println!(
            "{label} {} {name}: {} [{:.2} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
