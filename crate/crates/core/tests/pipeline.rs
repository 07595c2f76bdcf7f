use wavekin::effective::{simulate, InitialCondition, ResonantSystem, SimConfig};
use wavekin::lattice::ModeLattice;
use wavekin::moments::{closed_collision, closure_check, EnsembleView};

fn system() -> ResonantSystem {
    ResonantSystem::new(ModeLattice::new(2, 1.0, 1.5).unwrap())
}

fn coefficients(n: usize) -> (Vec<f64>, Vec<f64>) {
    let gamma = (0..n).map(|i| 0.6 + 0.05 * i as f64).collect();
    let b = (0..n).map(|i| 0.9 - 0.03 * i as f64).collect();
    (gamma, b)
}

#[test]
fn trajectories_do_not_depend_on_ensemble_size() {
    let sys = system();
    let (gamma, b) = coefficients(sys.len());
    let cfg = |size| SimConfig {
        rho: 0.4,
        dt: 0.01,
        horizon: 0.5,
        ensemble_size: size,
        seed: 11,
        stride: 10,
        ..SimConfig::default()
    };
    let small = simulate(&sys, &cfg(3), &gamma, &b, &InitialCondition::Stationary).unwrap();
    let large = simulate(&sys, &cfg(6), &gamma, &b, &InitialCondition::Stationary).unwrap();
    assert_eq!(small.trajectories[..], large.trajectories[..3]);
    assert_eq!(small.snapshot_count(), 6);
}

#[test]
fn ou_ensemble_is_gaussian_and_has_no_collisions() {
    let sys = system();
    let (gamma, b) = coefficients(sys.len());
    let cfg = SimConfig {
        dt: 0.05,
        horizon: 2.0,
        ensemble_size: 3000,
        seed: 5,
        stride: 40,
        ..SimConfig::default()
    };
    let ens = simulate(&sys, &cfg, &gamma, &b, &InitialCondition::Stationary).unwrap();
    let view = EnsembleView::at(&ens, sys.lattice(), ens.snapshot_count() - 1).unwrap();
    let indices = [([0, 1, 2], [0, 1, 2]), ([3, 4, 5], [5, 3, 4]), ([2, 6, 8], [2, 6, 8])];
    let report = closure_check(&view, &indices, 4.0).unwrap();
    assert!(report.all_pass(), "{report:?}");

    // the stationary spectrum b^2/gamma fed to the closed equation
    let second: Vec<f64> = b.iter().zip(&gamma).map(|(b, g)| b * b / g).collect();
    for k in 0..sys.len() {
        assert_eq!(closed_collision(&sys, k, &second, &gamma, 0.0), 0.0);
    }
}
