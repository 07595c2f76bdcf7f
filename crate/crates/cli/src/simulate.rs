use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use wavekin::effective::{
    simulate, DampingProfile, EffectiveError, Ensemble, ForcingProfile, InitialCondition, ResonantSystem, SimConfig,
    Snapshot, Trajectory, DEFAULT_BLOWUP_BOUND,
};
use wavekin::lattice::ModeLattice;
use wavekin::moments::EnsembleView;

use crate::config::{decode, list, load_table, set};
use crate::run::{csv_hash, io_error, out_dir, read_manifest, usage, CliError, CliResult, Run};

pub const SNAPSHOTS: &str = "snapshots.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Effective,
    Full,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    /// TOML experiment file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Fast-rotation parameters for `--mode full`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub nu: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub d: usize,
    #[serde(rename = "L")]
    pub scale: f64,
    #[serde(rename = "K")]
    pub cutoff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub rho: f64,
    pub dt: f64,
    pub horizon: f64,
    pub ensemble_size: usize,
    pub seed: u64,
    pub stride: usize,
    pub blowup_bound: f64,
    pub average_from: Option<f64>,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        let c = SimConfig::default();
        Self {
            rho: c.rho,
            dt: c.dt,
            horizon: c.horizon,
            ensemble_size: c.ensemble_size,
            seed: c.seed,
            stride: c.stride,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            average_from: None,
        }
    }
}

impl DynamicsSection {
    pub fn sim_config(&self, nu: Option<f64>) -> SimConfig {
        SimConfig {
            rho: self.rho,
            dt: self.dt,
            horizon: self.horizon,
            ensemble_size: self.ensemble_size,
            seed: self.seed,
            nu_fast: nu,
            stride: self.stride,
            blowup_bound: self.blowup_bound,
            average_from: self.average_from,
        }
    }
}

fn default_initial() -> InitialCondition {
    InitialCondition::Zero
}

/// The fully resolved experiment, echoed into the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub nu: Vec<f64>,
    pub lattice: LatticeSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    pub damping: DampingProfile,
    pub forcing: ForcingProfile,
    #[serde(default = "default_initial")]
    pub initial: InitialCondition,
}

pub struct Setup {
    pub system: ResonantSystem,
    pub gamma: Vec<f64>,
    pub b: Vec<f64>,
}

impl SimulateParams {
    pub fn setup(&self) -> CliResult<Setup> {
        let lattice = ModeLattice::new(self.lattice.d, self.lattice.scale, self.lattice.cutoff).map_err(usage)?;
        let gamma = self.damping.rates(&lattice).map_err(usage)?;
        let b = self.forcing.amplitudes(&lattice).map_err(usage)?;
        Ok(Setup {
            system: ResonantSystem::new(lattice),
            gamma,
            b,
        })
    }
}

pub fn resolve(args: &SimulateArgs) -> CliResult<SimulateParams> {
    let mut t = load_table(Some(&args.config))?;
    set(&mut t, "", "mode", args.mode.map(|m| format!("{m:?}").to_lowercase()))?;
    set(&mut t, "", "nu", list(args.nu.clone()))?;
    set(&mut t, "dynamics", "seed", args.seed.map(|s| s as i64))?;
    set(&mut t, "dynamics", "rho", args.rho)?;
    set(&mut t, "dynamics", "dt", args.dt)?;
    set(&mut t, "dynamics", "horizon", args.horizon)?;
    set(&mut t, "dynamics", "ensemble_size", args.ensemble_size.map(|n| n as i64))?;
    decode(t)
}

fn numerical(e: EffectiveError) -> CliError {
    match e {
        EffectiveError::BlowUp { .. } => CliError::Numerical(e.to_string()),
        other => usage(other),
    }
}

#[derive(Serialize)]
struct OuMode {
    mode: String,
    expected_second: f64,
    second: f64,
    second_stderr: f64,
    expected_fourth: f64,
    fourth: f64,
    fourth_stderr: f64,
    pass: bool,
}

#[derive(Serialize)]
struct OuReport {
    tau: f64,
    samples: usize,
    tolerance_sigmas: f64,
    modes: Vec<OuMode>,
    all_pass: bool,
}

pub fn run(args: SimulateArgs) -> CliResult<()> {
    let params = resolve(&args)?;
    let mut run = Run::start(out_dir(args.out.clone()), "simulate", &params, Some(params.dynamics.seed))?;
    let result = execute(&params, &mut run);
    run.finish(result)
}

fn execute(params: &SimulateParams, run: &mut Run) -> CliResult<()> {
    let setup = params.setup()?;
    let eff_cfg = params.dynamics.sim_config(None);
    eff_cfg.validate().map_err(usage)?;
    match params.mode {
        Mode::Effective => {
            let ens = simulate(&setup.system, &eff_cfg, &setup.gamma, &setup.b, &params.initial).map_err(numerical)?;
            write_snapshots(run, &setup, &ens)?;
            write_spectrum(run, "spectrum.csv", &setup, &ens)?;
            if ens.mean_time_average().is_some() {
                write_time_average(run, "time_average.csv", &setup, &ens)?;
            }
            if params.dynamics.rho == 0.0 {
                return ou_check(run, &setup, &ens);
            }
            Ok(())
        }
        Mode::Full => {
            if params.nu.is_empty() {
                return Err(usage("mode = full needs at least one nu"));
            }
            let reference = simulate(&setup.system, &eff_cfg, &setup.gamma, &setup.b, &params.initial).map_err(numerical)?;
            let ref_avg = reference.mean_time_average();
            if ref_avg.is_some() {
                write_time_average(run, "time_average_effective.csv", &setup, &reference)?;
            }
            let mut trend = Vec::new();
            for &nu in &params.nu {
                let cfg = params.dynamics.sim_config(Some(nu));
                let ens = simulate(&setup.system, &cfg, &setup.gamma, &setup.b, &params.initial).map_err(numerical)?;
                write_spectrum(run, &format!("spectrum_nu_{nu}.csv"), &setup, &ens)?;
                if let (Some(r), Some(avg)) = (&ref_avg, ens.mean_time_average()) {
                    write_time_average(run, &format!("time_average_nu_{nu}.csv"), &setup, &ens)?;
                    let d = avg.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    trend.push((nu, d));
                }
            }
            if !trend.is_empty() {
                let path = run.dir().join("trend.csv");
                let mut w = run.csv("trend.csv")?;
                w.write_record(["nu", "l2_distance"]).map_err(|e| io_error(&path, e))?;
                for (nu, d) in &trend {
                    w.write_record([nu.to_string(), d.to_string()]).map_err(|e| io_error(&path, e))?;
                    println!("nu = {nu}: L2 distance to the effective spectrum {d:.6e}");
                }
                w.flush().map_err(|e| io_error(&path, e))?;
            }
            Ok(())
        }
    }
}

fn write_snapshots(run: &mut Run, setup: &Setup, ens: &Ensemble) -> CliResult<()> {
    let path = run.dir().join(SNAPSHOTS);
    let err = |e: csv::Error| io_error(&path, e);
    let mut w = run.csv(SNAPSHOTS)?;
    w.write_record(["trajectory", "snapshot", "tau", "mode", "re", "im"]).map_err(err)?;
    let lat = setup.system.lattice();
    for t in &ens.trajectories {
        for (s, snap) in t.snapshots.iter().enumerate() {
            for (k, v) in snap.v.iter().enumerate() {
                w.write_record([
                    t.id.to_string(),
                    s.to_string(),
                    snap.tau.to_string(),
                    lat.mode(k).to_string(),
                    v.re.to_string(),
                    v.im.to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| io_error(&path, e))
}

fn write_spectrum(run: &mut Run, name: &str, setup: &Setup, ens: &Ensemble) -> CliResult<()> {
    let path = run.dir().join(name);
    let err = |e: csv::Error| io_error(&path, e);
    let lat = setup.system.lattice();
    let mut w = run.csv(name)?;
    w.write_record(["tau", "mode", "modulus", "mean", "stderr"]).map_err(err)?;
    for s in 0..ens.snapshot_count() {
        let view = EnsembleView::at(ens, lat, s).map_err(usage)?;
        for k in 0..lat.len() {
            let e = view.estimate_positions(&[k], &[k]).map_err(usage)?;
            w.write_record([
                view.tau().to_string(),
                lat.mode(k).to_string(),
                lat.modulus(k).to_string(),
                e.value.re.to_string(),
                e.stderr_re.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| io_error(&path, e))
}

fn write_time_average(run: &mut Run, name: &str, setup: &Setup, ens: &Ensemble) -> CliResult<()> {
    let path = run.dir().join(name);
    let err = |e: csv::Error| io_error(&path, e);
    let lat = setup.system.lattice();
    let mut acc = vec![wavekin::stats::MeanAccumulator::new(); lat.len()];
    for t in &ens.trajectories {
        if let Some(avg) = &t.time_average {
            for (a, x) in acc.iter_mut().zip(avg) {
                a.push(*x);
            }
        }
    }
    let mut w = run.csv(name)?;
    w.write_record(["mode", "modulus", "mean", "stderr"]).map_err(err)?;
    for (k, a) in acc.iter().enumerate() {
        w.write_record([
            lat.mode(k).to_string(),
            lat.modulus(k).to_string(),
            a.mean().to_string(),
            a.stderr().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| io_error(&path, e))
}

fn ou_check(run: &mut Run, setup: &Setup, ens: &Ensemble) -> CliResult<()> {
    let sigmas = 3.0;
    let lat = setup.system.lattice();
    let view = EnsembleView::at(ens, lat, ens.snapshot_count() - 1).map_err(usage)?;
    let mut modes = Vec::new();
    for k in 0..lat.len() {
        let n = setup.b[k] * setup.b[k] / setup.gamma[k];
        let m2 = view.estimate_positions(&[k], &[k]).map_err(usage)?;
        let m4 = view.estimate_positions(&[k, k], &[k, k]).map_err(usage)?;
        let ok = |v: f64, want: f64, se: f64| (v - want).abs() <= sigmas * se;
        modes.push(OuMode {
            mode: lat.mode(k).to_string(),
            expected_second: n,
            second: m2.value.re,
            second_stderr: m2.stderr_re,
            expected_fourth: 2.0 * n * n,
            fourth: m4.value.re,
            fourth_stderr: m4.stderr_re,
            pass: ok(m2.value.re, n, m2.stderr_re) && ok(m4.value.re, 2.0 * n * n, m4.stderr_re),
        });
    }
    let all_pass = modes.iter().all(|m| m.pass);
    for m in &modes {
        println!(
            "mode {}: E|v|^2 = {:.5} (want {:.5}), E|v|^4 = {:.5} (want {:.5}) {}",
            m.mode,
            m.second,
            m.expected_second,
            m.fourth,
            m.expected_fourth,
            if m.pass { "pass" } else { "FAIL" }
        );
    }
    let report = OuReport {
        tau: view.tau(),
        samples: view.sample_count(),
        tolerance_sigmas: sigmas,
        modes,
        all_pass,
    };
    run.json("ou_check.json", &report)?;
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Statistical("OU moments differ from the closed form by more than 3 stderr".into()))
    }
}

/// Reads an effective-mode ensemble written by `simulate` back in.
pub fn load_ensemble(dir: &Path) -> CliResult<(SimulateParams, Setup, Ensemble)> {
    let manifest = read_manifest(dir, "simulate")?;
    let params: SimulateParams = serde_json::from_value(manifest.params.clone()).map_err(usage)?;
    if params.mode != Mode::Effective {
        return Err(usage("moment tests need an effective-mode ensemble"));
    }
    let path = dir.join(SNAPSHOTS);
    if csv_hash(&path)? != manifest.manifest_hash {
        return Err(usage(format!("{} does not belong to the manifest in {}", path.display(), dir.display())));
    }
    let setup = params.setup()?;
    let n = setup.system.len();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(&path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = || usage(format!("{}: malformed row {}", path.display(), line + 2));
        let id: usize = field(0).parse().map_err(|_| bad())?;
        let snap: usize = field(1).parse().map_err(|_| bad())?;
        let tau: f64 = field(2).parse().map_err(|_| bad())?;
        let re: f64 = field(4).parse().map_err(|_| bad())?;
        let im: f64 = field(5).parse().map_err(|_| bad())?;
        if id == trajectories.len() {
            trajectories.push(Trajectory {
                id,
                snapshots: Vec::new(),
                time_average: None,
            });
        }
        let t = trajectories.get_mut(id).ok_or_else(bad)?;
        if snap == t.snapshots.len() {
            t.snapshots.push(Snapshot {
                tau,
                v: Vec::with_capacity(n),
            });
        }
        let s = t.snapshots.get_mut(snap).ok_or_else(bad)?;
        if s.v.len() >= n {
            return Err(bad());
        }
        s.v.push(Complex64::new(re, im));
    }
    if trajectories.iter().any(|t| t.snapshots.iter().any(|s| s.v.len() != n)) {
        return Err(usage(format!("{}: incomplete snapshots", path.display())));
    }
    Ok((params, setup, Ensemble { trajectories }))
}
