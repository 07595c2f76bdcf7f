use std::path::PathBuf;

use clap::{Args, Subcommand};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use wavekin::kinetic::{
    collision_integrals, evolve_spectrum, kz_exponents, stationarity_scan, x_of_sigma, EvolveOptions, Extension,
    KineticConfig, KineticError, SpectrumFn,
};

use crate::config::{decode, list, load_table, set};
use crate::run::{io_error, out_dir, usage, CliError, CliResult, Run};

#[derive(Subcommand, Debug, Clone)]
pub enum KineticCommand {
    /// Collision residual of `k^sigma` over a grid of exponents.
    Scan(ScanArgs),
    /// Time-step the kinetic equation on a radial grid.
    Evolve(EvolveArgs),
    /// Collision residuals of the two Rayleigh-Jeans spectra.
    RjCheck(CommonArgs),
    /// Print the Kolmogorov-Zakharov and Rayleigh-Jeans exponents.
    KzExponents(ExponentArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML file with a `[kinetic]` table; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<i64>,
    #[arg(long)]
    pub m: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub eps4: Option<f64>,
    /// Constant area factor (default: unit-ball volume in dimension 2d - 1).
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub k_min: Option<f64>,
    #[arg(long)]
    pub k_max: Option<f64>,
    /// Evaluation point (default: the geometric mid-window point).
    #[arg(long)]
    pub k_eval: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ScanArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Exponents to scan, comma separated (default: the first KZ exponent +- 0.5 in steps of 0.125).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub sigmas: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone)]
pub struct EvolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub record_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ExponentArgs {
    #[arg(long)]
    pub d: i64,
    /// Damping exponent, an integer or a fraction such as `1/2`.
    #[arg(long, allow_hyphen_values = true)]
    pub m: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved parameters of the continuum commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticParams {
    pub d: i64,
    pub m: f64,
    pub eps: f64,
    pub eps4: f64,
    pub phi: Option<f64>,
    pub k_min: f64,
    pub k_max: f64,
    pub k_eval: Option<f64>,
    pub samples: usize,
    pub seed: u64,
    pub sigmas: Option<Vec<f64>>,
    pub evolve: EvolveParams,
}

impl Default for KineticParams {
    fn default() -> Self {
        let c = KineticConfig::new(2, 0.0);
        Self {
            d: 2,
            m: 0.0,
            eps: c.eps,
            eps4: c.eps4,
            phi: None,
            k_min: c.k_min,
            k_max: c.k_max,
            k_eval: None,
            samples: c.samples,
            seed: c.seed,
            sigmas: None,
            evolve: EvolveParams::default(),
        }
    }
}

/// Forced-dissipative set-up of `evolve`: forcing `b^2` on `[force_lo, force_hi]`,
/// linear damping `eps1 + eps2 k^beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveParams {
    pub nodes: usize,
    pub k_lo: f64,
    pub k_hi: f64,
    pub initial: f64,
    pub forcing: f64,
    pub force_lo: f64,
    pub force_hi: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub beta: f64,
    pub dt: f64,
    pub steps: usize,
    pub record_every: usize,
    pub floor: f64,
    pub bound: f64,
}

impl Default for EvolveParams {
    fn default() -> Self {
        let o = EvolveOptions::default();
        Self {
            nodes: 32,
            k_lo: 0.1,
            k_hi: 10.0,
            initial: 0.1,
            forcing: 0.1,
            force_lo: 0.8,
            force_hi: 1.25,
            eps1: 0.01,
            eps2: 0.01,
            beta: 2.0,
            dt: o.dt,
            steps: o.steps,
            record_every: o.record_every,
            floor: o.floor,
            bound: o.bound,
        }
    }
}

impl KineticParams {
    fn config(&self) -> CliResult<KineticConfig> {
        if self.d != 2 {
            return Err(usage(KineticError::UnsupportedDimension(self.d.max(0) as usize)));
        }
        let mut c = KineticConfig::new(2, self.m);
        c.eps = self.eps;
        c.eps4 = self.eps4;
        if let Some(phi) = self.phi {
            c.phi_const = phi;
        }
        c.k_min = self.k_min;
        c.k_max = self.k_max;
        c.samples = self.samples;
        c.seed = self.seed;
        c.validate().map_err(usage)?;
        Ok(c)
    }

    fn k_eval(&self) -> f64 {
        self.k_eval.unwrap_or((self.k_min * self.k_max).sqrt())
    }
}

fn resolve(common: &CommonArgs, extra: impl FnOnce(&mut toml::Table) -> CliResult<()>) -> CliResult<KineticParams> {
    let mut file = load_table(common.config.as_deref())?;
    let mut t = match file.remove("kinetic") {
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(usage("`kinetic` must be a table")),
        None => toml::Table::new(),
    };
    if let Some(k) = file.keys().next() {
        return Err(usage(format!("unknown section `{k}` (expected [kinetic])")));
    }
    set(&mut t, "", "d", common.d)?;
    set(&mut t, "", "m", common.m)?;
    set(&mut t, "", "eps", common.eps)?;
    set(&mut t, "", "eps4", common.eps4)?;
    set(&mut t, "", "phi", common.phi)?;
    set(&mut t, "", "k_min", common.k_min)?;
    set(&mut t, "", "k_max", common.k_max)?;
    set(&mut t, "", "k_eval", common.k_eval)?;
    set(&mut t, "", "samples", common.samples.map(|s| s as i64))?;
    set(&mut t, "", "seed", common.seed.map(|s| s as i64))?;
    extra(&mut t)?;
    decode(t)
}

fn kinetic_error(e: KineticError) -> CliError {
    match e {
        KineticError::Unstable { .. } => CliError::Numerical(e.to_string()),
        other => usage(other),
    }
}

pub fn run(cmd: KineticCommand) -> CliResult<()> {
    match cmd {
        KineticCommand::Scan(a) => {
            let p = resolve(&a.common, |t| set(t, "", "sigmas", list(a.sigmas.clone())))?;
            let mut run = Run::start(out_dir(a.common.out.clone()), "kinetic-scan", &p, Some(p.seed))?;
            let r = scan(&p, &mut run);
            run.finish(r)
        }
        KineticCommand::RjCheck(a) => {
            let p = resolve(&a, |_| Ok(()))?;
            let mut run = Run::start(out_dir(a.out.clone()), "kinetic-rj-check", &p, Some(p.seed))?;
            let r = rj_check(&p, &mut run);
            run.finish(r)
        }
        KineticCommand::Evolve(a) => {
            let p = resolve(&a.common, |t| {
                set(t, "evolve", "nodes", a.nodes.map(|n| n as i64))?;
                set(t, "evolve", "dt", a.dt)?;
                set(t, "evolve", "steps", a.steps.map(|n| n as i64))?;
                set(t, "evolve", "record_every", a.record_every.map(|n| n as i64))
            })?;
            let mut run = Run::start(out_dir(a.common.out.clone()), "kinetic-evolve", &p, Some(p.seed))?;
            let r = evolve(&p, &mut run);
            run.finish(r)
        }
        KineticCommand::KzExponents(a) => {
            let m: Ratio<i64> = a.m.trim().parse().map_err(|_| usage(format!("bad exponent m = `{}`", a.m)))?;
            let mut run = Run::start(out_dir(a.out.clone()), "kinetic-kz-exponents", &(a.d, a.m.clone()), None)?;
            let e = kz_exponents(a.d, m);
            println!("({}, {})", e.kz_first, e.kz_second);
            println!("Rayleigh-Jeans: ({}, {})", e.rayleigh_jeans.0, e.rayleigh_jeans.1);
            let r = run.json("exponents.json", &e);
            run.finish(r)
        }
    }
}

#[derive(Serialize)]
struct DipReport {
    k_eval: f64,
    samples: u64,
    kz_first: f64,
    /// Smallest |residual| over the whole grid.
    minimum_sigma: f64,
    dips: Vec<f64>,
    separation_below: Option<f64>,
    separation_above: Option<f64>,
    pass: bool,
}

fn scan(p: &KineticParams, run: &mut Run) -> CliResult<()> {
    let config = p.config()?;
    let kz = -(p.m + 3.0 * p.d as f64 - 2.0) / 3.0;
    let sigmas = p
        .sigmas
        .clone()
        .unwrap_or_else(|| (-4..=4).map(|i| kz + 0.125 * i as f64).collect());
    let report = stationarity_scan(&sigmas, p.k_eval(), &config).map_err(kinetic_error)?;
    let path = run.dir().join("scan.csv");
    let err = |e: csv::Error| io_error(&path, e);
    let mut w = run.csv("scan.csv")?;
    w.write_record(["sigma", "x", "residual", "stderr"]).map_err(err)?;
    for row in &report.rows {
        w.write_record([
            row.sigma.to_string(),
            x_of_sigma(row.sigma, p.m, p.d as f64).to_string(),
            row.residual.to_string(),
            row.stderr.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;

    let min = report.minimum();
    let step = sigmas.windows(2).map(|w| (w[1] - w[0]).abs()).fold(f64::INFINITY, f64::min);
    let at_kz = (0..report.rows.len()).find(|&i| (report.rows[i].sigma - kz).abs() <= 0.5 * step);
    let dips = report.dips();
    let (below, above) = match at_kz {
        Some(i) if i > 0 && i + 1 < report.rows.len() => {
            (Some(report.separation(i, i - 1)), Some(report.separation(i, i + 1)))
        }
        _ => (None, None),
    };
    let pass = at_kz.is_some_and(|i| dips.contains(&i))
        && below.is_some_and(|s| s >= 3.0)
        && above.is_some_and(|s| s >= 3.0);
    let dip = DipReport {
        k_eval: report.k_eval,
        samples: report.samples,
        kz_first: kz,
        minimum_sigma: report.rows[min].sigma,
        dips: dips.into_iter().map(|i| report.rows[i].sigma).collect(),
        separation_below: below,
        separation_above: above,
        pass,
    };
    run.json("dip.json", &dip)?;
    for row in &report.rows {
        println!("sigma = {:+.4}: residual {:+.5e} +- {:.1e}", row.sigma, row.residual, row.stderr);
    }
    println!("local dips at {:?} (KZ exponent {kz:.4})", dip.dips);
    if pass {
        Ok(())
    } else {
        Err(CliError::Statistical(
            "no dip resolved at the KZ exponent (it must be an interior grid point below both neighbours by >= 3 stderr)".into(),
        ))
    }
}

#[derive(Serialize)]
struct RjRow {
    sigma: f64,
    residual: f64,
    stderr: f64,
    pass: bool,
}

fn rj_check(p: &KineticParams, run: &mut Run) -> CliResult<()> {
    let config = p.config()?;
    let sigmas = [0.0, -2.0];
    let spectra: Vec<SpectrumFn> = sigmas
        .iter()
        .map(|&s| SpectrumFn::power_law(1.0, s, config.k_min, config.k_max))
        .collect::<Result<_, _>>()
        .map_err(usage)?;
    let est = collision_integrals(p.k_eval(), &spectra, &config).map_err(kinetic_error)?;
    let rows: Vec<RjRow> = sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let (r, se) = (est.value(i), est.stderr(i));
            // an exact zero has zero sample variance
            RjRow {
                sigma,
                residual: r,
                stderr: se,
                pass: r.abs() <= 3.0 * se || r.abs() <= 1e-12,
            }
        })
        .collect();
    for r in &rows {
        println!("n = k^{}: residual {:+.3e} +- {:.1e} {}", r.sigma, r.residual, r.stderr, if r.pass { "pass" } else { "FAIL" });
    }
    let pass = rows.iter().all(|r| r.pass);
    #[derive(Serialize)]
    struct Out {
        k_eval: f64,
        samples: u64,
        rows: Vec<RjRow>,
        pass: bool,
    }
    run.json(
        "rj_check.json",
        &Out {
            k_eval: p.k_eval(),
            samples: est.samples(),
            rows,
            pass,
        },
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Statistical("Rayleigh-Jeans residual outside Monte Carlo error".into()))
    }
}

fn evolve(p: &KineticParams, run: &mut Run) -> CliResult<()> {
    let mut config = p.config()?;
    config.extension = Extension::Reject;
    let e = &p.evolve;
    let n0 = SpectrumFn::sampled(e.k_lo, e.k_hi, e.nodes, |_| e.initial).map_err(usage)?;
    let options = EvolveOptions {
        dt: e.dt,
        steps: e.steps,
        floor: e.floor,
        bound: e.bound,
        record_every: e.record_every,
    };
    let ev = evolve_spectrum(
        &n0,
        |k| e.eps1 + e.eps2 * k.powf(e.beta),
        |k| if (e.force_lo..=e.force_hi).contains(&k) { e.forcing } else { 0.0 },
        &config,
        &options,
    )
    .map_err(kinetic_error)?;
    let path = run.dir().join("evolution.csv");
    let err = |e: csv::Error| io_error(&path, e);
    let mut w = run.csv("evolution.csv")?;
    w.write_record(["step", "time", "k", "n"]).map_err(err)?;
    for (step, profile) in &ev.profiles {
        for (k, n) in ev.nodes.iter().zip(profile) {
            w.write_record([step.to_string(), (*step as f64 * e.dt).to_string(), k.to_string(), n.to_string()])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    #[derive(Serialize)]
    struct Summary {
        clamped: usize,
        rejected_fraction: f64,
        relative_drift_last_tenth: f64,
    }
    let s = Summary {
        clamped: ev.clamped,
        rejected_fraction: ev.rejected_fraction,
        relative_drift_last_tenth: ev.relative_drift(0.1),
    };
    println!(
        "{} steps on {} nodes: {} clamps, {:.1}% samples off-grid, relative drift over the last tenth {:.2e}",
        e.steps,
        ev.nodes.len(),
        s.clamped,
        100.0 * s.rejected_fraction,
        s.relative_drift_last_tenth
    );
    run.json("evolve_summary.json", &s)
}
