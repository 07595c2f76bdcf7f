use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use wavekin::lattice::{
    brute_force_quadruplets, count_scaling, quadruplets_at, write_quadruplets_csv, ModeIndex, ModeLattice, Quadruplet,
};

use crate::run::{io_error, out_dir, usage, CliError, CliResult, Run};

#[derive(Args, Debug, Clone, Serialize)]
pub struct QuadrupletArgs {
    #[arg(long)]
    pub d: usize,
    /// Box scale, or an inclusive integer range `a..b` with `--scaling`.
    #[arg(long = "L")]
    pub scale: String,
    #[arg(long = "K")]
    pub cutoff: f64,
    /// Restrict to one mode, given by its integer index, e.g. `1;0`.
    #[arg(long)]
    pub k: Option<String>,
    /// Physical wavevector for `--scaling`, e.g. `1,0`.
    #[arg(long, default_value = "1,0")]
    pub wavevector: String,
    /// Compare with the brute-force enumeration.
    #[arg(long)]
    pub oracle: bool,
    /// Fit the nontrivial count at `--wavevector` against L.
    #[arg(long)]
    pub scaling: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

fn parse_scales(text: &str) -> CliResult<Vec<f64>> {
    if let Some((a, b)) = text.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| usage(format!("bad range start in `{text}`")))?;
        let b: u32 = b.trim().parse().map_err(|_| usage(format!("bad range end in `{text}`")))?;
        if a == 0 || b < a {
            return Err(usage(format!("range `{text}` must satisfy 1 <= a <= b")));
        }
        Ok((a..=b).map(f64::from).collect())
    } else {
        Ok(vec![text.trim().parse().map_err(|_| usage(format!("bad box scale `{text}`")))?])
    }
}

#[derive(Serialize)]
struct Summary {
    d: usize,
    scale: f64,
    cutoff: f64,
    modes: usize,
    total_trivial: usize,
    total_nontrivial: usize,
    oracle_differences: Option<usize>,
}

pub fn run(args: QuadrupletArgs) -> CliResult<()> {
    let scales = parse_scales(&args.scale)?;
    let mut run = Run::start(out_dir(args.out.clone()), "quadruplets", &args, None)?;
    let result = if args.scaling {
        scaling(&args, &scales, &mut run)
    } else if scales.len() != 1 {
        Err(usage("a range of L needs --scaling"))
    } else {
        single(&args, scales[0], &mut run)
    };
    run.finish(result)
}

fn scaling(args: &QuadrupletArgs, scales: &[f64], run: &mut Run) -> CliResult<()> {
    let k: Vec<f64> = args
        .wavevector
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad wavevector `{}`", args.wavevector)))?;
    let report = count_scaling(args.d, args.cutoff, scales, &k).map_err(usage)?;
    let mut w = run.csv("scaling.csv")?;
    let path = run.dir().join("scaling.csv");
    w.write_record(["L", "nontrivial"]).map_err(|e| io_error(&path, e))?;
    for (s, c) in report.scales.iter().zip(&report.counts) {
        w.write_record([s.to_string(), c.to_string()]).map_err(|e| io_error(&path, e))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    run.json("scaling.json", &report)?;
    println!("counts {:?}, log-log slope {:.4} (target {})", report.counts, report.slope, 2 * args.d - 1);
    Ok(())
}

fn single(args: &QuadrupletArgs, scale: f64, run: &mut Run) -> CliResult<()> {
    let lattice = ModeLattice::new(args.d, scale, args.cutoff).map_err(usage)?;
    let targets: Vec<usize> = match &args.k {
        Some(k) => {
            let mode: ModeIndex = k.parse().map_err(usage)?;
            vec![lattice.require(&mode).map_err(usage)?]
        }
        None => (0..lattice.len()).collect(),
    };
    let mut all: Vec<Quadruplet> = Vec::new();
    let mut per_mode = Vec::new();
    let mut differences = 0usize;
    for &k in &targets {
        let quads = quadruplets_at(&lattice, k);
        if args.oracle {
            let fast: BTreeSet<_> = quads.iter().copied().collect();
            let slow: BTreeSet<_> = brute_force_quadruplets(&lattice, k).into_iter().collect();
            differences += fast.symmetric_difference(&slow).count();
        }
        let trivial = quads.iter().filter(|q| q.is_trivial()).count();
        per_mode.push((k, trivial, quads.len() - trivial));
        all.extend(quads);
    }

    let qpath = run.dir().join("quadruplets.csv");
    let mut w = run.csv("quadruplets.csv")?;
    let mut body = Vec::new();
    write_quadruplets_csv(&lattice, &all, &mut body).map_err(|e| io_error(&qpath, e))?;
    let mut inner = w.into_inner().map_err(|e| io_error(&qpath, e.error()))?;
    std::io::Write::write_all(&mut inner, &body).map_err(|e| io_error(&qpath, e))?;
    std::io::Write::flush(&mut inner).map_err(|e| io_error(&qpath, e))?;

    let cpath = run.dir().join("counts.csv");
    w = run.csv("counts.csv")?;
    w.write_record(["mode", "trivial", "nontrivial"]).map_err(|e| io_error(&cpath, e))?;
    for (k, t, n) in &per_mode {
        w.write_record([lattice.mode(*k).to_string(), t.to_string(), n.to_string()])
            .map_err(|e| io_error(&cpath, e))?;
    }
    w.flush().map_err(|e| io_error(&cpath, e))?;

    let summary = Summary {
        d: args.d,
        scale,
        cutoff: args.cutoff,
        modes: lattice.len(),
        total_trivial: per_mode.iter().map(|m| m.1).sum(),
        total_nontrivial: per_mode.iter().map(|m| m.2).sum(),
        oracle_differences: args.oracle.then_some(differences),
    };
    run.json("summary.json", &summary)?;
    println!(
        "{} modes, {} quadruplets: {} trivial, {} nontrivial",
        summary.modes,
        all.len(),
        summary.total_trivial,
        summary.total_nontrivial
    );
    if args.oracle {
        println!("structured vs brute force: {differences} differences");
        if differences > 0 {
            return Err(CliError::Statistical(format!(
                "structured enumeration differs from brute force in {differences} quadruplets"
            )));
        }
    }
    Ok(())
}
