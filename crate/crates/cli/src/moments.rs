use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use wavekin::moments::{chain2_check, chain4_check, closure_check, ChainReport, EnsembleView, MomentsError};

use crate::run::{out_dir, usage, CliError, CliResult, Run};
use crate::simulate::load_ensemble;

/// Below this many trajectories the stderr estimates behind every test are unreliable.
pub const MIN_TRAJECTORIES: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MomentTest {
    Chain2,
    Chain4,
    Closure,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MomentArgs {
    /// Output directory of a `simulate` run.
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long, value_enum)]
    pub test: MomentTest,
    /// Snapshot at the centre of the difference window (default: the middle one).
    #[arg(long)]
    pub centre: Option<usize>,
    /// Snapshots on each side of the centre.
    #[arg(long, default_value_t = 1)]
    pub half_width: usize,
    /// Snapshot for the closure test (default: the last one).
    #[arg(long)]
    pub snapshot: Option<usize>,
    /// Number of nontrivial quadruplets checked by chain4.
    #[arg(long, default_value_t = 20)]
    pub quadruplets: usize,
    /// Number of sixth moments checked by closure.
    #[arg(long, default_value_t = 40)]
    pub sixth: usize,
    #[arg(long, default_value_t = 3.0)]
    pub sigmas: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

fn moments_error(e: MomentsError) -> CliError {
    match e {
        MomentsError::InsufficientSamples { got, needed } => usage(format!(
            "ensemble has {got} samples, the test needs at least {needed}; rerun simulate with a larger ensemble_size"
        )),
        other => usage(other),
    }
}

pub fn run(args: MomentArgs) -> CliResult<()> {
    let (params, setup, ens) = load_ensemble(&args.ensemble)?;
    if ens.len() < MIN_TRAJECTORIES {
        return Err(usage(format!(
            "ensemble has {} trajectories; moment tests need at least {MIN_TRAJECTORIES} (use ensemble_size >= {MIN_TRAJECTORIES}, thousands for tight error bars)",
            ens.len()
        )));
    }
    let mut run = Run::start(out_dir(args.out.clone()), "moments", &args, Some(params.dynamics.seed))?;
    let result = (|| {
        let rho = params.dynamics.rho;
        let sys = &setup.system;
        let lat = sys.lattice();
        let report: ChainReport = match args.test {
            MomentTest::Chain2 | MomentTest::Chain4 => {
                let centre = args.centre.unwrap_or(ens.snapshot_count() / 2);
                if args.test == MomentTest::Chain2 {
                    chain2_check(sys, &ens, &setup.gamma, &setup.b, rho, centre, args.half_width, args.sigmas)
                } else {
                    let quads: Vec<_> = sys
                        .table()
                        .iter()
                        .filter(|q| !q.is_trivial())
                        .take(args.quadruplets)
                        .copied()
                        .collect();
                    chain4_check(sys, &ens, &quads, &setup.gamma, rho, centre, args.half_width, args.sigmas)
                }
                .map_err(moments_error)?
            }
            MomentTest::Closure => {
                let snap = args.snapshot.unwrap_or(ens.snapshot_count() - 1);
                let view = EnsembleView::at(&ens, lat, snap).map_err(moments_error)?;
                let n = lat.len();
                let mut indices = Vec::new();
                'outer: for a in 0..n {
                    for b in a + 1..n {
                        for c in b + 1..n {
                            if indices.len() >= args.sixth {
                                break 'outer;
                            }
                            let up = [a, b, c];
                            indices.push((up, up));
                            indices.push((up, [c, a, b]));
                        }
                    }
                }
                closure_check(&view, &indices, args.sigmas).map_err(moments_error)?
            }
        };
        let name = format!("moments_{}.json", serde_json::to_value(args.test).unwrap().as_str().unwrap());
        let failed = report.checks.iter().filter(|c| !c.pass).count();
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            report: &'a ChainReport,
            all_pass: bool,
        }
        run.json(
            &name,
            &Out {
                report: &report,
                all_pass: failed == 0,
            },
        )?;
        println!(
            "{}: {} checks, {} samples, {failed} outside {} stderr",
            report.test,
            report.checks.len(),
            report.sample_count,
            args.sigmas
        );
        if failed > 0 {
            return Err(CliError::Statistical(format!("{failed} moment checks failed")));
        }
        Ok(())
    })();
    run.finish(result)
}
