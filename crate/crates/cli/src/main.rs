mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aqnn::compare::{compare, dedup_strategies, SummaryRow};
use aqnn::cubature::{adapt_integrate, write_partition_jsonl, CellRecord};
use aqnn::losses::{residual_integrand, LossTerm};
use aqnn::nn::{init_glorot, read_checkpoint, write_checkpoint};
use aqnn::oracles::{compute_oracles, ORACLE_CELLS, ORACLE_ORDER, TEST_MESH_CELLS};
use aqnn::problems::arctan_well_target;
use aqnn::sampling::{PointBudget, Strategy};
use aqnn::trainer::{
    baseline_quadrature, train, PartitionSnapshot, QuadraturePlan, RefreshEvent, StopReason, TrainHooks,
    TrainingRun, CSV_HEADER,
};
use aqnn::{Cell, FnIntegrand, Integrand, RulePair};

use config::{cell_from_bounds, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "aqnn", version, about = "Adaptive quadrature for residual-trained networks")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides output.directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Network seed; overrides net.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for loss evaluation. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Adaptive integration of a built-in integrand.
    Integrate,
    /// Train one network.
    Train,
    /// Adaptive run followed by budget-matched baselines.
    Compare {
        /// Comma-separated strategies; overrides compare.strategies.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
    },
    /// Recompute the brute-force oracle fixtures.
    GenFixtures {
        /// Cells per axis of the oracle mesh.
        #[arg(long, default_value_t = ORACLE_CELLS)]
        cells: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<aqnn::Error> for Failure {
    fn from(e: aqnn::Error) -> Self {
        match e {
            aqnn::Error::InvalidInput(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::parse("").map_err(Failure::Usage)?,
    };
    if let Some(s) = cli.seed {
        cfg.net.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.directory = o.to_string_lossy().into_owned();
    }
    if cli.threads == 0 {
        return Err(Failure::Usage("--threads must be >= 1".into()));
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenFixtures { cells } => gen_fixtures(cli, *cells),
        Command::Integrate => cmd_integrate(&load_config(cli)?),
        Command::Train => cmd_train(cli, &load_config(cli)?),
        Command::Compare { strategies } => cmd_compare(cli, &load_config(cli)?, strategies.as_deref()),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(&cfg.output.directory);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_partition(path: &Path, partition: &[CellRecord]) -> Result<(), Failure> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    write_partition_jsonl(&mut f, partition)?;
    f.flush()?;
    Ok(())
}

fn cmd_integrate(cfg: &RunConfig) -> Result<(), Failure> {
    let spec = cfg
        .integrand
        .clone()
        .ok_or_else(|| Failure::Usage("integrate needs an [integrand] block".into()))?;
    let crit = cfg.criterion().map_err(Failure::Usage)?;
    let divisions = cfg.quadrature.base_partition;
    let run = |f: &dyn Integrand, domain: &Cell| -> Result<_, Failure> {
        let pair = RulePair::new(domain.dim(), cfg.quadrature.kp, cfg.quadrature.kr)?;
        Ok(adapt_integrate(f, &domain.subdivide(divisions), &pair, &crit)?)
    };
    let result = match spec.kind.as_str() {
        "constant" => {
            let c = spec.value.unwrap_or(1.0);
            let domain = match &spec.domain {
                Some(b) => cell_from_bounds(b)?,
                None => Cell::unit(2),
            };
            run(&FnIntegrand::new(domain.dim(), move |_: &[f64]| c), &domain)?
        }
        "arctan-well" => run(&FnIntegrand::new(2, arctan_well_target), &Cell::unit(2))?,
        "residual" => {
            let problem = cfg.problem_spec().map_err(Failure::Usage)?;
            let net = match &spec.checkpoint {
                Some(p) => read_checkpoint(File::open(p).map_err(|e| Failure::Usage(format!("{p}: {e}")))?)?,
                None => init_glorot(cfg.arch().map_err(Failure::Usage)?, cfg.net.seed)?,
            };
            let f = residual_integrand(&problem, &net, LossTerm::Domain)?;
            run(&f, &problem.domain)?
        }
        other => {
            return Err(Failure::Usage(format!(
                "unknown integrand '{other}' (expected constant, arctan-well or residual)"
            )))
        }
    };
    let dir = out_dir(cfg)?;
    fs::write(dir.join("config.resolved.toml"), cfg.to_toml())?;
    write_partition(&dir.join("partition.jsonl"), &result.partition)?;
    println!("S = {:.17e}", result.integral);
    println!("E = {:.17e}", result.error_estimate);
    println!("cells = {}", result.partition.len());
    println!("evals = {}", result.evals_used);
    println!("terminated_by = {:?}", result.terminated_by);
    Ok(())
}

/// Streams one run's history, refreshes and partitions into `dir`.
fn file_hooks<'a>(dir: &Path, csv_name: &str, snapshot_every: usize) -> Result<TrainHooks<'a>, Failure> {
    fs::create_dir_all(dir)?;
    let mut csv = File::create(dir.join(csv_name))?;
    csv.write_all(format!("{CSV_HEADER}\n").as_bytes())?;
    let mut refreshes = File::create(dir.join("refreshes.jsonl"))?;
    let snap_dir = dir.join("partitions");
    let mut count = 0usize;
    Ok(TrainHooks {
        on_record: Some(Box::new(move |r| {
            // One write per row keeps the file parseable after a crash.
            let line = format!("{}\n", r.csv_row());
            if let Err(e) = csv.write_all(line.as_bytes()) {
                eprintln!("warning: history write failed: {e}");
            }
        })),
        on_refresh: Some(Box::new(move |ev: &RefreshEvent, snap: &PartitionSnapshot| {
            let line = serde_json::to_string(ev).expect("event serialises");
            let _ = refreshes.write_all(format!("{line}\n").as_bytes());
            if snapshot_every > 0 && count % snapshot_every == 0 {
                let _ = fs::create_dir_all(&snap_dir);
                for (t, part) in snap.terms.iter().enumerate().filter(|(_, p)| !p.is_empty()) {
                    let path = snap_dir.join(format!("epoch{:07}_term{t}.jsonl", snap.epoch));
                    if let Err(Failure::Runtime(e) | Failure::Usage(e)) = write_partition(&path, part) {
                        eprintln!("warning: snapshot write failed: {e}");
                    }
                }
            }
            count += 1;
        })),
        ..Default::default()
    })
}

fn finish_run(dir: &Path, run: &TrainingRun) -> Result<(), Failure> {
    write_checkpoint(File::create(dir.join("final.ckpt"))?, &run.params)?;
    let last = run.last();
    println!(
        "{}: epochs={} J={:.6e} eta={:.3e} l2_rel={:.4e} h1_rel={:.4e} points={} refreshes={} stop={:?}",
        run.strategy,
        last.epoch,
        last.loss_primal,
        last.eta,
        last.l2_rel,
        last.h1_rel,
        last.n_primal_points,
        run.refresh_count(),
        run.stop_reason
    );
    if run.stop_reason == StopReason::NonFiniteLoss {
        return Err(Failure::Runtime(format!(
            "{} run stopped on a non-finite loss at epoch {}",
            run.strategy, last.epoch
        )));
    }
    Ok(())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    let problem = cfg.problem_spec().map_err(Failure::Usage)?;
    let arch = cfg.arch().map_err(Failure::Usage)?;
    let strategy = cfg.strategy().map_err(Failure::Usage)?;
    let tcfg = cfg.trainer_config(cli.threads).map_err(Failure::Usage)?;
    let dir = out_dir(cfg)?;
    fs::write(dir.join("config.resolved.toml"), cfg.to_toml())?;
    let plan = match strategy {
        Strategy::Adaptive => QuadraturePlan::Adaptive,
        s => {
            // A standalone baseline uses the configured budget for every term.
            let q = &cfg.quadrature;
            let budget = PointBudget {
                primal_points: q.points,
                reference_points: q.points,
                uniform_partitions: q.uniform_side.pow(problem.dim() as u32),
                uniform_side: q.uniform_side,
            };
            let budgets = vec![budget; 1 + problem.faces.len()];
            QuadraturePlan::Fixed {
                strategy: s,
                quadrature: baseline_quadrature(&problem, s, &budgets, q.kp, q.kr, cfg.net.seed)?,
            }
        }
    };
    let mut hooks = file_hooks(&dir, &cfg.output.csv, cfg.output.snapshot_every)?;
    let run = train(&problem, arch, cfg.net.seed, &tcfg, &plan, &mut hooks)?;
    drop(hooks);
    finish_run(&dir, &run)
}

fn cmd_compare(cli: &Cli, cfg: &RunConfig, flag: Option<&[String]>) -> Result<(), Failure> {
    let problem = cfg.problem_spec().map_err(Failure::Usage)?;
    let arch = cfg.arch().map_err(Failure::Usage)?;
    let tcfg = cfg.trainer_config(cli.threads).map_err(Failure::Usage)?;
    let names: Vec<String> = match (flag, &cfg.compare) {
        (Some(f), _) => f.to_vec(),
        (None, Some(c)) => c.strategies.clone(),
        (None, None) => Strategy::ALL.iter().map(|s| s.name().to_string()).collect(),
    };
    let parsed = names
        .iter()
        .map(|n| n.trim().parse::<Strategy>())
        .collect::<aqnn::Result<Vec<_>>>()?;
    let (list, dropped) = dedup_strategies(&parsed);
    for d in dropped {
        eprintln!("warning: strategy '{d}' listed more than once; running it once");
    }
    let dir = out_dir(cfg)?;
    fs::write(dir.join("config.resolved.toml"), cfg.to_toml())?;
    let mut hook_err = None;
    let result = compare(&problem, arch, cfg.net.seed, &tcfg, &list, |s| {
        match file_hooks(&dir.join(s.name()), &cfg.output.csv, cfg.output.snapshot_every) {
            Ok(h) => h,
            Err(e) => {
                hook_err.get_or_insert(e);
                TrainHooks::default()
            }
        }
    })?;
    if let Some(e) = hook_err {
        return Err(e);
    }
    // Baseline quadratures are deterministic given the budgets; record them.
    let budgets = serde_json::to_string_pretty(&result.budgets).expect("budgets serialise");
    fs::write(dir.join("budgets.json"), budgets)?;
    let mut summary = String::from("strategy,final_l2_rel,final_h1_rel,n_points,wall_s,refreshes\n");
    let mut failed = None;
    for run in &result.runs {
        if let Err(e) = finish_run(&dir.join(run.strategy.name()), run) {
            failed.get_or_insert(e);
        }
        let row = SummaryRow::of(run);
        summary.push_str(&format!(
            "{},{:e},{:e},{},{:.3},{}\n",
            row.strategy, row.final_l2_rel, row.final_h1_rel, row.n_points, row.wall_s, row.refreshes
        ));
    }
    fs::write(dir.join("summary.csv"), &summary)?;
    print!("{summary}");
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn gen_fixtures(cli: &Cli, cells: usize) -> Result<(), Failure> {
    let path = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("crates/core/tests/fixtures"));
    fs::create_dir_all(&path)?;
    let fx = compute_oracles(cells, TEST_MESH_CELLS.min(cells), ORACLE_ORDER, cli.threads)?;
    let file = path.join("oracles.json");
    fs::write(&file, serde_json::to_string_pretty(&fx).expect("fixtures serialise") + "\n")?;
    println!("wrote {}", file.display());
    Ok(())
}
