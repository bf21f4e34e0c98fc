use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use pbmix::analysis::{
    builtin_case, run_convergence, solve_case, AnalysisError, Domain, StudyOptions,
};
use pbmix::mesh::{Mesh, MeshError};
use pbmix::selftest;

#[derive(Debug, Parser)]
#[command(
    name = "pbmix",
    version,
    about = "Mixed finite elements with regularised rough loads"
)]
struct Cli {
    /// JSON file with default settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "PBMIX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a structured mesh or a refined case mesh.
    Mesh(MeshArgs),
    /// Solve one level and dump per-cell values.
    Solve(SolveArgs),
    /// Run a convergence study and write the error table as CSV.
    Convergence(ConvergenceArgs),
    /// Run the built-in property checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct MeshArgs {
    /// Cells per side of a structured mesh.
    #[arg(long)]
    nx: Option<usize>,
    /// Use the domain and boundary marking of a built-in case.
    #[arg(long)]
    case: Option<String>,
    /// Uniform refinements applied to a case's level-1 mesh.
    #[arg(long)]
    refine: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[arg(long)]
    case: Option<String>,
    /// Polynomial degree of the scalar space.
    #[arg(long)]
    k: Option<usize>,
    /// Use the load directly instead of its regularisation.
    #[arg(long)]
    no_q: bool,
    #[arg(long)]
    load_degree: Option<usize>,
    #[arg(long)]
    load_levels: Option<usize>,
    #[arg(long)]
    error_degree: Option<usize>,
    #[arg(long)]
    error_levels: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Refinement level (1 = coarsest mesh of the case).
    #[arg(long)]
    level: Option<usize>,
    /// Solve on this mesh file instead of a case level.
    #[arg(long)]
    mesh: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConvergenceArgs {
    #[command(flatten)]
    study: StudyArgs,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long)]
    seed: Option<u64>,
}

/// Settings accepted from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    case: Option<String>,
    levels: Option<usize>,
    level: Option<usize>,
    k: Option<usize>,
    use_q: Option<bool>,
    load_degree: Option<usize>,
    load_levels: Option<usize>,
    error_degree: Option<usize>,
    error_levels: Option<usize>,
    mesh: Option<PathBuf>,
    nx: Option<usize>,
    refine: Option<usize>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read config {path}: {source}")]
    Config {
        path: PathBuf,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0} self-test check(s) failed")]
    SelftestFailed(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Analysis(AnalysisError::UnknownCase(_) | AnalysisError::TooFewLevels(_)) => 2,
            _ => 1,
        }
    }
}

const DEFAULT_LEVELS: usize = 7;
const DEFAULT_SEED: u64 = 20240607;

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let err = |e: Box<dyn std::error::Error + Send + Sync>| CliError::Config {
        path: path.to_owned(),
        source: e,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.into()))?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn options(study: &StudyArgs, cfg: &RunConfig) -> Result<StudyOptions, CliError> {
    let d = StudyOptions::default();
    let opts = StudyOptions {
        k: study.k.or(cfg.k).unwrap_or(d.k),
        use_q: if study.no_q {
            false
        } else {
            cfg.use_q.unwrap_or(d.use_q)
        },
        load_degree: study
            .load_degree
            .or(cfg.load_degree)
            .unwrap_or(d.load_degree),
        load_levels: study
            .load_levels
            .or(cfg.load_levels)
            .unwrap_or(d.load_levels),
        error_degree: study
            .error_degree
            .or(cfg.error_degree)
            .unwrap_or(d.error_degree),
        error_levels: study
            .error_levels
            .or(cfg.error_levels)
            .unwrap_or(d.error_levels),
    };
    if opts.k != 0 {
        return Err(CliError::Usage(format!(
            "only k = 0 is supported (lowest-order Raviart-Thomas), got {}",
            opts.k
        )));
    }
    for (name, deg) in [
        ("load-degree", opts.load_degree),
        ("error-degree", opts.error_degree),
    ] {
        if deg == 0 || deg > 40 {
            return Err(CliError::Usage(format!(
                "{name} must be in 1..=40, got {deg}"
            )));
        }
    }
    Ok(opts)
}

fn case_name(study: &StudyArgs, cfg: &RunConfig) -> Result<String, CliError> {
    study
        .case
        .clone()
        .or_else(|| cfg.case.clone())
        .ok_or_else(|| CliError::Usage("--case is required".into()))
}

fn cmd_mesh(args: &MeshArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let nx = args.nx.or(cfg.nx);
    let case = args.case.clone().or_else(|| cfg.case.clone());
    let refine = args.refine.or(cfg.refine).unwrap_or(0);
    if nx == Some(0) {
        return Err(CliError::Usage("--nx must be at least 1".into()));
    }
    let mesh = match (case, nx) {
        (None, None) => return Err(CliError::Usage("give --nx or --case".into())),
        (None, Some(nx)) => {
            let m = Mesh::structured(
                nx,
                pbmix::mesh::Rectangle::UNIT,
                pbmix::mesh::Diagonal::Forward,
                |_| pbmix::mesh::Marker::Dirichlet,
            );
            (0..refine).fold(m, |m, _| m.uniform_refine())
        }
        (Some(name), nx) => {
            let mut case = builtin_case(&name)?;
            if let Some(nx) = nx {
                match &mut case.domain {
                    Domain::Rectangle { start_nx, .. } => *start_nx = nx,
                    Domain::Fixture(_) => {
                        return Err(CliError::Usage(format!(
                            "case {name} uses a fixture mesh; use --refine"
                        )))
                    }
                }
            }
            case.hierarchy(refine + 1)?.finest().clone()
        }
    };
    let mut out = output(args.out.as_deref().or(cfg.out.as_deref()))?;
    out.write_all(mesh.to_text().as_bytes())?;
    out.flush()?;
    Ok(())
}

fn cmd_solve(args: &SolveArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let case = builtin_case(&case_name(&args.study, cfg)?)?;
    let opts = options(&args.study, cfg)?;
    let mesh = match (
        args.mesh.as_ref().or(cfg.mesh.as_ref()),
        args.level.or(cfg.level),
    ) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either --mesh or --level".into())),
        (Some(path), None) => Mesh::read(path)?,
        (None, level) => {
            let level = level.unwrap_or(1);
            if level == 0 {
                return Err(CliError::Usage("--level starts at 1".into()));
            }
            case.hierarchy(level)?.finest().clone()
        }
    };
    let sol = solve_case(&case, &mesh, &opts)?;
    let mut out = output(args.study.out.as_deref().or(cfg.out.as_deref()))?;
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["cell", "cx", "cy", "psi_h", "psi_post", "zeta_x", "zeta_y"])
        .map_err(io::Error::from)?;
    let f = |v: f64| format!("{v:.16e}");
    for c in 0..mesh.num_cells() {
        let x = mesh.cell_centroid(c);
        let z = sol.flux.eval(&mesh, c, x);
        w.write_record([
            c.to_string(),
            f(x[0]),
            f(x[1]),
            f(sol.scalar.eval(&mesh, c, x)),
            f(sol.post.eval(&mesh, c, x)),
            f(z[0]),
            f(z[1]),
        ])
        .map_err(io::Error::from)?;
    }
    w.flush()?;
    drop(w);
    out.flush()?;
    println!("u_h_l4_norm,{:.16e}", sol.velocity_l4);
    eprintln!(
        "{}: {} cells, {} dofs, residual {:.2e}",
        case.name,
        mesh.num_cells(),
        sol.dofs,
        sol.residual
    );
    Ok(())
}

fn cmd_convergence(args: &ConvergenceArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let case = builtin_case(&case_name(&args.study, cfg)?)?;
    let opts = options(&args.study, cfg)?;
    let levels = args.levels.or(cfg.levels).unwrap_or(DEFAULT_LEVELS);
    let report = run_convergence(&case, levels, &opts)?;
    eprint!("{}", report.table());
    let mut out = output(args.study.out.as_deref().or(cfg.out.as_deref()))?;
    report.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_selftest(args: &SelftestArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let seed = args.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let checks = selftest::run_all(seed);
    for c in &checks {
        println!("{}", c.line());
    }
    match checks.iter().filter(|c| !c.passed()).count() {
        0 => Ok(()),
        n => Err(CliError::SelftestFailed(n)),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads.or(cfg.threads) {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Mesh(a) => cmd_mesh(a, &cfg),
        Command::Solve(a) => cmd_solve(a, &cfg),
        Command::Convergence(a) => cmd_convergence(a, &cfg),
        Command::Selftest(a) => cmd_selftest(a, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
