//! `eitpt` — command line front end for the tomography toolkit: mesh export,
//! data simulation, single reconstructions, the three studies, and SVG
//! rendering of any study CSV.

mod plot;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eitpt::adjoint::Operator;
use eitpt::fem::{read_data_csv, write_data_csv};
use eitpt::lab::{
    add_noise, rasterize_phantom, run_bfgs_quality_study, run_hessian_accuracy_study,
    run_reconstruction_suite, slice_profile, write_image_csv, write_run_csv, ExperimentReport,
    Inclusion, Phantom, RunConfig,
};
use eitpt::numerics::Vector;
use eitpt::optim::reconstruct;
use eitpt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "eitpt",
    version,
    about = "Electrical impedance tomography: simulation, reconstruction and studies on a disc domain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; keys not present fall back to built-in
    /// defaults (study subcommands use their own tuned defaults instead).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for output files (created if missing).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the disc mesh and export it as a loadable text file.
    Mesh,
    /// Simulate electrode measurements for a phantom and write them to CSV.
    Simulate(SimulateArgs),
    /// Reconstruct a conductivity image from a measurement CSV.
    Reconstruct(ReconstructArgs),
    /// Compare approximate Hessian diagonals against the true diagonal and
    /// sweep the inclusion contrast.
    HessianStudy,
    /// Track dense BFGS matrices from two initializations against the true
    /// Hessian (Frobenius error and principal angles).
    BfgsStudy,
    /// Reconstruct the four two-inclusion phantoms with every solver variant.
    Suite,
    /// Render a study CSV as a static SVG chart (type chosen by header).
    Plot(PlotArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Inclusion given as "cx,cy,radius,sigma"; repeat for several. Without
    /// any, a single inclusion of conductivity 2.3 and radius 0.25 sits at
    /// (0.3, 0.3) on the unit-radius scale.
    #[arg(long = "inclusion", value_name = "CX,CY,R,SIGMA")]
    inclusions: Vec<String>,
    /// Background conductivity of the phantom.
    #[arg(long, default_value_t = 1.0)]
    sigma0: f64,
    /// Ring count of the (finer) simulation mesh; defaults to twice the
    /// configured n_rings.
    #[arg(long)]
    sim_rings: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Measurement CSV written by `simulate` (header
    /// "pattern,electrode,value").
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Homogeneous starting conductivity of the solver.
    #[arg(long, default_value_t = 1.0)]
    sigma0: f64,
}

#[derive(Args)]
struct PlotArgs {
    /// CSV produced by a study, `simulate` or `reconstruct`.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

/// Loads the configuration for a subcommand: explicit file if given, the
/// subcommand's defaults otherwise, with the seed flag applied on top.
fn load_config(global: &Global, defaults: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => defaults,
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(global: &Global, default: &str) -> Result<PathBuf> {
    let dir = global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn print_report(report: &ExperimentReport) {
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    for (k, v) in &report.metrics {
        println!("{k} = {v}");
    }
}

fn parse_inclusion(s: &str) -> Result<Inclusion> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!(
            "inclusion must be CX,CY,R,SIGMA, got {s:?}"
        )));
    }
    let mut v = [0.0; 4];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("not a number in inclusion: {p:?}")))?;
    }
    Ok(Inclusion {
        center: [v[0], v[1]],
        radius: v[2],
        sigma: v[3],
    })
}

fn run(cli: Cli) -> Result<()> {
    let global = &cli.global;
    match cli.command {
        Command::Mesh => {
            let cfg = load_config(global, RunConfig::default())?;
            let mesh = cfg.build_mesh()?;
            let dir = out_dir(global, "mesh")?;
            let path = dir.join("mesh.txt");
            mesh.to_file(&path)?;
            println!("wrote {}", path.display());
            println!(
                "nodes = {}, elements = {}, electrodes = {}, boundary edges = {}",
                mesh.n_nodes(),
                mesh.n_elements(),
                mesh.n_electrodes(),
                mesh.boundary_edges().len()
            );
        }
        Command::Simulate(args) => {
            let cfg = load_config(global, RunConfig::default())?;
            let phantom = Phantom {
                inclusions: if args.inclusions.is_empty() {
                    vec![Inclusion {
                        center: [0.3 * cfg.radius, 0.3 * cfg.radius],
                        radius: 0.25 * cfg.radius,
                        sigma: 2.3,
                    }]
                } else {
                    args.inclusions
                        .iter()
                        .map(|s| parse_inclusion(s))
                        .collect::<Result<_>>()?
                },
                sigma0: args.sigma0,
            };
            let rings = args.sim_rings.unwrap_or(2 * cfg.n_rings);
            let sim = cfg.build_sim_mesh(rings)?;
            let m_true = rasterize_phantom(&phantom, &sim)?;
            let op = Operator::new(&sim, cfg.electrode_config()?, cfg.selection())?;
            let d = add_noise(&op.forward(&m_true)?, cfg.noise());

            let dir = out_dir(global, "sim")?;
            let data_path = dir.join("data.csv");
            write_data_csv(&data_path, &op.pairs(), &d)?;
            let true_path = dir.join("true_image.csv");
            write_image_csv(&true_path, &sim, m_true.values())?;
            println!("wrote {}", data_path.display());
            println!("wrote {}", true_path.display());
            println!(
                "measurements = {}, simulation elements = {}, snr = {}",
                d.len(),
                sim.n_elements(),
                cfg.snr
            );
        }
        Command::Reconstruct(args) => {
            let cfg = load_config(global, RunConfig::default())?;
            let mesh = cfg.build_mesh()?;
            let op = Operator::new(&mesh, cfg.electrode_config()?, cfg.selection())?;
            let (pairs, d) = read_data_csv(&args.data)?;
            if d.len() != op.n_data() {
                return Err(Error::DimensionMismatch {
                    expected: op.n_data(),
                    got: d.len(),
                });
            }
            if pairs != op.pairs() {
                return Err(Error::Parse(
                    "data rows don't match the configured measurement selection".into(),
                ));
            }
            let mut settings = cfg.solver_settings();
            settings.sigma0 = args.sigma0;
            let run = reconstruct(&op, &d, &settings)?;

            let dir = out_dir(global, "reco")?;
            let image_path = dir.join("image.csv");
            write_image_csv(&image_path, &mesh, &run.image)?;
            let run_path = dir.join("run.csv");
            write_run_csv(&run_path, &run.records, false)?;
            let slice_path = dir.join("slice.csv");
            {
                let mut f = std::io::BufWriter::new(std::fs::File::create(&slice_path)?);
                writeln!(f, "s,m")?;
                for (s, v) in slice_profile(&mesh, &run.image, 201) {
                    writeln!(f, "{s},{v}")?;
                }
            }
            println!("wrote {}", image_path.display());
            println!("wrote {}", run_path.display());
            println!("wrote {}", slice_path.display());
            println!(
                "variant = {}, iterations = {}, final relative residual = {}, termination = {}",
                cfg.variant.name(),
                run.records.len() - 1,
                run.final_rel_resid(),
                run.termination.as_str()
            );
        }
        Command::HessianStudy => {
            let cfg = load_config(global, RunConfig::hessian_study_defaults())?;
            let dir = out_dir(global, "hessian_study")?;
            print_report(&run_hessian_accuracy_study(&cfg, &dir)?);
        }
        Command::BfgsStudy => {
            let cfg = load_config(global, RunConfig::bfgs_study_defaults())?;
            let dir = out_dir(global, "bfgs_study")?;
            print_report(&run_bfgs_quality_study(&cfg, &dir)?);
        }
        Command::Suite => {
            let cfg = load_config(global, RunConfig::suite_defaults())?;
            let dir = out_dir(global, "suite")?;
            print_report(&run_reconstruction_suite(&cfg, &dir)?);
        }
        Command::Plot(args) => {
            let cfg = load_config(global, RunConfig::default())?;
            let name = args
                .input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "plot".into());
            let out_file = match &global.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    dir.join(format!("{name}.svg"))
                }
                None => args.input.with_extension("svg"),
            };
            plot::render(&cfg, &args.input, &out_file)?;
            println!("wrote {}", out_file.display());
        }
    }
    Ok(())
}
