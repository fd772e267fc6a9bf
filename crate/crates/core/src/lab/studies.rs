//! Study drivers: Hessian-diagonal accuracy, dense BFGS quality tracking,
//! and the phantom reconstruction suite. Each writes CSV artifacts under an
//! output directory and returns a validated report.

use std::io::Write as _;
use std::path::Path;

use crate::adjoint::{background_field_gradients, gn_diag, HessianMode, Operator};
use crate::error::{Error, Result};
use crate::fem::ConductivityField;
use crate::lab::{
    add_noise, count_slice_maxima, rasterize_phantom, slice_profile, write_image_csv,
    write_run_csv, ExperimentReport, Inclusion, NoiseSpec, Phantom, RunConfig,
};
use crate::mesh::TriMesh;
use crate::neumann::NeumannEvaluator;
use crate::numerics::{pearson, Vector};
use crate::optim::{hessian_metrics, reconstruct, LaplaceReg, SolverRun, Variant};
use crate::ptensor::{approx_hessian_diag, element_ellipses, sensitivity_coefficients};

/// Data is always simulated on a mesh different from the reconstruction
/// mesh; identical discretizations make the inverse problem artificially
/// easy.
fn guard_inverse_crime(recon: &TriMesh, sim: &TriMesh) -> Result<()> {
    if recon.hash() == sim.hash() {
        return Err(Error::InvalidParam(
            "simulation mesh equals reconstruction mesh".into(),
        ));
    }
    Ok(())
}

/// Reference single-inclusion scene used by both Hessian studies.
fn single_inclusion(radius: f64, sigma: f64) -> Phantom {
    Phantom {
        inclusions: vec![Inclusion {
            center: [0.3 * radius, 0.3 * radius],
            radius: 0.25 * radius,
            sigma,
        }],
        sigma0: 1.0,
    }
}

/// Noisy synthetic data for a phantom on the simulation mesh.
fn simulate(cfg: &RunConfig, sim: &TriMesh, phantom: &Phantom, noise: NoiseSpec) -> Result<Vector> {
    let op = Operator::new(sim, cfg.electrode_config()?, cfg.selection())?;
    let m = rasterize_phantom(phantom, sim)?;
    Ok(add_noise(&op.forward(&m)?, noise))
}

/// Interior elements closest to a point, in deterministic order.
fn nearest_interior_elements(mesh: &TriMesh, p: [f64; 2], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mesh.n_elements())
        .filter(|&e| !mesh.boundary_flags()[e])
        .collect();
    order.sort_by(|&a, &b| {
        let d = |e: usize| {
            let c = mesh.centroids()[e];
            (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)
        };
        d(a).total_cmp(&d(b)).then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

/// Contrast grid 0.5, 0.75, ..., 5.0 used by the saturation sweep.
fn contrast_grid() -> Vec<f64> {
    (0..19).map(|k| 0.5 + 0.25 * k as f64).collect()
}

fn grid_value(grid: &[f64], values: &[f64], sigma: f64) -> f64 {
    let i = grid
        .iter()
        .position(|&s| (s - sigma).abs() < 1e-9)
        .expect("sigma on grid");
    values[i]
}

/// |slope| flatness ratio between the top of the contrast range and the
/// steep region around 1.5: one-sided difference at 5.0 over the centred
/// difference at 1.5.
fn saturation_ratio(grid: &[f64], values: &[f64]) -> f64 {
    let v = |s| grid_value(grid, values, s);
    let slope_hi = (v(5.0) - v(4.75)) / 0.25;
    let slope_mid = (v(1.75) - v(1.25)) / 0.5;
    slope_hi.abs() / slope_mid.abs()
}

/// Compares the polarization-tensor Hessian diagonal (disc and free-space
/// Neumann kernels) against the adjoint true diagonal on a single-inclusion
/// scene, then sweeps the inclusion contrast to expose the saturation of
/// both quantities on tracked interior elements.
///
/// Writes `hessian_diag.csv` and `saturation.csv`.
pub fn run_hessian_accuracy_study(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mesh = cfg.build_mesh()?;
    let sim = cfg.build_sim_mesh(2 * cfg.n_rings)?;
    guard_inverse_crime(&mesh, &sim)?;

    let phantom = single_inclusion(cfg.radius, 2.3);
    let d = simulate(cfg, &sim, &phantom, cfg.noise())?;

    let op = Operator::new(&mesh, cfg.electrode_config()?, cfg.selection())?;
    let m0 = ConductivityField::uniform(mesh.n_elements(), 1.0)?;
    let (_, sol, f0) = op.forward_solution(&m0)?;
    let true_diag = op.true_hessian(&m0, &d, HessianMode::Diagonal)?;

    let ellipses = element_ellipses(&mesh)?;
    let u0 = background_field_gradients(&mesh, &sol);
    let pairs = op.pairs();
    let ev_disc = NeumannEvaluator::disc(mesh.radius(), cfg.neumann_const_alt)?;
    let ev_free = NeumannEvaluator::freespace();
    let table_disc = sensitivity_coefficients(&mesh, &ellipses, &u0, &pairs, &ev_disc, &m0)?;
    let table_free = sensitivity_coefficients(&mesh, &ellipses, &u0, &pairs, &ev_free, &m0)?;
    let approx_disc = approx_hessian_diag(&table_disc, &f0, &d)?;
    let approx_free = approx_hessian_diag(&table_free, &f0, &d)?;

    let diag_path = out.join("hessian_diag.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&diag_path)?);
        writeln!(f, "element,x,y,approx,approx_freespace,true")?;
        for i in 0..mesh.n_elements() {
            let c = mesh.centroids()[i];
            writeln!(
                f,
                "{i},{},{},{},{},{}",
                c[0], c[1], approx_disc.values[i], approx_free.values[i], true_diag.diag[i]
            )?;
        }
    }

    let interior: Vec<usize> = (0..mesh.n_elements())
        .filter(|&e| !mesh.boundary_flags()[e])
        .collect();
    let pick = |v: &Vector| -> Vec<f64> { interior.iter().map(|&e| v[e]).collect() };
    let truth = pick(&true_diag.diag);
    let corr_disc = pearson(&pick(&approx_disc.values), &truth);
    let corr_free = pearson(&pick(&approx_free.values), &truth);

    // Contrast sweep. Everything background-dependent is fixed at m0, so each
    // contrast costs one fine-mesh forward solve plus dot products.
    let tracked = nearest_interior_elements(&mesh, phantom.inclusions[0].center, 3);
    let e_table = op.second_derivative_diag_table(&m0)?;
    let gn = gn_diag(&op.jacobian(&m0)?);
    let grid = contrast_grid();
    let mut true_curves = vec![Vec::new(); tracked.len()];
    let mut approx_curves = vec![Vec::new(); tracked.len()];
    for &sigma in &grid {
        let d_s = simulate(cfg, &sim, &single_inclusion(cfg.radius, sigma), cfg.noise())?;
        let res = &f0 - &d_s;
        let approx_s = approx_hessian_diag(&table_disc, &f0, &d_s)?;
        for (k, &e) in tracked.iter().enumerate() {
            true_curves[k].push(gn[e] + e_table.column(e).dot(&res));
            approx_curves[k].push(approx_s.values[e]);
        }
    }

    let sat_path = out.join("saturation.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&sat_path)?);
        let cols: Vec<String> = tracked
            .iter()
            .map(|e| format!("true_e{e},approx_e{e}"))
            .collect();
        writeln!(f, "sigma,{}", cols.join(","))?;
        for (i, &sigma) in grid.iter().enumerate() {
            let row: Vec<String> = tracked
                .iter()
                .enumerate()
                .map(|(k, _)| format!("{},{}", true_curves[k][i], approx_curves[k][i]))
                .collect();
            writeln!(f, "{sigma},{}", row.join(","))?;
        }
    }

    let mut report = ExperimentReport::new("hessian_accuracy", cfg);
    report.files = vec![diag_path, sat_path];
    report.metrics.push(("pearson_disc".into(), corr_disc));
    report.metrics.push(("pearson_freespace".into(), corr_free));
    for (k, &e) in tracked.iter().enumerate() {
        report.metrics.push((
            format!("true_slope_ratio_e{e}"),
            saturation_ratio(&grid, &true_curves[k]),
        ));
        report.metrics.push((
            format!("approx_slope_ratio_e{e}"),
            saturation_ratio(&grid, &approx_curves[k]),
        ));
    }
    report.validate()?;
    Ok(report)
}

fn tracked_run(cfg: &RunConfig, op: &Operator<'_>, d: &Vector, variant: Variant) -> Result<SolverRun> {
    let mut settings = cfg.solver_settings();
    settings.variant = variant;
    settings.track_b = true;
    settings.max_iter = 50;
    settings.stagnation_tol = 0.0;
    reconstruct(op, d, &settings)
}

/// Runs full-memory BFGS from the polarization-tensor initial diagonal and
/// from the Gauss-Newton initial diagonal, recording the dense matrix at
/// every iterate, and measures both sequences against the true Hessian at
/// the better final iterate.
///
/// Writes `bfgs_frobenius.csv` (relative Frobenius error) and
/// `bfgs_angles.csv` (principal angles of the dominant subspaces).
pub fn run_bfgs_quality_study(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mesh = cfg.build_mesh()?;
    let sim = cfg.build_sim_mesh(2 * cfg.n_rings)?;
    guard_inverse_crime(&mesh, &sim)?;

    let phantom = single_inclusion(cfg.radius, 2.3);
    let d = simulate(cfg, &sim, &phantom, cfg.noise())?;
    let op = Operator::new(&mesh, cfg.electrode_config()?, cfg.selection())?;

    let run_h = tracked_run(cfg, &op, &d, Variant::LbfgsH)?;
    let run_gn = tracked_run(cfg, &op, &d, Variant::LbfgsGn)?;

    // Reference Hessian at the deeper of the two final iterates.
    let best = if run_h.records.last().unwrap().phi <= run_gn.records.last().unwrap().phi {
        &run_h
    } else {
        &run_gn
    };
    let m_star = ConductivityField::new(best.image.clone())?;
    let full = op
        .true_hessian(&m_star, &d, HessianMode::Full)?
        .full
        .expect("full mode");
    let h_true = full + LaplaceReg::new(&mesh, cfg.lambda).hessian_dense();

    let (frob_h, angles_h) = hessian_metrics(&run_h.b_history, &h_true)?;
    let (frob_gn, angles_gn) = hessian_metrics(&run_gn.b_history, &h_true)?;

    let frob_path = out.join("bfgs_frobenius.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&frob_path)?);
        writeln!(f, "iter,init,frob")?;
        for (init, series) in [("ptensor", &frob_h), ("gn", &frob_gn)] {
            for (k, v) in series.iter().enumerate() {
                writeln!(f, "{k},{init},{v}")?;
            }
        }
    }
    let ang_path = out.join("bfgs_angles.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&ang_path)?);
        let width = angles_h.first().map_or(0, Vec::len);
        let head: Vec<String> = (1..=width).map(|i| format!("a{i}")).collect();
        writeln!(f, "iter,init,{}", head.join(","))?;
        for (init, series) in [("ptensor", &angles_h), ("gn", &angles_gn)] {
            for (k, row) in series.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(f, "{k},{init},{}", cells.join(","))?;
            }
        }
    }

    let at = |v: &[f64], k: usize| v[k.min(v.len() - 1)];
    let below = |row: &[f64]| row.iter().filter(|&&a| a < std::f64::consts::PI / 15.0).count();
    let ang_at = |rows: &[Vec<f64>], k: usize| below(&rows[k.min(rows.len() - 1)]) as f64;
    let f_h25 = at(&frob_h, 25);
    let f_gn25 = at(&frob_gn, 25);
    let mut report = ExperimentReport::new("bfgs_quality", cfg);
    report.files = vec![frob_path, ang_path];
    report.metrics = vec![
        ("frob_ptensor_iter25".into(), f_h25),
        ("frob_gn_iter25".into(), f_gn25),
        ("frob_ratio_gn_over_ptensor".into(), f_gn25 / f_h25),
        ("angles_below_pi15_ptensor_iter5".into(), ang_at(&angles_h, 5)),
        ("angles_below_pi15_gn_iter50".into(), ang_at(&angles_gn, 50)),
        ("iters_ptensor".into(), (run_h.records.len() - 1) as f64),
        ("iters_gn".into(), (run_gn.records.len() - 1) as f64),
    ];
    report.validate()?;
    Ok(report)
}

/// Background conductivity of the suite phantoms. The inclusion contrasts
/// are relative (2x and 3x background), so this value fixes the absolute
/// voltage scale of the data. It is chosen so that at the default
/// regularization weight the data misfit, not the smoothness penalty,
/// controls the resolvable detail: much larger backgrounds shrink the
/// Jacobian (sensitivity ~ 1/sigma0^2) until the penalty flattens the two
/// inclusions into one blob, much smaller ones let every variant overfit
/// the same noise floor in a handful of iterations.
pub const SUITE_BACKGROUND: f64 = 0.3;

/// The four two-inclusion phantoms of the reconstruction suite: a weaker
/// inclusion (2x background) and a stronger one (3x background) placed
/// symmetrically on the x = y diagonal.
pub fn suite_phantoms(radius: f64) -> Vec<(&'static str, Phantom)> {
    let two = |r: f64, sep: f64| {
        let c = sep * radius / 2f64.sqrt();
        Phantom {
            inclusions: vec![
                Inclusion {
                    center: [-c, -c],
                    radius: r * radius,
                    sigma: 2.0 * SUITE_BACKGROUND,
                },
                Inclusion {
                    center: [c, c],
                    radius: r * radius,
                    sigma: 3.0 * SUITE_BACKGROUND,
                },
            ],
            sigma0: SUITE_BACKGROUND,
        }
    };
    vec![
        ("A", two(0.16, 0.25)),
        ("B", two(0.16, 0.30)),
        ("C", two(0.16, 0.40)),
        ("D", two(0.25, 0.30)),
    ]
}

/// Reconstructs every suite phantom with every solver variant. Per run it
/// writes the reconstructed image, the iteration log, and the profile along
/// the x = y diameter; `summary.csv` collects iteration counts and final
/// relative residuals.
pub fn run_reconstruction_suite(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mesh = cfg.build_mesh()?;
    let sim = cfg.build_sim_mesh(2 * cfg.n_rings)?;
    guard_inverse_crime(&mesh, &sim)?;
    let op = Operator::new(&mesh, cfg.electrode_config()?, cfg.selection())?;

    let mut report = ExperimentReport::new("reconstruction_suite", cfg);
    let summary_path = out.join("summary.csv");
    let mut summary = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
    writeln!(summary, "phantom,variant,iterations,final_rel_resid,termination")?;

    for (pi, (name, phantom)) in suite_phantoms(cfg.radius).iter().enumerate() {
        let noise = NoiseSpec {
            snr: cfg.snr,
            seed: cfg.seed + pi as u64,
        };
        let d = simulate(cfg, &sim, phantom, noise)?;
        for variant in Variant::all() {
            let mut settings = cfg.solver_settings();
            settings.variant = variant;
            settings.sigma0 = phantom.sigma0;
            let run = reconstruct(&op, &d, &settings)?;

            let image_path = out.join(format!("image_{name}_{}.csv", variant.name()));
            write_image_csv(&image_path, &mesh, &run.image)?;
            let run_path = out.join(format!("run_{name}_{}.csv", variant.name()));
            write_run_csv(&run_path, &run.records, false)?;

            let profile = slice_profile(&mesh, &run.image, 201);
            let slice_path = out.join(format!("slice_{name}_{}.csv", variant.name()));
            {
                let mut f = std::io::BufWriter::new(std::fs::File::create(&slice_path)?);
                writeln!(f, "s,m")?;
                for (s, v) in &profile {
                    writeln!(f, "{s},{v}")?;
                }
            }

            let iters = run.records.len() - 1;
            let rel = run.final_rel_resid();
            writeln!(
                summary,
                "{name},{},{iters},{rel},{}",
                variant.name(),
                run.termination.as_str()
            )?;
            let vals: Vec<f64> = profile.iter().map(|p| p.1).collect();
            let tag = format!("{name}_{}", variant.name());
            report.metrics.push((format!("{tag}_iters"), iters as f64));
            report.metrics.push((format!("{tag}_rel_resid"), rel));
            report
                .metrics
                .push((format!("{tag}_maxima"), count_slice_maxima(&vals) as f64));
            report.files.push(image_path);
            report.files.push(run_path);
            report.files.push(slice_path);
        }
    }
    summary.flush()?;
    report.files.push(summary_path);
    report.validate()?;
    Ok(report)
}
