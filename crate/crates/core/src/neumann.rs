//! Neumann functions for the disc (closed form), free space, and arbitrary
//! meshed domains (precomputed nodal table), with source-point gradients.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, ConductivityField};
use crate::mesh::TriMesh;
use crate::numerics::{read_matrix, write_matrix, DenseMat, Vector};

/// Two evaluation points closer than this count as coincident source/field.
const COINCIDENCE_TOL: f64 = 1e-12;

/// Evaluates N(x, z) and grad_z N(x, z) for a field point x on the boundary
/// and a source z in the interior. Immutable after construction; safe to
/// share across threads.
pub enum NeumannEvaluator<'m> {
    /// Closed form on a disc of radius `rho`. `alt_const` switches the
    /// additive constant from (ln rho)/pi to plain ln rho; constants cancel
    /// in electrode differences either way.
    DiscAnalytic { rho: f64, alt_const: bool },
    Freespace,
    /// Nodal table on a general mesh: column k holds the discrete field of a
    /// unit source at node k.
    Fem { mesh: &'m TriMesh, table: DenseMat },
}

impl<'m> NeumannEvaluator<'m> {
    pub fn disc(rho: f64, alt_const: bool) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidParam(format!("disc radius {rho}")));
        }
        Ok(NeumannEvaluator::DiscAnalytic { rho, alt_const })
    }

    pub fn freespace() -> Self {
        NeumannEvaluator::Freespace
    }

    /// Solve the table from scratch.
    pub fn fem(mesh: &'m TriMesh) -> Result<Self> {
        let table = neumann_table(mesh)?;
        Ok(NeumannEvaluator::Fem { mesh, table })
    }

    /// Load the table from `dir` if a file for this mesh exists, else solve
    /// and store it. File name is keyed by the mesh hash.
    pub fn fem_cached(mesh: &'m TriMesh, dir: &Path) -> Result<Self> {
        let path = dir.join(format!("neumann_{:016x}.bin", mesh.hash()));
        if let Ok(table) = read_matrix(&path) {
            if table.nrows() == mesh.n_nodes() && table.ncols() == mesh.n_nodes() {
                return Ok(NeumannEvaluator::Fem { mesh, table });
            }
        }
        let table = neumann_table(mesh)?;
        write_matrix(&path, &table)?;
        Ok(NeumannEvaluator::Fem { mesh, table })
    }

    pub fn value(&self, x: [f64; 2], z: [f64; 2]) -> Result<f64> {
        check_separated(x, z)?;
        match self {
            NeumannEvaluator::DiscAnalytic { rho, alt_const } => {
                disc_value(x, z, *rho, *alt_const)
            }
            NeumannEvaluator::Freespace => Ok(-(dist(x, z)).ln() / (2.0 * PI)),
            NeumannEvaluator::Fem { mesh, table } => Ok(fem_eval(mesh, table, x, z)?.0),
        }
    }

    pub fn grad_z(&self, x: [f64; 2], z: [f64; 2]) -> Result<[f64; 2]> {
        check_separated(x, z)?;
        match self {
            NeumannEvaluator::DiscAnalytic { rho, .. } => disc_grad(x, z, *rho),
            NeumannEvaluator::Freespace => {
                let d2 = dist2(x, z);
                Ok([
                    (x[0] - z[0]) / (2.0 * PI * d2),
                    (x[1] - z[1]) / (2.0 * PI * d2),
                ])
            }
            NeumannEvaluator::Fem { mesh, table } => Ok(fem_eval(mesh, table, x, z)?.1),
        }
    }
}

fn check_separated(x: [f64; 2], z: [f64; 2]) -> Result<()> {
    if dist(x, z) < COINCIDENCE_TOL {
        return Err(Error::SourceOnBoundary);
    }
    Ok(())
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    dist2(a, b).sqrt()
}

fn disc_checks(x: [f64; 2], z: [f64; 2], rho: f64) -> Result<(f64, f64)> {
    let nx = (x[0] * x[0] + x[1] * x[1]).sqrt();
    let nz = (z[0] * z[0] + z[1] * z[1]).sqrt();
    if (nx - rho).abs() > 1e-9 * rho {
        return Err(Error::InvalidParam(format!(
            "field point |x| = {nx} not on circle of radius {rho}"
        )));
    }
    if nz >= rho {
        return Err(Error::InvalidParam(format!(
            "source |z| = {nz} not inside disc of radius {rho}"
        )));
    }
    Ok((nx, nz))
}

fn image_vector(x: [f64; 2], z: [f64; 2], nx: f64, rho: f64) -> [f64; 2] {
    let a = rho / nx;
    let b = nx / rho;
    [a * x[0] - b * z[0], a * x[1] - b * z[1]]
}

fn disc_value(x: [f64; 2], z: [f64; 2], rho: f64, alt_const: bool) -> Result<f64> {
    let (nx, _) = disc_checks(x, z, rho)?;
    let w = image_vector(x, z, nx, rho);
    let nw = (w[0] * w[0] + w[1] * w[1]).sqrt();
    let cterm = if alt_const { rho.ln() } else { rho.ln() / PI };
    Ok(-(dist(x, z).ln() + nw.ln() + cterm) / (2.0 * PI))
}

fn disc_grad(x: [f64; 2], z: [f64; 2], rho: f64) -> Result<[f64; 2]> {
    let (nx, _) = disc_checks(x, z, rho)?;
    let d2 = dist2(x, z);
    let w = image_vector(x, z, nx, rho);
    let nw2 = w[0] * w[0] + w[1] * w[1];
    let b = nx / rho;
    Ok([
        -((z[0] - x[0]) / d2 - b * w[0] / nw2) / (2.0 * PI),
        -((z[1] - x[1]) / d2 - b * w[1] / nw2) / (2.0 * PI),
    ])
}

/// Boundary mass vector: f_i = integral of the hat function of node i along
/// the boundary polyline.
pub fn boundary_mass(mesh: &TriMesh) -> Vector {
    let mut f = Vector::zeros(mesh.n_nodes());
    for &[a, b] in mesh.boundary_edges() {
        let h = mesh.edge_length([a, b]);
        f[a] += 0.5 * h;
        f[b] += 0.5 * h;
    }
    f
}

/// Discrete Neumann table: column k solves the pure-conduction system with a
/// unit source at node k, compensated by uniform boundary outflow, under the
/// boundary-weighted zero-mean constraint. Assembled as the stacked system
/// (A; f^T) Gamma = (G; 0) and solved through its normal equations with one
/// step of iterative refinement.
pub fn neumann_table(mesh: &TriMesh) -> Result<DenseMat> {
    let n = mesh.n_nodes();
    let unit = ConductivityField::uniform(mesh.n_elements(), 1.0)?;
    let a = assemble_stiffness(mesh, &unit)?.to_dense();
    let f = boundary_mass(mesh);
    let sum_f = f.sum();

    // G = I - f 1^T / sum_f keeps every column orthogonal to constants.
    // Normal equations: (A^2 + f f^T) Gamma = A G.
    let af = &a * &f;
    let mut rhs = a.clone();
    for j in 0..n {
        for i in 0..n {
            rhs[(i, j)] -= af[i] / sum_f;
        }
    }
    let mut m = &a * &a;
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] += f[i] * f[j];
        }
    }
    let chol = m.clone().cholesky().ok_or(Error::RankDeficient)?;
    let mut gamma = chol.solve(&rhs);
    let resid = &rhs - &m * &gamma;
    gamma += chol.solve(&resid);
    Ok(gamma)
}

/// Max-norm relative residual of the normal equations the table solves.
pub fn table_residual(mesh: &TriMesh, table: &DenseMat) -> Result<f64> {
    let n = mesh.n_nodes();
    let unit = ConductivityField::uniform(mesh.n_elements(), 1.0)?;
    let a = assemble_stiffness(mesh, &unit)?.to_dense();
    let f = boundary_mass(mesh);
    let sum_f = f.sum();
    let af = &a * &f;
    let mut rhs = a.clone();
    for j in 0..n {
        for i in 0..n {
            rhs[(i, j)] -= af[i] / sum_f;
        }
    }
    let lhs = &a * (&a * table) + &f * (f.transpose() * table);
    Ok((lhs - &rhs).norm() / rhs.norm())
}

/// Locate `x` on the boundary polyline: nearest segment, endpoint nodes, and
/// linear weights.
fn boundary_interp(mesh: &TriMesh, x: [f64; 2]) -> ([usize; 2], [f64; 2]) {
    let mut best = (f64::INFINITY, [0usize; 2], [0.0; 2]);
    for &[a, b] in mesh.boundary_edges() {
        let pa = mesh.nodes()[a];
        let pb = mesh.nodes()[b];
        let ex = pb[0] - pa[0];
        let ey = pb[1] - pa[1];
        let len2 = ex * ex + ey * ey;
        let t = (((x[0] - pa[0]) * ex + (x[1] - pa[1]) * ey) / len2).clamp(0.0, 1.0);
        let px = pa[0] + t * ex;
        let py = pa[1] + t * ey;
        let d2 = dist2(x, [px, py]);
        if d2 < best.0 {
            best = (d2, [a, b], [1.0 - t, t]);
        }
    }
    (best.1, best.2)
}

/// Value and source gradient from the nodal table. The field point is
/// interpolated linearly on its boundary segment; the source dependence is a
/// least-squares quadratic over the two-ring of the node nearest z, so the
/// returned gradient is the exact derivative of the returned value surface.
fn fem_eval(mesh: &TriMesh, table: &DenseMat, x: [f64; 2], z: [f64; 2]) -> Result<(f64, [f64; 2])> {
    let (bn, bw) = boundary_interp(mesh, x);
    let k0 = mesh.nearest_node(z);
    let ring = mesh.node_two_ring(k0);
    if ring.len() < 6 {
        return Err(Error::RankDeficient);
    }
    let c0 = mesh.nodes()[k0];
    let scale = ring
        .iter()
        .map(|&s| dist(mesh.nodes()[s], c0))
        .fold(0.0, f64::max)
        .max(COINCIDENCE_TOL);

    let mut basis = DenseMat::zeros(ring.len(), 6);
    let mut vals = Vector::zeros(ring.len());
    for (r, &s) in ring.iter().enumerate() {
        let dx = (mesh.nodes()[s][0] - c0[0]) / scale;
        let dy = (mesh.nodes()[s][1] - c0[1]) / scale;
        basis[(r, 0)] = 1.0;
        basis[(r, 1)] = dx;
        basis[(r, 2)] = dy;
        basis[(r, 3)] = dx * dx;
        basis[(r, 4)] = dx * dy;
        basis[(r, 5)] = dy * dy;
        vals[r] = bw[0] * table[(bn[0], s)] + bw[1] * table[(bn[1], s)];
    }
    let c = crate::numerics::solve_normal_equations(&basis, &vals)?;
    let dx = (z[0] - c0[0]) / scale;
    let dy = (z[1] - c0[1]) / scale;
    let value = c[0] + c[1] * dx + c[2] * dy + c[3] * dx * dx + c[4] * dx * dy + c[5] * dy * dy;
    let gx = (c[1] + 2.0 * c[3] * dx + c[4] * dy) / scale;
    let gy = (c[2] + c[4] * dx + 2.0 * c[5] * dy) / scale;
    Ok((value, [gx, gy]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_disc_mesh;
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    fn on_circle(rho: f64, theta: f64) -> [f64; 2] {
        [rho * theta.cos(), rho * theta.sin()]
    }

    #[test]
    fn unit_disc_reduces_to_double_log() {
        let ev = NeumannEvaluator::disc(1.0, false).unwrap();
        let x = on_circle(1.0, 0.7);
        let z = [0.2, -0.3];
        let expect = -dist(x, z).ln() / PI;
        assert!((ev.value(x, z).unwrap() - expect).abs() < 1e-14);
        // Constant-term variants agree at rho = 1.
        let alt = NeumannEvaluator::disc(1.0, true).unwrap();
        assert!((alt.value(x, z).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn disc_rotation_invariance() {
        let ev = NeumannEvaluator::disc(1.4, false).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let tx = rng.random_range(0.0..2.0 * PI);
            let r = rng.random_range(0.0..1.2);
            let tz = rng.random_range(0.0..2.0 * PI);
            let ang = rng.random_range(0.0..2.0 * PI);
            let x = on_circle(1.4, tx);
            let z = [r * tz.cos(), r * tz.sin()];
            let xr = on_circle(1.4, tx + ang);
            let zr = [r * (tz + ang).cos(), r * (tz + ang).sin()];
            let a = ev.value(x, z).unwrap();
            let b = ev.value(xr, zr).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn disc_boundary_integral_vanishes_at_unit_radius() {
        let ev = NeumannEvaluator::disc(1.0, false).unwrap();
        let z = [0.3, 0.2];
        let n = 4096;
        let h = 2.0 * PI / n as f64;
        let mut acc = 0.0;
        for k in 0..n {
            acc += ev.value(on_circle(1.0, h * k as f64), z).unwrap() * h;
        }
        assert!(acc.abs() < 1e-6, "contour integral {acc}");
    }

    #[test]
    fn freespace_gradient_example() {
        let ev = NeumannEvaluator::freespace();
        let g = ev.grad_z([1.0, 0.0], [0.0, 0.0]).unwrap();
        assert!((g[0] - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(g[1].abs() < 1e-15);
    }

    #[test]
    fn source_on_field_point_rejected() {
        let ev = NeumannEvaluator::freespace();
        assert!(matches!(
            ev.value([0.5, 0.5], [0.5, 0.5]),
            Err(Error::SourceOnBoundary)
        ));
        let disc = NeumannEvaluator::disc(1.0, false).unwrap();
        assert!(disc.value(on_circle(1.0, 0.3), [0.0, 1.5]).is_err());
    }

    #[test]
    fn disc_gradient_finite_toward_center() {
        let ev = NeumannEvaluator::disc(1.0, false).unwrap();
        let x = on_circle(1.0, 1.1);
        let mut prev: Option<[f64; 2]> = None;
        let mut gaps = Vec::new();
        for k in 3..=8 {
            let t = 10f64.powi(-k);
            let z = [t / 2f64.sqrt(), t / 2f64.sqrt()];
            let g = ev.grad_z(x, z).unwrap();
            assert!(g[0].is_finite() && g[1].is_finite());
            if let Some(p) = prev {
                gaps.push(dist(g, p));
            }
            prev = Some(g);
        }
        // Values settle to the z = 0 limit.
        assert!(gaps.last().unwrap() < &1e-6);
        assert!(gaps.first().unwrap() > gaps.last().unwrap());
    }

    #[test]
    fn disc_minus_freespace_is_image_plus_constant() {
        let rho = 1.3;
        let disc = NeumannEvaluator::disc(rho, false).unwrap();
        let free = NeumannEvaluator::freespace();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..30 {
            let x = on_circle(rho, rng.random_range(0.0..2.0 * PI));
            let r = rng.random_range(0.0..0.95 * rho);
            let t = rng.random_range(0.0..2.0 * PI);
            let z = [r * t.cos(), r * t.sin()];
            let diff = disc.value(x, z).unwrap() - free.value(x, z).unwrap();
            let w = image_vector(x, z, rho, rho);
            let expect = -((w[0] * w[0] + w[1] * w[1]).sqrt().ln() + rho.ln() / PI) / (2.0 * PI);
            assert!((diff - expect).abs() < 1e-12);
            assert!(diff.is_finite());
        }
    }

    #[test]
    fn fem_table_satisfies_constraints() {
        let mesh = make_disc_mesh(1.0, 3, 16, 0.5).unwrap();
        let table = neumann_table(&mesh).unwrap();
        let f = boundary_mass(&mesh);
        let fg = f.transpose() * &table;
        let col_scale = table.norm() / (mesh.n_nodes() as f64).sqrt();
        for j in 0..mesh.n_nodes() {
            assert!(
                fg[j].abs() <= 1e-8 * col_scale.max(1.0),
                "weighted mean of column {j}: {}",
                fg[j]
            );
        }
        assert!(table_residual(&mesh, &table).unwrap() <= 1e-8);
    }

    #[test]
    fn fem_matches_disc_away_from_sources() {
        let mesh = make_disc_mesh(1.0, 6, 16, 0.5).unwrap();
        let ev = NeumannEvaluator::fem(&mesh).unwrap();
        let disc = NeumannEvaluator::disc(1.0, false).unwrap();
        for &z in &[[0.3, 0.3], [0.0, 0.1], [-0.4, 0.2]] {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for &x in mesh.electrode_centroids() {
                let a = ev.value(x, z).unwrap();
                let b = disc.value(x, z).unwrap();
                num = num.max((a - b).abs());
                den = den.max(b.abs());
            }
            assert!(num / den <= 0.05, "source {z:?}: rel err {}", num / den);
        }
    }

    #[test]
    fn fem_refinement_halves_error() {
        let z = [0.25, 0.1];
        let disc = NeumannEvaluator::disc(1.0, false).unwrap();
        let err_of = |rings: usize| {
            let mesh = make_disc_mesh(1.0, rings, 16, 0.5).unwrap();
            let ev = NeumannEvaluator::fem(&mesh).unwrap();
            mesh.electrode_centroids()
                .iter()
                .map(|&x| (ev.value(x, z).unwrap() - disc.value(x, z).unwrap()).abs())
                .fold(0.0, f64::max)
        };
        let coarse = err_of(3);
        let fine = err_of(6);
        assert!(
            coarse >= 2.0 * fine,
            "coarse {coarse} vs fine {fine}: ratio {}",
            coarse / fine
        );
    }

    #[test]
    fn gradients_match_finite_differences_in_all_modes() {
        let rho = 1.0;
        let mesh = make_disc_mesh(rho, 4, 16, 0.5).unwrap();
        let modes = [
            NeumannEvaluator::disc(rho, false).unwrap(),
            NeumannEvaluator::freespace(),
            NeumannEvaluator::fem(&mesh).unwrap(),
        ];
        let mut rng = StdRng::seed_from_u64(9);
        for ev in &modes {
            for _ in 0..100 {
                let x = on_circle(rho, rng.random_range(0.0..2.0 * PI));
                let r = rng.random_range(0.05..0.9 * rho);
                let t = rng.random_range(0.0..2.0 * PI);
                let z = [r * t.cos(), r * t.sin()];
                let g = ev.grad_z(x, z).unwrap();
                let h = 1e-6;
                let fd = [
                    (ev.value(x, [z[0] + h, z[1]]).unwrap()
                        - ev.value(x, [z[0] - h, z[1]]).unwrap())
                        / (2.0 * h),
                    (ev.value(x, [z[0], z[1] + h]).unwrap()
                        - ev.value(x, [z[0], z[1] - h]).unwrap())
                        / (2.0 * h),
                ];
                let gn = (g[0] * g[0] + g[1] * g[1]).sqrt().max(1e-6);
                let err = dist(g, fd) / gn;
                assert!(err <= 1e-6, "z {z:?} x {x:?}: err {err}");
            }
        }
    }

    #[test]
    fn cache_file_reused() {
        let dir = std::env::temp_dir().join(format!("eitpt_neumann_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mesh = make_disc_mesh(1.0, 2, 16, 0.5).unwrap();
        let path = dir.join(format!("neumann_{:016x}.bin", mesh.hash()));
        let _ = std::fs::remove_file(&path);
        let a = NeumannEvaluator::fem_cached(&mesh, &dir).unwrap();
        assert!(path.exists());
        let stamp = std::fs::metadata(&path).unwrap().modified().unwrap();
        let b = NeumannEvaluator::fem_cached(&mesh, &dir).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().modified().unwrap(), stamp);
        match (&a, &b) {
            (NeumannEvaluator::Fem { table: ta, .. }, NeumannEvaluator::Fem { table: tb, .. }) => {
                assert_eq!(ta, tb);
            }
            _ => panic!("expected fem mode"),
        }
        let _ = std::fs::remove_dir_all(&dir);
    }
}
