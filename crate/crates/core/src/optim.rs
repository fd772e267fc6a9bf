//! Reconstruction engines: l-BFGS with a pluggable per-iteration initial
//! diagonal, a dense-BFGS tracking mode, a Gauss-Newton baseline, graph
//! Laplacian regularization, weak-Wolfe line search, and run records.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{gn_diag, Operator};
use crate::error::{Error, Result};
use crate::fem::ConductivityField;
use crate::mesh::TriMesh;
use crate::neumann::NeumannEvaluator;
use crate::numerics::{svd, DenseMat, Vector};
use crate::ptensor::{
    approx_hessian_diag, element_ellipses, sensitivity_coefficients, SensitivityTable,
};

const ARMIJO_C1: f64 = 1e-4;
const MAX_LS_TRIALS: usize = 40;
/// Conductivity components never drop below this during a line search.
const POSITIVITY_FLOOR: f64 = 1e-6;

/// Reconstruction variants: Gauss-Newton, and l-BFGS seeded per iteration
/// with the polarization-tensor diagonal, the Gauss-Newton diagonal, the
/// Gauss-Newton diagonal plus second-order correction, or the identity.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GN")]
    Gn,
    #[serde(rename = "LBFGS_H")]
    LbfgsH,
    #[serde(rename = "LBFGS_GN")]
    LbfgsGn,
    #[serde(rename = "LBFGS_GNH")]
    LbfgsGnh,
    #[serde(rename = "LBFGS_I")]
    LbfgsI,
}

/// Graph Laplacian on the element adjacency: (Lm)_i = sum over neighbours j
/// of (m_j - m_i). Symmetric, annihilates constants.
pub struct LaplaceReg {
    lambda: f64,
    neighbors: Vec<Vec<usize>>,
}

impl LaplaceReg {
    pub fn new(mesh: &TriMesh, lambda: f64) -> Self {
        LaplaceReg {
            lambda,
            neighbors: mesh.adjacency().to_vec(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn apply_l(&self, m: &Vector) -> Vector {
        Vector::from_iterator(
            m.len(),
            self.neighbors
                .iter()
                .enumerate()
                .map(|(i, nb)| nb.iter().map(|&j| m[j] - m[i]).sum()),
        )
    }

    /// lambda ||L m||^2.
    pub fn value(&self, m: &Vector) -> f64 {
        self.lambda * self.apply_l(m).norm_squared()
    }

    /// 2 lambda L^T L m; L is symmetric so this is 2 lambda L(Lm).
    pub fn gradient(&self, m: &Vector) -> Vector {
        self.apply_l(&self.apply_l(m)) * (2.0 * self.lambda)
    }

    /// diag(2 lambda L^T L) = 2 lambda (deg + deg^2).
    pub fn hessian_diag(&self) -> Vector {
        Vector::from_iterator(
            self.neighbors.len(),
            self.neighbors.iter().map(|nb| {
                let d = nb.len() as f64;
                2.0 * self.lambda * (d + d * d)
            }),
        )
    }

    /// Dense 2 lambda L^T L.
    pub fn hessian_dense(&self) -> DenseMat {
        let n = self.neighbors.len();
        let mut l = DenseMat::zeros(n, n);
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                l[(i, j)] += 1.0;
                l[(i, i)] -= 1.0;
            }
        }
        (&l.transpose() * &l) * (2.0 * self.lambda)
    }
}

/// Regularized objective Phi(m) = 0.5 ||F(m) - d||^2 + lambda ||L m||^2.
pub struct Objective<'a, 'm> {
    pub op: &'a Operator<'m>,
    pub d: &'a Vector,
    pub reg: LaplaceReg,
}

/// Everything produced by one objective evaluation; the Jacobian rides along
/// because gradients already require the adjoint solves.
pub struct Evaluation {
    pub phi: f64,
    pub misfit: f64,
    pub grad: Vector,
    pub f: Vector,
    pub jac: DenseMat,
}

impl Objective<'_, '_> {
    pub fn evaluate(&self, m: &ConductivityField) -> Result<Evaluation> {
        let (f, jac) = self.op.forward_with_jacobian(m)?;
        let res = &f - self.d;
        let misfit = 0.5 * res.norm_squared();
        let phi = misfit + self.reg.value(m.values());
        let grad = jac.transpose() * res + self.reg.gradient(m.values());
        Ok(Evaluation {
            phi,
            misfit,
            grad,
            f,
            jac,
        })
    }
}

/// Two-loop l-BFGS direction p = -B^-1 g seeded with the diagonal h0.
/// With empty memory this reduces to -g ./ h0.
pub fn lbfgs_direction(pairs: &[(Vector, Vector)], h0: &Vector, g: &Vector) -> Result<Vector> {
    if let Some(i) = (0..h0.len()).find(|&i| !(h0[i] > 0.0)) {
        return Err(Error::NonPositiveDiagonal(i));
    }
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / y.dot(s);
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    let mut r = q.component_div(h0);
    for ((s, y), &a) in pairs.iter().zip(alphas.iter().rev()) {
        let beta = y.dot(&r) / y.dot(s);
        r.axpy(a - beta, s, 1.0);
    }
    Ok(-r)
}

/// Dense BFGS Hessian update B' = B - (Bs s^T B)/(s^T B s) + (y y^T)/(y^T s).
pub fn bfgs_dense_update(b: &DenseMat, s: &Vector, y: &Vector) -> Result<DenseMat> {
    let sy = s.dot(y);
    if sy <= 0.0 {
        return Err(Error::CurvatureViolation(sy));
    }
    let bs = b * s;
    let sbs = s.dot(&bs);
    if sbs <= 0.0 {
        return Err(Error::CurvatureViolation(sbs));
    }
    let mut out = b.clone();
    out.ger(-1.0 / sbs, &bs, &bs, 1.0);
    out.ger(1.0 / sy, y, y, 1.0);
    Ok(out)
}

pub struct LineSearchOutcome<E> {
    pub alpha: f64,
    pub point: Vector,
    pub eval: E,
    pub n_evals: usize,
}

/// Armijo backtracking from the unit step, with positivity preserved by
/// capping the step so every component stays at or above the floor. The
/// first step fraction satisfying the sufficient-decrease condition wins;
/// curvature is enforced separately where update pairs are admitted.
pub fn line_search<E, F>(
    eval_fn: &mut F,
    m0: &Vector,
    phi0: f64,
    g0: &Vector,
    p: &Vector,
) -> Result<LineSearchOutcome<E>>
where
    F: FnMut(&Vector) -> Result<(f64, Vector, E)>,
{
    let d0 = g0.dot(p);
    if !(d0 < 0.0) {
        return Err(Error::InvalidParam(format!(
            "line search needs a descent direction (p.g = {d0})"
        )));
    }
    let mut cap = f64::INFINITY;
    for i in 0..m0.len() {
        if p[i] < 0.0 {
            cap = cap.min((m0[i] - POSITIVITY_FLOOR) / -p[i]);
        }
    }
    if cap <= 0.0 {
        return Err(Error::LineSearchFailed(0));
    }

    let trial_point = |alpha: f64| {
        Vector::from_iterator(
            m0.len(),
            (0..m0.len()).map(|i| (m0[i] + alpha * p[i]).max(POSITIVITY_FLOOR)),
        )
    };

    let mut alpha = 1.0f64.min(cap);
    for trial in 1..=MAX_LS_TRIALS {
        let point = trial_point(alpha);
        let (phi, _, payload) = eval_fn(&point)?;
        if phi.is_finite() && phi <= phi0 + ARMIJO_C1 * alpha * d0 {
            return Ok(LineSearchOutcome {
                alpha,
                point,
                eval: payload,
                n_evals: trial,
            });
        }
        alpha *= 0.5;
    }
    Err(Error::LineSearchFailed(MAX_LS_TRIALS))
}

/// Per-iteration initial diagonal of each l-BFGS variant, regularization
/// part included. `table` carries the polarization-tensor coefficients and
/// is required by LBFGS_H and LBFGS_GNH.
pub fn initial_diagonal(
    variant: Variant,
    eval: &Evaluation,
    d: &Vector,
    table: Option<&SensitivityTable>,
    reg: &LaplaceReg,
) -> Result<Vector> {
    let missing = || Error::MissingField("sensitivity table".into());
    let base = match variant {
        Variant::Gn => {
            return Err(Error::InvalidParam(
                "Gauss-Newton has no initial diagonal".into(),
            ))
        }
        Variant::LbfgsI => Vector::from_element(eval.jac.ncols(), 1.0),
        Variant::LbfgsGn => gn_diag(&eval.jac),
        Variant::LbfgsGnh => {
            let t = table.ok_or_else(missing)?;
            let res = &eval.f - d;
            let v = gn_diag(&eval.jac) + t.d.transpose() * res;
            // Same safeguard as the pure tensor diagonal: the residual term
            // can push entries negative, which would break descent.
            let floor = 1e-12 * v.max();
            v.map(|x| x.max(floor))
        }
        Variant::LbfgsH => {
            let t = table.ok_or_else(missing)?;
            approx_hessian_diag(t, &eval.f, d)?.floored()
        }
    };
    Ok(base + reg.hessian_diag())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Termination {
    Converged,
    Stagnated,
    MaxIter,
    LineSearchFailed,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::Stagnated => "stagnated",
            Termination::MaxIter => "max_iter",
            Termination::LineSearchFailed => "line_search_failed",
        }
    }
}

pub struct IterRecord {
    pub iter: usize,
    pub phi: f64,
    /// Phi(m_k) / Phi(m_0).
    pub rel_resid: f64,
    pub step: f64,
    pub ls_evals: usize,
    pub wall_ms: f64,
}

pub struct SolverRun {
    pub records: Vec<IterRecord>,
    pub iterates: Vec<Vector>,
    pub image: Vector,
    pub termination: Termination,
    /// Dense-tracking mode only: B at every recorded iterate.
    pub b_history: Vec<DenseMat>,
    pub curvature_skips: usize,
}

impl SolverRun {
    pub fn final_rel_resid(&self) -> f64 {
        self.records.last().map_or(1.0, |r| r.rel_resid)
    }
}

pub struct RecoSettings {
    pub variant: Variant,
    pub lambda: f64,
    pub lbfgs_memory: usize,
    /// Relative decrease threshold; 0 disables the stagnation stop.
    pub stagnation_tol: f64,
    pub max_iter: usize,
    /// Keep the iteration-0 initial diagonal for the whole run.
    pub freeze_h0: bool,
    pub neumann_const_alt: bool,
    /// Homogeneous starting value.
    pub sigma0: f64,
    /// Replace the two-loop recursion with a fully updated dense BFGS matrix
    /// and record it each iterate.
    pub track_b: bool,
}

impl Default for RecoSettings {
    fn default() -> Self {
        RecoSettings {
            variant: Variant::LbfgsH,
            lambda: 5e-5,
            lbfgs_memory: 20,
            stagnation_tol: 1e-4,
            max_iter: 100,
            freeze_h0: false,
            neumann_const_alt: false,
            sigma0: 1.0,
            track_b: false,
        }
    }
}

/// Polarization-tensor assets shared across iterations: the background
/// fields and ellipses never change, only the contrast derivatives do.
struct TensorAssets<'m> {
    mesh: &'m TriMesh,
    ellipses: Vec<crate::mesh::EquivalentEllipse>,
    u0: Vec<Vec<[f64; 2]>>,
    pairs: Vec<(usize, usize)>,
    alt_const: bool,
}

impl<'m> TensorAssets<'m> {
    fn build(op: &Operator<'m>, sigma0: f64, alt_const: bool) -> Result<Self> {
        let mesh = op.mesh();
        let m0 = ConductivityField::uniform(mesh.n_elements(), sigma0)?;
        let (_, sol, _) = op.forward_solution(&m0)?;
        Ok(TensorAssets {
            mesh,
            ellipses: element_ellipses(mesh)?,
            u0: crate::adjoint::background_field_gradients(mesh, &sol),
            pairs: op.pairs(),
            alt_const,
        })
    }

    fn table_at(&self, m: &ConductivityField) -> Result<SensitivityTable> {
        let ev = NeumannEvaluator::disc(self.mesh.radius(), self.alt_const)?;
        sensitivity_coefficients(self.mesh, &self.ellipses, &self.u0, &self.pairs, &ev, m)
    }
}

/// Runs the configured variant from the homogeneous start until convergence,
/// stagnation, the iteration cap, or a failed line search (the last three
/// are normal terminations recorded in the run).
pub fn reconstruct(op: &Operator<'_>, d: &Vector, settings: &RecoSettings) -> Result<SolverRun> {
    if settings.track_b && settings.variant == Variant::Gn {
        return Err(Error::InvalidParam(
            "dense BFGS tracking needs an l-BFGS variant".into(),
        ));
    }
    let n_e = op.mesh().n_elements();
    let reg = LaplaceReg::new(op.mesh(), settings.lambda);
    let obj = Objective { op, d, reg };
    let needs_table = matches!(settings.variant, Variant::LbfgsH | Variant::LbfgsGnh);
    let assets = if needs_table {
        Some(TensorAssets::build(
            op,
            settings.sigma0,
            settings.neumann_const_alt,
        )?)
    } else {
        None
    };

    let start = Instant::now();
    let mut m = ConductivityField::uniform(n_e, settings.sigma0)?;
    let mut eval = obj.evaluate(&m)?;
    let phi0 = eval.phi;
    let mut records = vec![IterRecord {
        iter: 0,
        phi: phi0,
        rel_resid: 1.0,
        step: 0.0,
        ls_evals: 0,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }];
    let mut iterates = vec![m.values().clone()];
    let mut b_history = Vec::new();
    let mut curvature_skips = 0usize;

    if phi0 == 0.0 || eval.grad.norm() <= 1e-15 * (1.0 + phi0) {
        return Ok(SolverRun {
            records,
            image: m.values().clone(),
            iterates,
            termination: Termination::Converged,
            b_history,
            curvature_skips,
        });
    }

    let table_at = |m: &ConductivityField| -> Result<Option<SensitivityTable>> {
        match &assets {
            Some(a) => Ok(Some(a.table_at(m)?)),
            None => Ok(None),
        }
    };

    let mut frozen_diag: Option<Vector> = None;
    let mut dense_b: Option<DenseMat> = None;
    let mut pairs: Vec<(Vector, Vector)> = Vec::new();
    let mut termination = Termination::MaxIter;

    for k in 1..=settings.max_iter {
        let t_iter = Instant::now();
        // Direction from the state at the current iterate.
        let p = if settings.variant == Variant::Gn {
            let h = eval.jac.transpose() * &eval.jac + obj.reg.hessian_dense();
            let g = &eval.grad;
            match h.clone().cholesky() {
                Some(c) => -c.solve(g),
                None => {
                    let lu = h.full_piv_lu();
                    if !lu.is_invertible() {
                        return Err(Error::SingularMatrix);
                    }
                    -lu.solve(g).unwrap()
                }
            }
        } else {
            let diag = match &frozen_diag {
                Some(d0) => d0.clone(),
                None => {
                    let t = table_at(&m)?;
                    let d0 = initial_diagonal(settings.variant, &eval, d, t.as_ref(), &obj.reg)?;
                    if settings.freeze_h0 {
                        frozen_diag = Some(d0.clone());
                    }
                    d0
                }
            };
            if settings.track_b {
                let b = dense_b.get_or_insert_with(|| DenseMat::from_diagonal(&diag));
                if b_history.is_empty() {
                    b_history.push(b.clone());
                }
                let c = b
                    .clone()
                    .cholesky()
                    .ok_or(Error::SingularMatrix)?;
                -c.solve(&eval.grad)
            } else {
                lbfgs_direction(&pairs, &diag, &eval.grad)?
            }
        };

        let mut eval_fn = |v: &Vector| -> Result<(f64, Vector, Evaluation)> {
            let mt = ConductivityField::new(v.clone())?;
            let e = obj.evaluate(&mt)?;
            Ok((e.phi, e.grad.clone(), e))
        };
        let outcome = match line_search(&mut eval_fn, m.values(), eval.phi, &eval.grad, &p) {
            Ok(o) => o,
            Err(Error::LineSearchFailed(_)) => {
                termination = Termination::LineSearchFailed;
                break;
            }
            Err(e) => return Err(e),
        };
        let m_new = ConductivityField::new(outcome.point.clone())?;
        let eval_new = outcome.eval;

        assert!(
            eval_new.phi <= eval.phi,
            "objective increased: {} -> {}",
            eval.phi,
            eval_new.phi
        );

        let s = m_new.values() - m.values();
        let y = &eval_new.grad - &eval.grad;
        if s.dot(&y) > 0.0 {
            if settings.track_b {
                let b = dense_b.as_mut().unwrap();
                *b = bfgs_dense_update(b, &s, &y)?;
            } else {
                pairs.push((s, y));
                if pairs.len() > settings.lbfgs_memory {
                    pairs.remove(0);
                }
            }
        } else {
            curvature_skips += 1;
        }
        if settings.track_b {
            b_history.push(dense_b.clone().unwrap());
        }

        let phi_prev = eval.phi;
        m = m_new;
        eval = eval_new;
        iterates.push(m.values().clone());
        records.push(IterRecord {
            iter: k,
            phi: eval.phi,
            rel_resid: eval.phi / phi0,
            step: outcome.alpha,
            ls_evals: outcome.n_evals,
            wall_ms: t_iter.elapsed().as_secs_f64() * 1e3,
        });

        if eval.grad.norm() <= 1e-15 * (1.0 + eval.phi) {
            termination = Termination::Converged;
            break;
        }
        if settings.stagnation_tol > 0.0
            && (phi_prev - eval.phi) / phi0 < settings.stagnation_tol
        {
            termination = Termination::Stagnated;
            break;
        }
    }

    Ok(SolverRun {
        image: m.values().clone(),
        records,
        iterates,
        termination,
        b_history,
        curvature_skips,
    })
}

/// Frobenius distance and principal angles between each recorded B and the
/// reference Hessian. Angles compare the spans of the top right singular
/// vectors (at most 20).
pub fn hessian_metrics(
    b_history: &[DenseMat],
    h_true: &DenseMat,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = h_true.nrows();
    if h_true.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: h_true.ncols(),
        });
    }
    for b in b_history {
        if b.nrows() != n || b.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.nrows(),
            });
        }
    }
    let k = 20.min(n);
    let h_norm = h_true.norm();
    let (_, _, vh) = svd(h_true)?;
    let v = vh.columns(0, k).into_owned();
    let mut frob = Vec::with_capacity(b_history.len());
    let mut angles = Vec::with_capacity(b_history.len());
    for b in b_history {
        frob.push((b - h_true).norm() / h_norm);
        let (_, _, wb) = svd(b)?;
        let w = wb.columns(0, k).into_owned();
        let (_, sig, _) = svd(&(v.transpose() * &w))?;
        let mut a: Vec<f64> = sig.iter().map(|&s| s.clamp(0.0, 1.0).acos()).collect();
        a.sort_by(f64::total_cmp);
        angles.push(a);
    }
    Ok((frob, angles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{ElectrodeConfig, MeasurementSelection};
    use crate::mesh::make_disc_mesh;
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    #[test]
    fn laplacian_basics() {
        let mesh = make_disc_mesh(1.0, 2, 16, 0.5).unwrap();
        let reg = LaplaceReg::new(&mesh, 5e-5);
        let ones = Vector::from_element(mesh.n_elements(), 1.0);
        assert!(reg.apply_l(&ones).norm() < 1e-14);
        assert_eq!(reg.value(&ones), 0.0);

        let mut rng = StdRng::seed_from_u64(1);
        let m = Vector::from_fn(mesh.n_elements(), |_, _| rng.random_range(0.5..2.0));
        // Quadratic form positive semidefinite and consistent with the dense
        // Hessian.
        let h = reg.hessian_dense();
        let quad = (m.transpose() * &h * &m)[(0, 0)];
        assert!((quad - 2.0 * reg.value(&m)).abs() <= 1e-10 * quad.abs());
        let hd = reg.hessian_diag();
        for i in 0..mesh.n_elements() {
            assert!((h[(i, i)] - hd[i]).abs() < 1e-14);
        }
        // Gradient against central differences of the value.
        let g = reg.gradient(&m);
        for &i in &[0usize, 17, 40] {
            let step = 1e-6;
            let mut up = m.clone();
            up[i] += step;
            let mut dn = m.clone();
            dn[i] -= step;
            let fd = (reg.value(&up) - reg.value(&dn)) / (2.0 * step);
            assert!((g[i] - fd).abs() <= 1e-8 * fd.abs().max(1e-12));
        }
    }

    #[test]
    fn two_loop_empty_memory() {
        let g = Vector::from_vec(vec![2.0, 4.0]);
        let p = lbfgs_direction(&[], &Vector::from_element(2, 1.0), &g).unwrap();
        assert_eq!(p.as_slice(), &[-2.0, -4.0]);
        let p2 = lbfgs_direction(&[], &Vector::from_vec(vec![2.0, 4.0]), &g).unwrap();
        assert_eq!(p2.as_slice(), &[-1.0, -1.0]);
        let bad = lbfgs_direction(&[], &Vector::from_vec(vec![1.0, 0.0]), &g);
        assert!(matches!(bad, Err(Error::NonPositiveDiagonal(1))));
    }

    fn random_spd(n: usize, seed: u64) -> DenseMat {
        let mut rng = StdRng::seed_from_u64(seed);
        let l = DenseMat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &l * l.transpose() + DenseMat::identity(n, n) * 0.5
    }

    #[test]
    fn two_loop_minimizes_quadratic() {
        // Exact line search on 0.5 m^T A m; l-BFGS must converge in at most
        // n steps like CG.
        let n = 10;
        let a = random_spd(n, 2);
        let mut m = Vector::from_element(n, 1.0);
        let h0 = Vector::from_element(n, 1.0);
        let mut pairs: Vec<(Vector, Vector)> = Vec::new();
        let mut done = false;
        for _ in 0..10 {
            let g = &a * &m;
            if g.norm() <= 1e-8 {
                done = true;
                break;
            }
            let p = lbfgs_direction(&pairs, &h0, &g).unwrap();
            let alpha = -g.dot(&p) / (p.transpose() * &a * &p)[(0, 0)];
            let s = &p * alpha;
            let y = &a * &s;
            m += &s;
            pairs.push((s, y));
        }
        let g = &a * &m;
        assert!(done || g.norm() <= 1e-8, "final gradient {}", g.norm());
    }

    #[test]
    fn dense_update_identities() {
        let n = 6;
        let b = DenseMat::identity(n, n);
        let mut rng = StdRng::seed_from_u64(3);
        let s = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let fixed = bfgs_dense_update(&b, &s, &s.clone()).unwrap();
        assert!((&fixed - &b).norm() < 1e-14, "s = y keeps the identity");

        let y = Vector::from_fn(n, |_, _| rng.random_range(0.1..1.0)).component_mul(&s) + &s * 2.0;
        if s.dot(&y) > 0.0 {
            let b2 = bfgs_dense_update(&b, &s, &y).unwrap();
            assert!(((&b2 * &s) - &y).norm() <= 1e-12 * y.norm(), "secant");
            assert!((&b2 - b2.transpose()).norm() <= 1e-12);
        }

        assert!(matches!(
            bfgs_dense_update(&b, &s, &(-&s)),
            Err(Error::CurvatureViolation(_))
        ));
    }

    #[test]
    fn dense_update_converges_on_quadratic() {
        // BFGS iteration with exact steps on a quadratic: the Hessian
        // estimate settles onto A, monotonically so once the line-search
        // directions have swept the space.
        let n = 50;
        let a = random_spd(n, 4);
        let mut b = DenseMat::identity(n, n);
        let mut rng = StdRng::seed_from_u64(5);
        let mut m = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mut errs = Vec::new();
        for _ in 0..50 {
            let g = &a * &m;
            let p = -(b.clone().cholesky().unwrap().solve(&g));
            let alpha = -g.dot(&p) / (p.transpose() * &a * &p)[(0, 0)];
            let s = &p * alpha;
            let y = &a * &s;
            b = bfgs_dense_update(&b, &s, &y).unwrap();
            m += &s;
            errs.push((&b - &a).norm() / a.norm());
        }
        for w in errs[40..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "late-stage error rose: {w:?}");
        }
        assert!(errs[49] < 0.5 * errs[0]);
    }

    #[test]
    fn two_loop_matches_dense_inverse() {
        // Same pair history and fixed H0: the two-loop result must equal the
        // direction from the explicitly updated dense matrix.
        let n = 20;
        let a = random_spd(n, 6);
        let h0 = Vector::from_element(n, 1.0);
        let mut b = DenseMat::identity(n, n);
        let mut pairs: Vec<(Vector, Vector)> = Vec::new();
        let mut m = Vector::from_element(n, 2.0);
        for _ in 0..12 {
            let g = &a * &m;
            let p = lbfgs_direction(&pairs, &h0, &g).unwrap();
            let alpha = -g.dot(&p) / (p.transpose() * &a * &p)[(0, 0)];
            let s = &p * alpha;
            let y = &a * &s;
            b = bfgs_dense_update(&b, &s, &y).unwrap();
            m += &s;
            pairs.push((s, y));

            let g2 = &a * &m;
            if g2.norm() < 1e-12 {
                break;
            }
            let p_two = lbfgs_direction(&pairs, &h0, &g2).unwrap();
            let p_dense = -b.clone().cholesky().unwrap().solve(&g2);
            assert!(
                (&p_two - &p_dense).norm() <= 1e-10 * p_dense.norm(),
                "direction mismatch"
            );
        }
    }

    fn scalar_search(
        phi: impl Fn(f64) -> f64,
        dphi: impl Fn(f64) -> f64,
        x0: f64,
        p: f64,
    ) -> Result<(f64, usize)> {
        let mut f = |v: &Vector| -> Result<(f64, Vector, ())> {
            Ok((phi(v[0]), Vector::from_vec(vec![dphi(v[0])]), ()))
        };
        let out = line_search(
            &mut f,
            &Vector::from_vec(vec![x0]),
            phi(x0),
            &Vector::from_vec(vec![dphi(x0)]),
            &Vector::from_vec(vec![p]),
        )?;
        Ok((out.alpha, out.n_evals))
    }

    #[test]
    fn line_search_takes_newton_step_on_quadratic() {
        let (alpha, evals) = scalar_search(|x| (x - 1.0) * (x - 1.0), |x| 2.0 * (x - 1.0), 0.0, 1.0)
            .unwrap();
        assert_eq!(alpha, 1.0);
        assert_eq!(evals, 1);
    }

    #[test]
    fn line_search_rejects_ascent() {
        let r = scalar_search(|x| x * x, |x| 2.0 * x, 1.0, 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn line_search_backtracks_over_cliff() {
        // Quadratic valley with a wall past x = 0.6.
        let phi = |x: f64| {
            if x > 0.6 {
                1e6
            } else {
                (x - 0.5) * (x - 0.5)
            }
        };
        let dphi = |x: f64| if x > 0.6 { 0.0 } else { 2.0 * (x - 0.5) };
        let (alpha, _) = scalar_search(phi, dphi, 0.0, 1.0).unwrap();
        assert!(alpha < 1.0 && alpha <= 0.6 + 1e-12);
        assert!(phi(alpha) < phi(0.0));
    }

    #[test]
    fn line_search_fails_on_nan_objective() {
        let r = scalar_search(|_| f64::NAN, |_| -1.0, 1.0, 1.0);
        assert!(matches!(r, Err(Error::LineSearchFailed(MAX_LS_TRIALS))));
    }

    #[test]
    fn line_search_respects_positivity_floor() {
        // Objective pulls hard toward negative x; every trial stays above
        // the floor.
        let phi = |x: f64| x;
        let dphi = |_: f64| 1.0;
        let mut f = |v: &Vector| -> Result<(f64, Vector, ())> {
            assert!(v[0] >= POSITIVITY_FLOOR - 1e-18);
            Ok((phi(v[0]), Vector::from_vec(vec![dphi(v[0])]), ()))
        };
        let out = line_search(
            &mut f,
            &Vector::from_vec(vec![0.5]),
            0.5,
            &Vector::from_vec(vec![1.0]),
            &Vector::from_vec(vec![-1.0]),
        )
        .unwrap();
        assert!(out.point[0] >= POSITIVITY_FLOOR);
        // Steepest useful step: right at the cap.
        assert!((out.point[0] - POSITIVITY_FLOOR).abs() < 1e-12);
    }

    struct Setup {
        mesh: TriMesh,
    }

    impl Setup {
        fn new(rings: usize) -> Self {
            Setup {
                mesh: make_disc_mesh(1.0, rings, 16, 0.5).unwrap(),
            }
        }
        fn operator(&self) -> Operator<'_> {
            let eta = ElectrodeConfig::uniform(16, 0.01).unwrap();
            Operator::new(&self.mesh, eta, MeasurementSelection::default()).unwrap()
        }
        fn phantom_data(&self, op: &Operator<'_>) -> Vector {
            let mut v = Vector::from_element(self.mesh.n_elements(), 1.0);
            for i in 0..self.mesh.n_elements() {
                let c = self.mesh.centroids()[i];
                if (c[0] - 0.3).powi(2) + (c[1] - 0.3).powi(2) < 0.25 * 0.25 {
                    v[i] = 2.0;
                }
            }
            op.forward(&ConductivityField::new(v).unwrap()).unwrap()
        }
    }

    #[test]
    fn objective_gradient_matches_fd() {
        let s = Setup::new(2);
        let op = s.operator();
        let d = s.phantom_data(&op);
        let obj = Objective {
            op: &op,
            d: &d,
            reg: LaplaceReg::new(&s.mesh, 5e-5),
        };
        let mut rng = StdRng::seed_from_u64(8);
        let m0 = Vector::from_fn(s.mesh.n_elements(), |_, _| rng.random_range(0.8..1.2));
        let e = obj.evaluate(&ConductivityField::new(m0.clone()).unwrap()).unwrap();
        assert!(e.phi >= 0.0);
        for &i in &[0usize, 31, 60] {
            let h = 1e-6;
            let mut up = m0.clone();
            up[i] += h;
            let mut dn = m0.clone();
            dn[i] -= h;
            let pu = obj.evaluate(&ConductivityField::new(up).unwrap()).unwrap().phi;
            let pd = obj.evaluate(&ConductivityField::new(dn).unwrap()).unwrap().phi;
            let fd = (pu - pd) / (2.0 * h);
            assert!(
                (e.grad[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-12),
                "component {i}: {} vs {fd}",
                e.grad[i]
            );
        }
    }

    #[test]
    fn gnh_diag_reduces_to_gn_at_zero_residual() {
        let s = Setup::new(2);
        let op = s.operator();
        let m0 = ConductivityField::uniform(s.mesh.n_elements(), 1.0).unwrap();
        let d = op.forward(&m0).unwrap();
        let reg = LaplaceReg::new(&s.mesh, 5e-5);
        let obj = Objective { op: &op, d: &d, reg };
        let eval = obj.evaluate(&m0).unwrap();
        let assets = TensorAssets::build(&op, 1.0, false).unwrap();
        let t = assets.table_at(&m0).unwrap();
        let gnh =
            initial_diagonal(Variant::LbfgsGnh, &eval, &d, Some(&t), &obj.reg).unwrap();
        let gn = initial_diagonal(Variant::LbfgsGn, &eval, &d, None, &obj.reg).unwrap();
        assert!((&gnh - &gn).norm() <= 1e-14 * gn.norm());
        assert!(matches!(
            initial_diagonal(Variant::Gn, &eval, &d, None, &obj.reg),
            Err(Error::InvalidParam(_))
        ));
        assert!(initial_diagonal(Variant::LbfgsH, &eval, &d, None, &obj.reg).is_err());
    }

    #[test]
    fn reconstruct_terminates_immediately_on_perfect_data() {
        let s = Setup::new(2);
        let op = s.operator();
        let m0 = ConductivityField::uniform(s.mesh.n_elements(), 1.0).unwrap();
        let d = op.forward(&m0).unwrap();
        let run = reconstruct(&op, &d, &RecoSettings::default()).unwrap();
        assert_eq!(run.records.len(), 1);
        assert_eq!(run.termination, Termination::Converged);
        assert!((run.image - m0.values()).norm() == 0.0);
    }

    #[test]
    fn reconstruct_descends_on_all_variants() {
        let s = Setup::new(2);
        let op = s.operator();
        let d = s.phantom_data(&op);
        for variant in [
            Variant::Gn,
            Variant::LbfgsH,
            Variant::LbfgsGn,
            Variant::LbfgsGnh,
            Variant::LbfgsI,
        ] {
            let settings = RecoSettings {
                variant,
                max_iter: 4,
                stagnation_tol: 0.0,
                ..RecoSettings::default()
            };
            let run = reconstruct(&op, &d, &settings).unwrap();
            assert!(run.records.len() >= 2, "{variant:?} made no step");
            for w in run.records.windows(2) {
                assert!(w[1].phi < w[0].phi, "{variant:?} not strictly decreasing");
            }
            assert!(run.final_rel_resid() < 1.0);
            assert_eq!(run.iterates.len(), run.records.len());
        }
    }

    #[test]
    fn dense_tracking_records_b_per_iterate() {
        let s = Setup::new(2);
        let op = s.operator();
        let d = s.phantom_data(&op);
        let settings = RecoSettings {
            variant: Variant::LbfgsGn,
            max_iter: 3,
            stagnation_tol: 0.0,
            track_b: true,
            ..RecoSettings::default()
        };
        let run = reconstruct(&op, &d, &settings).unwrap();
        assert_eq!(run.b_history.len(), run.records.len());
        for b in &run.b_history {
            assert!((b - b.transpose()).norm() <= 1e-9 * b.norm(), "B not symmetric");
        }
        assert!(matches!(
            reconstruct(
                &op,
                &d,
                &RecoSettings {
                    variant: Variant::Gn,
                    track_b: true,
                    ..RecoSettings::default()
                }
            ),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn stagnation_rule_stops_early() {
        let s = Setup::new(2);
        let op = s.operator();
        let d = s.phantom_data(&op);
        let strict = RecoSettings {
            variant: Variant::LbfgsGn,
            stagnation_tol: 0.5,
            ..RecoSettings::default()
        };
        let run = reconstruct(&op, &d, &strict).unwrap();
        assert_eq!(run.termination, Termination::Stagnated);
        assert!(run.records.len() <= 3);
    }

    #[test]
    fn metrics_reference_cases() {
        let n = 40;
        let mut h = DenseMat::zeros(n, n);
        let mut b = DenseMat::zeros(n, n);
        for i in 0..20 {
            h[(i, i)] = 40.0 - i as f64;
            b[(i, i)] = 1e-3 * (i + 1) as f64;
        }
        for i in 20..40 {
            h[(i, i)] = 1e-3 * (i - 19) as f64;
            b[(i, i)] = 60.0 - i as f64;
        }
        let (frob, angles) = hessian_metrics(&[h.clone(), b.clone()], &h).unwrap();
        assert!(frob[0] == 0.0);
        assert!(angles[0].iter().all(|&a| a.abs() < 1e-7), "self angles");
        assert!(frob[1] > 0.0);
        for &a in &angles[1] {
            assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-7, "angle {a}");
        }
        for w in angles[1].windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        let small = DenseMat::identity(3, 3);
        assert!(hessian_metrics(&[small], &h).is_err());
    }
}
