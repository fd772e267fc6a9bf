//! Exact discrete sensitivities of the forward map: misfit and gradient,
//! the full Jacobian, and the true Hessian, all assembled from adjoint
//! solves against the shared forward factorization.

use crate::error::{Error, Result};
use crate::fem::{
    adjacent_patterns, element_field_gradients, local_stiffness, CemSystem, ConductivityField,
    CurrentPatternSet, ElectrodeConfig, ForwardSolution, MeasurementSelection,
};
use crate::mesh::TriMesh;
use crate::numerics::{DenseMat, Vector};

/// Largest element count for which the dense true Hessian is assembled.
pub const DEFAULT_HESSIAN_CAP: usize = 512;

/// Which parts of the true Hessian to materialize.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    Diagonal,
    Full,
}

/// True Hessian of the data misfit. `full` is present in full mode only;
/// `diag` always holds the diagonal, and `gauss_newton_diag` its first-order
/// part diag(J^T J).
pub struct TrueHessian {
    pub diag: Vector,
    pub full: Option<DenseMat>,
    pub gauss_newton_diag: Vector,
}

/// diag(J^T J): per-column sums of squares.
pub fn gn_diag(j: &DenseMat) -> Vector {
    Vector::from_iterator(j.ncols(), j.column_iter().map(|c| c.norm_squared()))
}

/// Forward operator bound to one mesh, electrode setup, and measurement
/// selection; the unit per-element stiffness blocks (the derivatives
/// dS/dm_j) are cached at construction.
pub struct Operator<'m> {
    mesh: &'m TriMesh,
    eta: ElectrodeConfig,
    selection: MeasurementSelection,
    patterns: CurrentPatternSet,
    blocks: Vec<[[f64; 3]; 3]>,
    /// Kept raw row indices and their 0-based (pattern, electrode) split.
    kept: Vec<(usize, usize)>,
    /// Kept rows grouped by pattern: (row index into data vector, electrode).
    by_pattern: Vec<Vec<(usize, usize)>>,
    hessian_cap: usize,
}

impl<'m> Operator<'m> {
    pub fn new(
        mesh: &'m TriMesh,
        eta: ElectrodeConfig,
        selection: MeasurementSelection,
    ) -> Result<Self> {
        if eta.n_electrodes() != mesh.n_electrodes() {
            return Err(Error::DimensionMismatch {
                expected: mesh.n_electrodes(),
                got: eta.n_electrodes(),
            });
        }
        let n_l = mesh.n_electrodes();
        let patterns = adjacent_patterns(n_l);
        let kept: Vec<(usize, usize)> = selection
            .kept_indices(n_l)
            .into_iter()
            .map(|r0| (r0 / n_l, r0 % n_l))
            .collect();
        let mut by_pattern = vec![Vec::new(); n_l - 1];
        for (k, &(n0, l0)) in kept.iter().enumerate() {
            by_pattern[n0].push((k, l0));
        }
        Ok(Operator {
            mesh,
            eta,
            selection,
            patterns,
            blocks: local_stiffness(mesh),
            kept,
            by_pattern,
            hessian_cap: DEFAULT_HESSIAN_CAP,
        })
    }

    pub fn with_hessian_cap(mut self, cap: usize) -> Self {
        self.hessian_cap = cap;
        self
    }

    pub fn mesh(&self) -> &'m TriMesh {
        self.mesh
    }
    pub fn selection(&self) -> MeasurementSelection {
        self.selection
    }
    pub fn n_data(&self) -> usize {
        self.kept.len()
    }
    pub fn n_elements(&self) -> usize {
        self.mesh.n_elements()
    }
    /// Selected (pattern, electrode) pairs, 1-based.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.kept.iter().map(|&(n0, l0)| (n0 + 1, l0 + 1)).collect()
    }

    /// Full forward sweep: assembled system, potentials, and selected data.
    pub fn forward_solution(
        &self,
        m: &ConductivityField,
    ) -> Result<(CemSystem, ForwardSolution, Vector)> {
        let sys = CemSystem::assemble(self.mesh, m, &self.eta)?;
        let sol = sys.solve_forward(&self.patterns)?;
        let f = self.selection.apply(&sol.frame);
        Ok((sys, sol, f))
    }

    pub fn forward(&self, m: &ConductivityField) -> Result<Vector> {
        Ok(self.forward_solution(m)?.2)
    }

    fn state(&self, m: &ConductivityField) -> Result<State> {
        let (sys, sol, f) = self.forward_solution(m)?;
        let w_red = sys.solve_reduced(&sys.measurement_rhs());
        let (w_nodes, _) = sys.expand(&w_red);
        let u_nodes = sol.alpha.clone();
        Ok(State {
            sys,
            u_nodes,
            w_nodes,
            f,
        })
    }

    fn jacobian_from_state(&self, st: &State) -> DenseMat {
        let n_e = self.mesh.n_elements();
        let n_l = self.mesh.n_electrodes();
        let n_pat = n_l - 1;
        let mut jac = DenseMat::zeros(self.kept.len(), n_e);
        let mut ku = DenseMat::zeros(3, n_pat);
        for j in 0..n_e {
            let tri = self.mesh.elements()[j];
            let k = &self.blocks[j];
            // ku = K_j * u restricted to this element's nodes.
            for c in 0..n_pat {
                for p in 0..3 {
                    let mut acc = 0.0;
                    for q in 0..3 {
                        acc += k[p][q] * st.u_nodes[(tri[q], c)];
                    }
                    ku[(p, c)] = acc;
                }
            }
            for (row, &(n0, l0)) in self.kept.iter().enumerate() {
                let mut acc = 0.0;
                for p in 0..3 {
                    acc += st.w_nodes[(tri[p], l0)] * ku[(p, n0)];
                }
                jac[(row, j)] = -acc;
            }
        }
        jac
    }

    /// Selected data and the full Jacobian J_rj = df_r/dm_j, sharing one
    /// factorization across the (N_L-1) forward and N_L adjoint solves.
    pub fn forward_with_jacobian(&self, m: &ConductivityField) -> Result<(Vector, DenseMat)> {
        let st = self.state(m)?;
        let jac = self.jacobian_from_state(&st);
        Ok((st.f, jac))
    }

    pub fn jacobian(&self, m: &ConductivityField) -> Result<DenseMat> {
        Ok(self.forward_with_jacobian(m)?.1)
    }

    /// Single Jacobian column, with range validation.
    pub fn jacobian_column(&self, m: &ConductivityField, j: usize) -> Result<Vector> {
        if j >= self.mesh.n_elements() {
            return Err(Error::InvalidParam(format!(
                "element {j} out of range (mesh has {})",
                self.mesh.n_elements()
            )));
        }
        let jac = self.jacobian(m)?;
        Ok(jac.column(j).into_owned())
    }

    /// Data misfit 0.5 ||F(m) - d||^2 and its gradient J^T (f - d).
    pub fn misfit_and_gradient(&self, m: &ConductivityField, d: &Vector) -> Result<(f64, Vector)> {
        let (f, jac) = self.forward_with_jacobian(m)?;
        let res = &f - d;
        Ok((0.5 * res.norm_squared(), jac.transpose() * res))
    }

    /// Second derivatives of each datum in each element's own direction:
    /// E_ri = d2 f_r / dm_i^2. Fixed coefficients let the Hessian diagonal be
    /// re-evaluated for many data vectors without further solves.
    pub fn second_derivative_diag_table(&self, m: &ConductivityField) -> Result<DenseMat> {
        let st = self.state(m)?;
        Ok(self.diag_table_from_state(&st))
    }

    fn diag_table_from_state(&self, st: &State) -> DenseMat {
        let n_e = self.mesh.n_elements();
        let n_pat = self.mesh.n_electrodes() - 1;
        let mut table = DenseMat::zeros(self.kept.len(), n_e);
        for n0 in 0..n_pat {
            let v_nodes = self.element_direction_solves(st, n0);
            for j in 0..n_e {
                let tri = self.mesh.elements()[j];
                let k = &self.blocks[j];
                let mut kv = [0.0; 3];
                for p in 0..3 {
                    for q in 0..3 {
                        kv[p] += k[p][q] * v_nodes[(tri[q], j)];
                    }
                }
                for &(row, l0) in &self.by_pattern[n0] {
                    let mut acc = 0.0;
                    for p in 0..3 {
                        acc += st.w_nodes[(tri[p], l0)] * kv[p];
                    }
                    table[(row, j)] = -2.0 * acc;
                }
            }
        }
        table
    }

    /// Nodal parts of V_i = du/dm_i = -S^-1 (dS/dm_i) u for every element,
    /// one column each, under pattern `n0`.
    fn element_direction_solves(&self, st: &State, n0: usize) -> DenseMat {
        let n_e = self.mesh.n_elements();
        let mut rhs = DenseMat::zeros(st.sys.n_reduced(), n_e);
        for j in 0..n_e {
            let tri = self.mesh.elements()[j];
            let k = &self.blocks[j];
            for p in 0..3 {
                let mut acc = 0.0;
                for q in 0..3 {
                    acc += k[p][q] * st.u_nodes[(tri[q], n0)];
                }
                if let Some(r) = st.sys.reduce_index(tri[p]) {
                    rhs[(r, j)] = acc;
                }
            }
        }
        let x = st.sys.solve_reduced(&rhs);
        let (mut v_nodes, _) = st.sys.expand(&x);
        v_nodes.neg_mut();
        v_nodes
    }

    /// True misfit Hessian H_ij = sum_r { J_ri J_rj + (d2 f_r/dm_i dm_j)(f_r - d_r) }.
    pub fn true_hessian(
        &self,
        m: &ConductivityField,
        d: &Vector,
        mode: HessianMode,
    ) -> Result<TrueHessian> {
        let n_e = self.mesh.n_elements();
        if mode == HessianMode::Full && n_e > self.hessian_cap {
            return Err(Error::CapExceeded {
                cap: self.hessian_cap,
                got: n_e,
            });
        }
        if d.len() != self.kept.len() {
            return Err(Error::DimensionMismatch {
                expected: self.kept.len(),
                got: d.len(),
            });
        }
        let st = self.state(m)?;
        let jac = self.jacobian_from_state(&st);
        let res = &st.f - d;
        let gauss_newton_diag = gn_diag(&jac);

        match mode {
            HessianMode::Diagonal => {
                let table = self.diag_table_from_state(&st);
                let diag = &gauss_newton_diag + table.transpose() * &res;
                Ok(TrueHessian {
                    diag,
                    full: None,
                    gauss_newton_diag,
                })
            }
            HessianMode::Full => {
                let n_pat = self.mesh.n_electrodes() - 1;
                let mut h = jac.transpose() * &jac;
                for n0 in 0..n_pat {
                    // Residual-collapsed adjoint field for this pattern.
                    let mut w_hat = Vector::zeros(self.mesh.n_nodes());
                    for &(row, l0) in &self.by_pattern[n0] {
                        w_hat.axpy(res[row], &st.w_nodes.column(l0), 1.0);
                    }
                    let v_nodes = self.element_direction_solves(&st, n0);
                    for j in 0..n_e {
                        let tri = self.mesh.elements()[j];
                        let k = &self.blocks[j];
                        let mut a = [0.0; 3];
                        for p in 0..3 {
                            for q in 0..3 {
                                a[p] += k[p][q] * w_hat[tri[q]];
                            }
                        }
                        for i in 0..n_e {
                            let t = a[0] * v_nodes[(tri[0], i)]
                                + a[1] * v_nodes[(tri[1], i)]
                                + a[2] * v_nodes[(tri[2], i)];
                            // H2 = -sum_n (T^n + T^n'):
                            h[(j, i)] -= t;
                            h[(i, j)] -= t;
                        }
                    }
                }
                let diag = Vector::from_iterator(n_e, (0..n_e).map(|i| h[(i, i)]));
                Ok(TrueHessian {
                    diag,
                    full: Some(h),
                    gauss_newton_diag,
                })
            }
        }
    }
}

struct State {
    sys: CemSystem,
    /// Nodal potentials per pattern; ground row zero.
    u_nodes: DenseMat,
    /// Nodal adjoint fields per measuring electrode.
    w_nodes: DenseMat,
    /// Selected data.
    f: Vector,
}

/// Per-element gradients of the homogeneous-background potentials, one list
/// per drive pattern; inputs to the sensitivity-table construction.
pub fn background_field_gradients(mesh: &TriMesh, sol: &ForwardSolution) -> Vec<Vec<[f64; 2]>> {
    (0..sol.alpha.ncols())
        .map(|n| element_field_gradients(mesh, &sol.alpha.column(n).into_owned()))
        .collect()
}
