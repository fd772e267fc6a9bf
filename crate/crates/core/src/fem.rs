//! Complete-electrode-model forward problem: stiffness and electrode-block
//! assembly, the grounded block system, multi-pattern solves, and the
//! adjacent-drive/adjacent-measure data vector with its selection rules.

use nalgebra::DVector;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::numerics::{factorize, DenseMat, Factorization, SparseSym, Vector};

// ---- parameter containers ----

/// Per-element conductivity, background-normalized. Strictly positive.
#[derive(Clone)]
pub struct ConductivityField {
    values: Vector,
}

impl ConductivityField {
    pub fn new(values: Vector) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!(
                    "conductivity element {i} is {v}; must be positive and finite"
                )));
            }
        }
        Ok(ConductivityField { values })
    }

    pub fn uniform(n: usize, v: f64) -> Result<Self> {
        Self::new(DVector::from_element(n, v))
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }
}

/// Contact impedances, one per electrode.
#[derive(Clone)]
pub struct ElectrodeConfig {
    eta: Vec<f64>,
}

impl ElectrodeConfig {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::NoElectrodes);
        }
        for (l, &e) in eta.iter().enumerate() {
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::InvalidParam(format!(
                    "contact impedance {l} is {e}; must be positive and finite"
                )));
            }
        }
        Ok(ElectrodeConfig { eta })
    }

    pub fn uniform(n_l: usize, eta: f64) -> Result<Self> {
        Self::new(vec![eta; n_l])
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn n_electrodes(&self) -> usize {
        self.eta.len()
    }
}

/// Drive currents, one column per pattern; every column sums to zero.
#[derive(Clone)]
pub struct CurrentPatternSet {
    mat: DenseMat,
}

impl CurrentPatternSet {
    pub fn matrix(&self) -> &DenseMat {
        &self.mat
    }
    pub fn n_patterns(&self) -> usize {
        self.mat.ncols()
    }
    pub fn n_electrodes(&self) -> usize {
        self.mat.nrows()
    }
}

/// Adjacent drive: pattern n injects +1 at electrode n and -1 at n+1.
pub fn adjacent_patterns(n_l: usize) -> CurrentPatternSet {
    assert!(n_l >= 2, "need at least two electrodes");
    let mut mat = DenseMat::zeros(n_l, n_l - 1);
    for n in 0..n_l - 1 {
        mat[(n, n)] = 1.0;
        mat[(n + 1, n)] = -1.0;
    }
    CurrentPatternSet { mat }
}

// ---- assembly ----

/// Unit-conductivity local stiffness of one triangle:
/// K[p][q] = area * grad(psi_p) . grad(psi_q).
pub fn unit_stiffness_block(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> Result<[[f64; 3]; 3]> {
    let area = 0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]));
    let area = area.abs();
    if area <= crate::mesh::DEGENERATE_AREA {
        return Err(Error::DegenerateElement { area });
    }
    let g = [
        [p1[1] - p2[1], p2[0] - p1[0]],
        [p2[1] - p0[1], p0[0] - p2[0]],
        [p0[1] - p1[1], p1[0] - p0[0]],
    ];
    let scale = 1.0 / (4.0 * area);
    let mut k = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            k[p][q] = scale * (g[p][0] * g[q][0] + g[p][1] * g[q][1]);
        }
    }
    Ok(k)
}

/// Unit local stiffness blocks for every element; these are exactly the
/// per-element derivatives dS/dm_j restricted to the element's nodes.
pub fn local_stiffness(mesh: &TriMesh) -> Vec<[[f64; 3]; 3]> {
    (0..mesh.n_elements())
        .map(|e| {
            let t = mesh.elements()[e];
            unit_stiffness_block(mesh.nodes()[t[0]], mesh.nodes()[t[1]], mesh.nodes()[t[2]])
                .expect("mesh elements validated non-degenerate")
        })
        .collect()
}

/// Conductivity-weighted stiffness over nodes: A_ij = sum_e m_e K_e[p][q].
pub fn assemble_stiffness(mesh: &TriMesh, m: &ConductivityField) -> Result<SparseSym> {
    if m.len() != mesh.n_elements() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_elements(),
            got: m.len(),
        });
    }
    let blocks = local_stiffness(mesh);
    let mut a = SparseSym::new(mesh.n_nodes());
    for (e, tri) in mesh.elements().iter().enumerate() {
        let me = m.values()[e];
        for p in 0..3 {
            for q in 0..3 {
                a.push(tri[p], tri[q], me * blocks[e][p][q]);
            }
        }
    }
    Ok(a)
}

/// Electrode boundary blocks. B is the contact mass over nodes, P couples
/// nodes to electrode potentials, Q is the electrode self term |E_l|/eta_l.
/// Edge integrals use the exact linear-basis edge mass (h/6)[[2,1],[1,2]].
pub fn assemble_electrode_blocks(
    mesh: &TriMesh,
    eta: &ElectrodeConfig,
) -> Result<(SparseSym, DenseMat, Vec<f64>)> {
    if eta.n_electrodes() != mesh.n_electrodes() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_electrodes(),
            got: eta.n_electrodes(),
        });
    }
    if mesh.n_electrodes() == 0 {
        return Err(Error::NoElectrodes);
    }
    let n = mesh.n_nodes();
    let n_l = mesh.n_electrodes();
    let mut b = SparseSym::new(n);
    let mut p = DenseMat::zeros(n, n_l);
    let mut q = vec![0.0; n_l];
    for (l, edges) in mesh.electrodes().iter().enumerate() {
        let inv_eta = 1.0 / eta.eta()[l];
        for &ei in edges {
            let [i, j] = mesh.boundary_edges()[ei];
            let h = mesh.edge_length([i, j]);
            b.push(i, i, h / 3.0 * inv_eta);
            b.push(j, j, h / 3.0 * inv_eta);
            b.push_sym(i, j, h / 6.0 * inv_eta);
            p[(i, l)] -= h / 2.0 * inv_eta;
            p[(j, l)] -= h / 2.0 * inv_eta;
            q[l] += h * inv_eta;
        }
    }
    Ok((b, p, q))
}

// ---- grounded block system ----

/// Assembled CEM system with the ground node removed and factored once for
/// reuse across every right-hand side.
pub struct CemSystem {
    n_nodes: usize,
    n_l: usize,
    ground: usize,
    fact: Factorization,
}

impl CemSystem {
    pub fn assemble(mesh: &TriMesh, m: &ConductivityField, eta: &ElectrodeConfig) -> Result<Self> {
        let a = assemble_stiffness(mesh, m)?;
        let (b, p, q) = assemble_electrode_blocks(mesh, eta)?;
        let n = mesh.n_nodes();
        let n_l = mesh.n_electrodes();
        let ground = mesh.ground();

        let mut s = SparseSym::new(n + n_l);
        for (i, j, v) in a.triplets() {
            s.push(i, j, v);
        }
        for (i, j, v) in b.triplets() {
            s.push(i, j, v);
        }
        for i in 0..n {
            for l in 0..n_l {
                let v = p[(i, l)];
                if v != 0.0 {
                    s.push_sym(i, n + l, v);
                }
            }
        }
        for l in 0..n_l {
            s.push(n + l, n + l, q[l]);
        }

        let reduced = s.drop_row_col(ground);
        let fact = factorize(&reduced).map_err(|e| match e {
            Error::SingularMatrix => Error::SingularSystem,
            other => other,
        })?;
        Ok(CemSystem {
            n_nodes: n,
            n_l,
            ground,
            fact,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    pub fn n_electrodes(&self) -> usize {
        self.n_l
    }
    pub fn ground(&self) -> usize {
        self.ground
    }
    pub fn n_reduced(&self) -> usize {
        self.n_nodes + self.n_l - 1
    }

    /// Full block index (node i, or n_nodes + l for electrode l) to reduced
    /// index; the ground node has none.
    pub fn reduce_index(&self, full: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match full.cmp(&self.ground) {
            Less => Some(full),
            Equal => None,
            Greater => Some(full - 1),
        }
    }

    /// Solve the reduced system for a block of right-hand sides.
    pub fn solve_reduced(&self, rhs: &DenseMat) -> DenseMat {
        self.fact.solve_mat(rhs)
    }

    /// Reduced right-hand sides (0; I^[n]) for every pattern.
    pub fn pattern_rhs(&self, patterns: &CurrentPatternSet) -> DenseMat {
        let mut rhs = DenseMat::zeros(self.n_reduced(), patterns.n_patterns());
        for n in 0..patterns.n_patterns() {
            for l in 0..self.n_l {
                let idx = self.reduce_index(self.n_nodes + l).expect("electrode dof");
                rhs[(idx, n)] = patterns.matrix()[(l, n)];
            }
        }
        rhs
    }

    /// Measurement functionals t^[l]: +1 on electrode (l mod N_L)+1, -1 on
    /// electrode l, one column per measuring electrode.
    pub fn measurement_rhs(&self) -> DenseMat {
        let mut t = DenseMat::zeros(self.n_reduced(), self.n_l);
        for l in 0..self.n_l {
            let hi = self.reduce_index(self.n_nodes + (l + 1) % self.n_l).expect("dof");
            let lo = self.reduce_index(self.n_nodes + l).expect("dof");
            t[(hi, l)] += 1.0;
            t[(lo, l)] -= 1.0;
        }
        t
    }

    /// Split reduced solution columns into nodal potentials (ground row zero)
    /// and electrode potentials.
    pub fn expand(&self, reduced: &DenseMat) -> (DenseMat, DenseMat) {
        let cols = reduced.ncols();
        let mut alpha = DenseMat::zeros(self.n_nodes, cols);
        let mut beta = DenseMat::zeros(self.n_l, cols);
        for c in 0..cols {
            for i in 0..self.n_nodes {
                if let Some(r) = self.reduce_index(i) {
                    alpha[(i, c)] = reduced[(r, c)];
                }
            }
            for l in 0..self.n_l {
                let r = self.reduce_index(self.n_nodes + l).expect("dof");
                beta[(l, c)] = reduced[(r, c)];
            }
        }
        (alpha, beta)
    }

    pub fn solve_forward(&self, patterns: &CurrentPatternSet) -> Result<ForwardSolution> {
        if patterns.n_electrodes() != self.n_l {
            return Err(Error::DimensionMismatch {
                expected: self.n_l,
                got: patterns.n_electrodes(),
            });
        }
        let rhs = self.pattern_rhs(patterns);
        let reduced = self.solve_reduced(&rhs);
        let (alpha, beta) = self.expand(&reduced);
        let frame = MeasurementFrame::from_beta(&beta);
        Ok(ForwardSolution {
            alpha,
            beta,
            reduced,
            frame,
        })
    }
}

/// Potentials and raw data for one full pattern sweep.
pub struct ForwardSolution {
    /// Nodal potentials, one column per pattern; ground row is exactly zero.
    pub alpha: DenseMat,
    /// Electrode potentials, one column per pattern.
    pub beta: DenseMat,
    /// Reduced solution vectors as solved.
    pub reduced: DenseMat,
    pub frame: MeasurementFrame,
}

/// Per-element constant gradient of a nodal field, one entry per element.
pub fn element_field_gradients(mesh: &TriMesh, nodal: &Vector) -> Vec<[f64; 2]> {
    assert_eq!(nodal.len(), mesh.n_nodes());
    (0..mesh.n_elements())
        .map(|e| {
            let g = mesh.element_gradient_basis(e);
            let tri = mesh.elements()[e];
            let mut v = [0.0, 0.0];
            for k in 0..3 {
                v[0] += nodal[tri[k]] * g[k][0];
                v[1] += nodal[tri[k]] * g[k][1];
            }
            v
        })
        .collect()
}

// ---- measurements ----

/// Raw adjacent-difference data: r = N_L(n-1)+l over all patterns n and
/// measuring electrodes l (1-based), N_L(N_L-1) entries total.
#[derive(Clone)]
pub struct MeasurementFrame {
    n_l: usize,
    values: Vector,
}

impl MeasurementFrame {
    pub fn from_beta(beta: &DenseMat) -> MeasurementFrame {
        let n_l = beta.nrows();
        let n_pat = beta.ncols();
        let mut values = Vector::zeros(n_l * n_pat);
        for n0 in 0..n_pat {
            for l0 in 0..n_l {
                values[n_l * n0 + l0] = beta[((l0 + 1) % n_l, n0)] - beta[(l0, n0)];
            }
        }
        MeasurementFrame { n_l, values }
    }

    pub fn n_electrodes(&self) -> usize {
        self.n_l
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }

    /// (pattern n, electrode l) of raw row index, 1-based as in r = N_L(n-1)+l.
    pub fn pair_of(&self, r0: usize) -> (usize, usize) {
        (r0 / self.n_l + 1, r0 % self.n_l + 1)
    }
}

/// Which raw rows enter the data vector. Defaults keep the full raw set.
#[derive(Clone, Copy, Default)]
pub struct MeasurementSelection {
    /// Keep one representative of each reciprocal drive/measure pair, and drop
    /// the linearly dependent wrap-around measurements.
    pub dedupe_reciprocal: bool,
    /// Drop measurements whose electrode pair touches the driven pair.
    pub skip_driven: bool,
}

impl MeasurementSelection {
    /// Raw row indices kept, ascending.
    pub fn kept_indices(&self, n_l: usize) -> Vec<usize> {
        let mut keep = Vec::new();
        for n0 in 0..n_l - 1 {
            for l0 in 0..n_l {
                let (n, l) = (n0 + 1, l0 + 1);
                if self.dedupe_reciprocal && !(l <= n_l - 1 && n <= l) {
                    continue;
                }
                if self.skip_driven {
                    let measure = [l, l % n_l + 1];
                    let drive = [n, n + 1];
                    if measure.iter().any(|x| drive.contains(x)) {
                        continue;
                    }
                }
                keep.push(n_l * n0 + l0);
            }
        }
        keep
    }

    /// Selected (pattern, electrode) pairs, 1-based, ascending by raw index.
    pub fn pairs(&self, n_l: usize) -> Vec<(usize, usize)> {
        self.kept_indices(n_l)
            .into_iter()
            .map(|r0| (r0 / n_l + 1, r0 % n_l + 1))
            .collect()
    }

    pub fn apply(&self, frame: &MeasurementFrame) -> Vector {
        let idx = self.kept_indices(frame.n_electrodes());
        Vector::from_iterator(idx.len(), idx.iter().map(|&r| frame.values()[r]))
    }

    pub fn n_data(&self, n_l: usize) -> usize {
        self.kept_indices(n_l).len()
    }
}

// ---- data file exchange ----

/// CSV with header `pattern,electrode,value`, rows in ascending raw order.
pub fn write_data_csv(
    path: &Path,
    pairs: &[(usize, usize)],
    values: &Vector,
) -> Result<()> {
    if pairs.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: pairs.len(),
            got: values.len(),
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "pattern,electrode,value")?;
    for (k, (n, l)) in pairs.iter().enumerate() {
        writeln!(f, "{n},{l},{}", values[k])?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_data_csv(path: &Path) -> Result<(Vec<(usize, usize)>, Vector)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty data file".into()))??;
    if header.trim() != "pattern,electrode,value" {
        return Err(Error::Parse(format!("bad data header: {header}")));
    }
    let mut pairs = Vec::new();
    let mut values = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!("bad data row: {line}")));
        }
        let n: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad pattern index: {line}")))?;
        let l: usize = cols[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad electrode index: {line}")))?;
        let v: f64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad value: {line}")))?;
        pairs.push((n, l));
        values.push(v);
    }
    Ok((pairs, Vector::from_vec(values)))
}
