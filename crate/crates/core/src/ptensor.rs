//! Polarization tensors of oriented ellipses, their contrast derivatives,
//! and the diagonal Hessian approximation assembled from them.

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::fem::ConductivityField;
use crate::mesh::{EquivalentEllipse, TriMesh};
use crate::neumann::NeumannEvaluator;
use crate::numerics::{DenseMat, Vector};

/// Polarization tensor of an ellipse (axes a >= b would be conventional but
/// is not required), its contrast derivative, and second derivative, all in
/// the fixed frame.
pub struct PolyaSzegoTensor {
    pub m: Matrix2<f64>,
    pub dm: Matrix2<f64>,
    pub d2m: Matrix2<f64>,
}

fn check_params(a: f64, b: f64, area: f64, gamma: f64) -> Result<()> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::InvalidContrast(gamma));
    }
    if !(a > 0.0 && b > 0.0 && area > 0.0) {
        return Err(Error::InvalidParam(format!(
            "ellipse axes {a}, {b} and area {area} must be positive"
        )));
    }
    Ok(())
}

/// Eigenvalues of dM/dgamma divided by the area scale, in the ellipse frame.
/// The first entry is the axis-a component; the second swaps a and b.
pub(crate) fn contrast_deltas(a: f64, b: f64, gamma: f64) -> (f64, f64) {
    let ab = a + b;
    let da = a + gamma * b;
    let db = b + gamma * a;
    (
        ab / da - (gamma - 1.0) * b * ab / (da * da),
        ab / db - (gamma - 1.0) * a * ab / (db * db),
    )
}

/// Eigenvalues of d2M/dgamma2 divided by the area scale, ellipse frame.
pub(crate) fn contrast_delta_primes(a: f64, b: f64, gamma: f64) -> (f64, f64) {
    let ab = a + b;
    let da = a + gamma * b;
    let db = b + gamma * a;
    (
        -2.0 * b * ab / (da * da) + 2.0 * (gamma - 1.0) * b * b * ab / (da * da * da),
        -2.0 * a * ab / (db * db) + 2.0 * (gamma - 1.0) * a * a * ab / (db * db * db),
    )
}

fn rotated_diag(theta: f64, scale: f64, d1: f64, d2: f64) -> Matrix2<f64> {
    let r = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
    r * Matrix2::new(scale * d1, 0.0, 0.0, scale * d2) * r.transpose()
}

/// Polarization tensor of an ellipse with semi-axes (a, b), axis-a direction
/// theta, area scale `area`, and conductivity contrast gamma, together with
/// its first two contrast derivatives. Homogeneous of degree 0 in (a, b):
/// only the aspect ratio matters, the magnitude comes from `area`.
pub fn polya_szego(a: f64, b: f64, theta: f64, area: f64, gamma: f64) -> Result<PolyaSzegoTensor> {
    check_params(a, b, area, gamma)?;
    let ab = a + b;
    let m = rotated_diag(
        theta,
        (gamma - 1.0) * area,
        ab / (a + gamma * b),
        ab / (b + gamma * a),
    );
    let (d1, d2) = contrast_deltas(a, b, gamma);
    let (p1, p2) = contrast_delta_primes(a, b, gamma);
    Ok(PolyaSzegoTensor {
        m,
        dm: rotated_diag(theta, area, d1, d2),
        d2m: rotated_diag(theta, area, p1, p2),
    })
}

/// Steiner inellipses of every element, the shape/orientation inputs of the
/// sensitivity table.
pub fn element_ellipses(mesh: &TriMesh) -> Result<Vec<EquivalentEllipse>> {
    (0..mesh.n_elements())
        .map(|e| mesh.steiner_inellipse(e))
        .collect()
}

/// First- and second-order sensitivity coefficients of each selected datum
/// with respect to each element's contrast, from the small-inclusion
/// expansion: row r = (n, l) pairs the drive-n background gradient with the
/// Neumann gradient difference of measuring pair l at the element centroid.
pub struct SensitivityTable {
    /// C_ri: first-order coefficients, n_data x n_elements.
    pub c: DenseMat,
    /// D_ri: same structure with the second contrast derivative.
    pub d: DenseMat,
    /// Elements sharing a node with the outer boundary, where the expansion
    /// is known to degrade.
    pub boundary_flag: Vec<bool>,
}

/// Builds the coefficient table. `u0_gradients` holds the per-element
/// gradient of the homogeneous-background potential for every drive pattern;
/// `pairs` lists the selected (pattern, electrode) indices, 1-based.
pub fn sensitivity_coefficients(
    mesh: &TriMesh,
    ellipses: &[EquivalentEllipse],
    u0_gradients: &[Vec<[f64; 2]>],
    pairs: &[(usize, usize)],
    neumann: &NeumannEvaluator,
    m: &ConductivityField,
) -> Result<SensitivityTable> {
    let n_e = mesh.n_elements();
    let n_l = mesh.n_electrodes();
    if ellipses.len() != n_e {
        return Err(Error::MissingField(format!(
            "ellipse table has {} entries, mesh has {n_e} elements",
            ellipses.len()
        )));
    }
    if u0_gradients.len() != n_l - 1 || u0_gradients.iter().any(|g| g.len() != n_e) {
        return Err(Error::MissingField(
            "background gradients must cover every drive pattern and element".into(),
        ));
    }
    if m.len() != n_e {
        return Err(Error::MissingField(format!(
            "conductivity has {} entries, mesh has {n_e} elements",
            m.len()
        )));
    }
    let centroids_el = mesh.electrode_centroids();
    let mut c = DenseMat::zeros(pairs.len(), n_e);
    let mut d = DenseMat::zeros(pairs.len(), n_e);
    for i in 0..n_e {
        let z = mesh.centroids()[i];
        let ell = &ellipses[i];
        let (cos_t, sin_t) = (ell.theta.cos(), ell.theta.sin());
        let area = mesh.areas()[i];
        let (d1, d2) = contrast_deltas(ell.a, ell.b, m.values()[i]);
        let (p1, p2) = contrast_delta_primes(ell.a, ell.b, m.values()[i]);

        // Neumann gradient difference of each adjacent measuring pair,
        // rotated into the ellipse frame.
        let mut q = vec![[0.0f64; 2]; n_l];
        for (l0, ql) in q.iter_mut().enumerate() {
            let g_next = neumann.grad_z(centroids_el[(l0 + 1) % n_l], z)?;
            let g_this = neumann.grad_z(centroids_el[l0], z)?;
            let qx = g_next[0] - g_this[0];
            let qy = g_next[1] - g_this[1];
            *ql = [cos_t * qx + sin_t * qy, -sin_t * qx + cos_t * qy];
        }
        for (row, &(n, l)) in pairs.iter().enumerate() {
            let p = u0_gradients[n - 1][i];
            let pt = [cos_t * p[0] + sin_t * p[1], -sin_t * p[0] + cos_t * p[1]];
            let ql = q[l - 1];
            let g1 = area * pt[0] * ql[0];
            let g2 = area * pt[1] * ql[1];
            c[(row, i)] = -(d1 * g1 + d2 * g2);
            d[(row, i)] = -(p1 * g1 + p2 * g2);
        }
    }
    Ok(SensitivityTable {
        c,
        d,
        boundary_flag: mesh.boundary_flags().to_vec(),
    })
}

/// Diagonal Hessian approximation with boundary-element flags.
pub struct DiagonalHessian {
    pub values: Vector,
    pub boundary_flag: Vec<bool>,
}

impl DiagonalHessian {
    /// Copy with entries clamped from below at 1e-12 of the maximum, the
    /// safeguard applied before use as a quasi-Newton initial diagonal.
    pub fn floored(&self) -> Vector {
        let floor = 1e-12 * self.values.max();
        self.values.map(|v| v.max(floor))
    }
}

/// H~_ii = sum_r { C_ri^2 + D_ri (f_r - d_r) }.
pub fn approx_hessian_diag(
    coeffs: &SensitivityTable,
    f: &Vector,
    d: &Vector,
) -> Result<DiagonalHessian> {
    let n_data = coeffs.c.nrows();
    if f.len() != n_data {
        return Err(Error::DimensionMismatch {
            expected: n_data,
            got: f.len(),
        });
    }
    if d.len() != n_data {
        return Err(Error::DimensionMismatch {
            expected: n_data,
            got: d.len(),
        });
    }
    let res = f - d;
    let n_e = coeffs.c.ncols();
    let mut values = Vector::zeros(n_e);
    for i in 0..n_e {
        values[i] = coeffs.c.column(i).norm_squared() + coeffs.d.column(i).dot(&res);
    }
    Ok(DiagonalHessian {
        values,
        boundary_flag: coeffs.boundary_flag.clone(),
    })
}
