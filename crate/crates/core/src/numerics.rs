//! Linear-algebra substrate: sparse symmetric systems with reusable
//! factorizations, dense factorizations and SVD, and the binary matrix
//! exchange format used for cross-checking derivative matrices.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense column-major matrix.
pub type DenseMat = DMatrix<f64>;
/// Dense column vector.
pub type Vector = DVector<f64>;

// ---- sparse symmetric matrices ----

/// Sparse symmetric matrix assembled from (row, col, value) triplets.
/// Duplicate triplets are summed. Callers push both triangles.
#[derive(Clone)]
pub struct SparseSym {
    n: usize,
    coo: CooMatrix<f64>,
}

impl SparseSym {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "matrix dimension must be at least 1");
        SparseSym {
            n,
            coo: CooMatrix::new(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Add `v` to entry (i, j).
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        self.coo.push(i, j, v);
    }

    /// Add `v` to (i, j) and, when off-diagonal, to (j, i).
    pub fn push_sym(&mut self, i: usize, j: usize, v: f64) {
        self.coo.push(i, j, v);
        if i != j {
            self.coo.push(j, i, v);
        }
    }

    pub fn to_csc(&self) -> CscMatrix<f64> {
        CscMatrix::from(&self.coo)
    }

    /// Dense copy; intended for small systems and oracle tests.
    pub fn to_dense(&self) -> DenseMat {
        let mut a = DenseMat::zeros(self.n, self.n);
        for (i, j, v) in self.coo.triplet_iter() {
            a[(i, j)] += v;
        }
        a
    }

    /// Raw (row, col, value) triplets as pushed; duplicates not merged.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.coo.triplet_iter().map(|(i, j, v)| (i, j, *v))
    }

    /// Copy with row and column `k` removed and higher indices shifted down.
    pub fn drop_row_col(&self, k: usize) -> SparseSym {
        assert!(k < self.n && self.n > 1, "cannot drop index {k} of {}", self.n);
        let mut out = SparseSym::new(self.n - 1);
        for (i, j, v) in self.coo.triplet_iter() {
            if i == k || j == k {
                continue;
            }
            out.push(if i > k { i - 1 } else { i }, if j > k { j - 1 } else { j }, *v);
        }
        out
    }

    /// y = A x without forming a factorization.
    pub fn mul_vec(&self, x: &Vector) -> Vector {
        assert_eq!(x.len(), self.n);
        let mut y = Vector::zeros(self.n);
        for (i, j, v) in self.coo.triplet_iter() {
            y[i] += v * x[j];
        }
        y
    }

    /// Verify symmetry of the summed entries within a relative tolerance.
    pub fn check_symmetric(&self, rel_tol: f64) -> Result<()> {
        let mut entries: HashMap<(usize, usize), f64> = HashMap::new();
        let mut scale = 0.0f64;
        for (i, j, v) in self.coo.triplet_iter() {
            *entries.entry((i, j)).or_insert(0.0) += v;
            scale = scale.max(v.abs());
        }
        for (&(i, j), &v) in entries.iter() {
            let vt = entries.get(&(j, i)).copied().unwrap_or(0.0);
            if (v - vt).abs() > rel_tol * scale.max(1e-300) {
                return Err(Error::InvalidParam(format!(
                    "matrix not symmetric at ({i}, {j}): {v} vs {vt}"
                )));
            }
        }
        Ok(())
    }
}

// ---- factorization ----

enum FactorKind {
    Cholesky(CscCholesky<f64>),
    // Fallback for symmetric indefinite systems; dense, so only sensible at
    // the problem sizes this crate targets.
    DenseLu(nalgebra::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Reusable direct factorization of a sparse symmetric matrix.
pub struct Factorization {
    n: usize,
    kind: FactorKind,
}

/// Factor a symmetric nonsingular matrix for repeated solves. Positive
/// definite systems take the sparse Cholesky path; anything else falls back
/// to a dense full-pivoting LU, which reports rank deficiency exactly.
pub fn factorize(a: &SparseSym) -> Result<Factorization> {
    let csc = a.to_csc();
    if let Ok(chol) = CscCholesky::factor(&csc) {
        return Ok(Factorization {
            n: a.n(),
            kind: FactorKind::Cholesky(chol),
        });
    }
    let lu = a.to_dense().full_piv_lu();
    if !lu.is_invertible() {
        return Err(Error::SingularMatrix);
    }
    Ok(Factorization {
        n: a.n(),
        kind: FactorKind::DenseLu(lu),
    })
}

impl Factorization {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Solve A X = B for a block of right-hand sides.
    pub fn solve_mat(&self, b: &DenseMat) -> DenseMat {
        assert_eq!(b.nrows(), self.n, "right-hand side row count");
        match &self.kind {
            FactorKind::Cholesky(c) => c.solve(b),
            FactorKind::DenseLu(lu) => lu.solve(b).expect("checked invertible at factorization"),
        }
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        let bm = DenseMat::from_column_slice(self.n, 1, b.as_slice());
        let x = self.solve_mat(&bm);
        Vector::from_column_slice(x.as_slice())
    }
}

// ---- dense decompositions ----

/// Thin SVD A = U diag(sigma) V^T with sigma sorted non-increasing.
pub fn svd(a: &DenseMat) -> Result<(DenseMat, Vector, DenseMat)> {
    let svd = a
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or(Error::NoConvergence)?;
    let u = svd.u.ok_or(Error::NoConvergence)?;
    let vt = svd.v_t.ok_or(Error::NoConvergence)?;
    Ok((u, svd.singular_values, vt.transpose()))
}

/// Minimize ||A x - b||_2 through the normal equations A^T A x = A^T b.
pub fn solve_normal_equations(a: &DenseMat, b: &Vector) -> Result<Vector> {
    let x = solve_normal_equations_multi(a, &DenseMat::from_column_slice(b.len(), 1, b.as_slice()))?;
    Ok(Vector::from_column_slice(x.as_slice()))
}

/// Least-squares solve for a block of right-hand sides.
pub fn solve_normal_equations_multi(a: &DenseMat, b: &DenseMat) -> Result<DenseMat> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    let chol = ata.cholesky().ok_or(Error::RankDeficient)?;
    Ok(chol.solve(&atb))
}

// ---- binary matrix exchange format ----

const MAT_MAGIC: &[u8; 4] = b"EITM";
const MAT_VERSION: u32 = 1;

/// Write a dense matrix: 16-byte header (magic "EITM", u32 version, u32
/// rows, u32 cols, little-endian) followed by row-major f64 values.
pub fn write_matrix(path: &Path, a: &DenseMat) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAT_MAGIC)?;
    f.write_all(&MAT_VERSION.to_le_bytes())?;
    f.write_all(&(a.nrows() as u32).to_le_bytes())?;
    f.write_all(&(a.ncols() as u32).to_le_bytes())?;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            f.write_all(&a[(i, j)].to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DenseMat> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    if &header[0..4] != MAT_MAGIC {
        return Err(Error::Parse("bad matrix file magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != MAT_VERSION {
        return Err(Error::Parse(format!("unsupported matrix version {version}")));
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; rows * cols * 8];
    f.read_exact(&mut buf)?;
    let mut a = DenseMat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let off = (i * cols + j) * 8;
            a[(i, j)] = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        }
    }
    Ok(a)
}

/// Pearson correlation of two equal-length samples; 0 when either side is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs equal-length samples");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
