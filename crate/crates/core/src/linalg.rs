//! Dense kernels for constraint-normal systems.
//!
//! Everything here is sized for a few dozen unknowns: the solver refactorizes
//! its normal matrix from scratch at every pivot, so a plain LU with partial
//! pivoting and an explicit 1-norm condition number is fast enough.

use crate::error::{Error, Result};

/// Relative pivot threshold below which a matrix is declared singular.
pub const SINGULAR_PIVOT_REL: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows * cols != entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix whose rows are the given vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix has {} columns, vector has {} entries",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.entries[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.entries[i * self.cols + j]
    }
}

/// LU decomposition `P·A = L·U` with partial pivoting.
#[derive(Debug, Clone)]
pub struct Factorization {
    n: usize,
    // L (unit diagonal, strictly lower part) and U packed together.
    lu: Vec<f64>,
    perm: Vec<usize>,
    condition: f64,
}

/// Condition numbers above this are reported as near-singular.
pub const ILL_CONDITIONED: f64 = 1e12;

pub fn factorize(a: &DenseMatrix) -> Result<Factorization> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "factorize needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let threshold = SINGULAR_PIVOT_REL * a.max_abs();
    let mut lu = a.entries.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (p, pivot) = (k..n)
            .map(|i| (i, lu[i * n + k].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot <= threshold || pivot == 0.0 {
            return Err(Error::SingularMatrix { column: k, pivot });
        }
        if p != k {
            perm.swap(p, k);
            for j in 0..n {
                lu.swap(p * n + j, k * n + j);
            }
        }
        let diag = lu[k * n + k];
        for i in k + 1..n {
            let factor = lu[i * n + k] / diag;
            lu[i * n + k] = factor;
            if factor != 0.0 {
                for j in k + 1..n {
                    lu[i * n + j] -= factor * lu[k * n + j];
                }
            }
        }
    }
    let mut f = Factorization { n, lu, perm, condition: f64::INFINITY };
    // Explicit inverse columns; n is small.
    let mut inv_norm: f64 = 0.0;
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = f.solve_unchecked(&e);
        inv_norm = inv_norm.max(col.iter().map(|v| v.abs()).sum());
    }
    f.condition = a.norm_1() * inv_norm;
    Ok(f)
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// 1-norm condition number `‖A‖₁·‖A⁻¹‖₁`.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn is_near_singular(&self) -> bool {
        !(self.condition < ILL_CONDITIONED)
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "factorization of order {} cannot solve a vector of length {}",
                self.n,
                b.len()
            )));
        }
        Ok(self.solve_unchecked(b))
    }

    /// Solves `Aᵀ·x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(Error::ShapeMismatch("transpose solve length".into()));
        }
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = b, then Lᵀ v = w, then x = Pᵀ v.
        let mut w = b.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for k in 0..i {
                s -= self.lu[k * n + i] * w[k];
            }
            w[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = w[i];
            for k in i + 1..n {
                s -= self.lu[k * n + i] * w[k];
            }
            w[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = w[i];
        }
        Ok(x)
    }

    fn solve_unchecked(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.lu[i * n + k] * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.lu[i * n + k] * x[k];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }
}

pub fn solve(f: &Factorization, b: &[f64]) -> Result<Vec<f64>> {
    f.solve(b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Removes from `v` its components along the orthonormal vectors `q`, twice
/// (classical Gram-Schmidt with one reorthogonalization pass).
fn orthogonalize(q: &[Vec<f64>], v: &mut [f64]) {
    for _ in 0..2 {
        for qi in q {
            let c = dot(qi, v);
            axpy(-c, qi, v);
        }
    }
}

/// Orthonormal basis of `span(vectors)`; `None` at the first vector whose
/// residual falls below `tol·(1+‖v‖)`.
fn orthonormal_basis(vectors: &[Vec<f64>], tol: f64) -> std::result::Result<Vec<Vec<f64>>, usize> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for (idx, v) in vectors.iter().enumerate() {
        let scale = norm(v);
        let mut r = v.clone();
        orthogonalize(&q, &mut r);
        let rn = norm(&r);
        if rn <= tol * (1.0 + scale) {
            return Err(idx);
        }
        r.iter_mut().for_each(|x| *x /= rn);
        q.push(r);
    }
    Ok(q)
}

const INDEPENDENCE_TOL: f64 = 1e-10;

/// True iff the part of `candidate` orthogonal to `span(basis)` has norm
/// greater than `tol·(1+‖candidate‖)`.
///
/// Basis vectors that are themselves dependent are skipped.
pub fn rank_extends(basis: &[Vec<f64>], candidate: &[f64], tol: f64) -> bool {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(basis.len());
    for v in basis {
        let scale = norm(v);
        let mut r = v.clone();
        orthogonalize(&q, &mut r);
        let rn = norm(&r);
        if rn > INDEPENDENCE_TOL * (1.0 + scale) {
            r.iter_mut().for_each(|x| *x /= rn);
            q.push(r);
        }
    }
    let mut r = candidate.to_vec();
    orthogonalize(&q, &mut r);
    norm(&r) > tol * (1.0 + norm(candidate))
}

/// Component of `g` orthogonal to `span(normals)`.
pub fn project_nullspace(normals: &[Vec<f64>], g: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = normals.iter().position(|n| n.len() != g.len()) {
        return Err(Error::ShapeMismatch(format!("normal {bad} has wrong length")));
    }
    let q = orthonormal_basis(normals, INDEPENDENCE_TOL)
        .map_err(|index| Error::DependentNormals { index })?;
    let mut r = g.to_vec();
    orthogonalize(&q, &mut r);
    Ok(r)
}

/// Orthonormal basis of the orthogonal complement of `span(normals)` in `R^dim`.
pub fn nullspace_basis(normals: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut q = orthonormal_basis(normals, INDEPENDENCE_TOL)
        .map_err(|index| Error::DependentNormals { index })?;
    let fixed = q.len();
    for j in 0..dim {
        if q.len() == dim {
            break;
        }
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        orthogonalize(&q, &mut e);
        let en = norm(&e);
        if en > 1e-8 {
            e.iter_mut().for_each(|x| *x /= en);
            q.push(e);
        }
    }
    Ok(q.split_off(fixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = rng.uniform(-1.0, 1.0);
            }
            // diagonal boost keeps it well conditioned
            m[(i, i)] += n as f64 * 0.5;
        }
        m
    }

    fn residual(a: &DenseMatrix, x: &[f64], b: &[f64]) -> f64 {
        let ax = a.mul_vec(x).unwrap();
        distance(&ax, b)
    }

    #[test]
    fn identity_solves_to_rhs() {
        let f = factorize(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(f.solve(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        assert!((f.condition() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_and_triangular_by_hand() {
        let a = DenseMatrix::new(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let x = factorize(&a).unwrap().solve(&[2.0, 8.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        let a = DenseMatrix::new(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let x = solve(&factorize(&a).unwrap(), &[3.0, 1.0]).unwrap();
        assert_eq!(x, vec![2.0, 1.0]);
    }

    #[test]
    fn random_25_residual() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 25);
            let b: Vec<f64> = (0..25).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let f = factorize(&a).unwrap();
            let x = f.solve(&b).unwrap();
            assert!(residual(&a, &x, &b) <= 1e-10 * (1.0 + norm(&b)));
            assert!(!f.is_near_singular());
        }
    }

    #[test]
    fn transpose_solve_matches() {
        let mut rng = SplitMix64::new(11);
        let a = random_matrix(&mut rng, 9);
        let b: Vec<f64> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = factorize(&a).unwrap().solve_transpose(&b).unwrap();
        let at = DenseMatrix::new(
            9,
            9,
            (0..81).map(|k| a[(k % 9, k / 9)]).collect(),
        )
        .unwrap();
        assert!(residual(&at, &x, &b) <= 1e-12);
    }

    #[test]
    fn singular_is_rejected() {
        let a = DenseMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(factorize(&a), Err(Error::SingularMatrix { .. })));
        let a = DenseMatrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(factorize(&a), Err(Error::ShapeMismatch(_))));
        let f = factorize(&DenseMatrix::identity(2)).unwrap();
        assert!(matches!(f.solve(&[1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_entries_rejected() {
        assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn rank_extension_cases() {
        let e1 = vec![1.0, 0.0];
        assert!(rank_extends(&[e1.clone()], &[0.0, 1.0], 1e-10));
        assert!(!rank_extends(&[e1], &[2.0, 0.0], 1e-10));
        assert!(rank_extends(&[], &[0.0, 1e-3], 1e-10));
    }

    #[test]
    fn rank_extends_false_inside_random_span() {
        let mut rng = SplitMix64::new(3);
        let raw: Vec<Vec<f64>> =
            (0..24).map(|_| (0..25).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let basis = orthonormal_basis(&raw, 1e-10).unwrap();
        let mut candidate = vec![0.0; 25];
        for b in &basis {
            axpy(rng.uniform(-3.0, 3.0), b, &mut candidate);
        }
        assert!(!rank_extends(&basis, &candidate, 1e-9));
        // the one missing direction does extend
        let missing = nullspace_basis(&basis, 25).unwrap();
        assert_eq!(missing.len(), 1);
        assert!(rank_extends(&basis, &missing[0], 1e-9));
    }

    #[test]
    fn projection_cases() {
        let p = project_nullspace(&[vec![1.0, 0.0]], &[3.0, 4.0]).unwrap();
        assert!((p[0]).abs() < 1e-15 && (p[1] - 4.0).abs() < 1e-15);
        assert_eq!(project_nullspace(&[], &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        let err = project_nullspace(&[vec![1.0, 1.0], vec![2.0, 2.0]], &[1.0, 0.0]);
        assert_eq!(err, Err(Error::DependentNormals { index: 1 }));
    }

    #[test]
    fn random_projection_is_orthogonal() {
        let mut rng = SplitMix64::new(5);
        for k in [1, 5, 12, 24] {
            let normals: Vec<Vec<f64>> =
                (0..k).map(|_| (0..25).map(|_| rng.uniform(-2.0, 2.0)).collect()).collect();
            let g: Vec<f64> = (0..25).map(|_| rng.uniform(-10.0, 10.0)).collect();
            let p = project_nullspace(&normals, &g).unwrap();
            for n in &normals {
                assert!(dot(n, &p).abs() <= 1e-10 * norm(&g) * norm(n));
            }
        }
    }

    #[test]
    fn nullspace_basis_completes() {
        let basis = nullspace_basis(&[vec![1.0, 1.0, 0.0]], 3).unwrap();
        assert_eq!(basis.len(), 2);
        for b in &basis {
            assert!((norm(b) - 1.0).abs() < 1e-12);
            assert!(dot(b, &[1.0, 1.0, 0.0]).abs() < 1e-12);
        }
    }
}
