//! Dense matrix helpers and Kronecker-structured linear algebra.
//!
//! Matrices are `nalgebra` column-major dense matrices, so `vec` is a plain
//! copy of the underlying buffer. The Kronecker helpers never form products
//! larger than the operands require: `kron_apply` evaluates `(C ⊗ R) v` as
//! `vec(R · unvec(v) · Cᵀ)`.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Dense real matrix in column-major layout.
pub type Mat = DMatrix<f64>;
/// Dense real column vector.
pub type Vector = DVector<f64>;
/// Symmetric matrix. Stored densely; callers keep it symmetric with [`symmetrize`].
pub type SymMat = DMatrix<f64>;

/// Relative jitter applied to the diagonal when a Cholesky factorization fails.
pub const JITTER_REL: f64 = 1e-10;

/// Stacks the columns of `m` into one vector.
pub fn vec(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`]: reshapes a column-stacked vector into an `rows × cols` matrix.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot reshape {} entries into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_column_slice(rows, cols, v))
}

/// Standard Kronecker product `A ⊗ B`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Computes `(C ⊗ R) v` without materializing the Kronecker product.
pub fn kron_apply(c: &Mat, r: &Mat, v: &[f64]) -> Result<Vector> {
    if v.len() != c.ncols() * r.ncols() {
        return Err(Error::Dimension(format!(
            "kron_apply: vector of length {} does not match {}x{} factor",
            v.len(),
            r.ncols(),
            c.ncols()
        )));
    }
    let x = Mat::from_column_slice(r.ncols(), c.ncols(), v);
    Ok(vec(&(r * x * c.transpose())))
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// On failure reports the zero-based pivot where a non-positive diagonal appeared.
pub fn cholesky(s: &SymMat) -> Result<Mat> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::Dimension(format!("cholesky of non-square {}x{}", n, s.ncols())));
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut x = s[(i, j)];
            for k in 0..j {
                x -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = x / djj;
        }
    }
    Ok(l)
}

fn jittered(s: &SymMat) -> Option<SymMat> {
    let n = s.nrows();
    if n == 0 {
        return None;
    }
    let jitter = JITTER_REL * s.trace() / n as f64;
    if !(jitter > 0.0) {
        return None;
    }
    let mut out = s.clone();
    for i in 0..n {
        out[(i, i)] += jitter;
    }
    Some(out)
}

/// Cholesky with the jitter policy: one retry with `1e-10·trace/dim` added to the diagonal.
fn cholesky_with_jitter(s: &SymMat) -> Result<Mat> {
    match cholesky(s) {
        Ok(l) => Ok(l),
        Err(first) => match jittered(s) {
            Some(sj) => cholesky(&sj).map_err(|_| first),
            None => Err(first),
        },
    }
}

/// Natural log of the determinant of an SPD matrix.
pub fn logdet_spd(s: &SymMat) -> Result<f64> {
    let l = cholesky(s)?;
    Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Solves `S X = B` for SPD `S`.
///
/// Falls back to one jittered factorization; if that fails too, the error carries
/// an eigenvalue-based condition estimate of `S`.
pub fn solve_spd(s: &SymMat, b: &Mat) -> Result<Mat> {
    if s.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "solve_spd: {}x{} system with {} right-hand rows",
            s.nrows(),
            s.ncols(),
            b.nrows()
        )));
    }
    let l = cholesky_with_jitter(s).map_err(|_| Error::Singular { condition: condition_estimate(s) })?;
    Ok(cholesky_solve(&l, b))
}

/// Solves `L Lᵀ X = B` given the lower factor `L`.
pub fn cholesky_solve(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut v = x[(i, col)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = v / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut v = x[(i, col)];
            for k in (i + 1)..n {
                v -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = v / l[(i, i)];
        }
    }
    x
}

/// Right division `B S⁻¹` for SPD `S`, i.e. the solution of `X S = B`.
pub fn right_solve_spd(b: &Mat, s: &SymMat) -> Result<Mat> {
    Ok(solve_spd(s, &b.transpose())?.transpose())
}

/// Ratio of largest to smallest absolute eigenvalue of a symmetric matrix.
pub fn condition_estimate(s: &SymMat) -> f64 {
    let mut sym = s.clone();
    symmetrize(&mut sym);
    let ev = SymmetricEigen::new(sym).eigenvalues;
    let max = ev.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric eigen-decomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(s: &SymMat) -> (Vector, Mat) {
    let mut sym = s.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Mat::zeros(s.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Principal square root of a symmetric PSD matrix; tiny negative eigenvalues are clamped to zero.
pub fn sqrt_psd(s: &SymMat) -> Mat {
    let (vals, vecs) = sym_eigen_desc(s);
    let d = Mat::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    let mut out = &vecs * d * vecs.transpose();
    symmetrize(&mut out);
    out
}

/// Inverse principal square root of an SPD matrix.
pub fn inv_sqrt_spd(s: &SymMat) -> Result<Mat> {
    let (vals, vecs) = sym_eigen_desc(s);
    if let Some(pos) = vals.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NotPositiveDefinite { pivot: pos });
    }
    let d = Mat::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
    let mut out = &vecs * d * vecs.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Eigenvalues of a general square matrix, or `None` if the eigensolver fails to converge.
pub fn complex_eigenvalues(m: &Mat) -> Option<Vec<Complex<f64>>> {
    let fm = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let ev = fm.eigenvalues().ok()?;
    Some(ev.into_iter().map(|z| Complex::new(z.re, z.im)).collect())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(s: &SymMat) -> f64 {
    let mut sym = s.clone();
    symmetrize(&mut sym);
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `log Σ exp(x_i)`, returning `-∞` for an empty or all-`-∞` input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sums a sequence with Neumaier compensation.
pub fn stable_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Squared Frobenius norm.
pub fn frob2(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Column-space projection `Q (QᵀQ)⁻¹ Qᵀ` of a full-column-rank matrix.
pub fn projection(q: &Mat) -> Result<Mat> {
    let gram = q.transpose() * q;
    let inv_qt = solve_spd(&gram, &q.transpose())?;
    Ok(q * inv_qt)
}

/// Orthogonal `H` minimizing `‖A H − B‖_F`.
pub fn procrustes(a: &Mat, b: &Mat) -> Mat {
    let svd = (a.transpose() * b).svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    u * v_t
}
