//! Small-dimension complex linear algebra.
//!
//! Everything here works on stack-allocated matrices of dimension at most
//! [`MAX_DIM`], which covers the microphone counts the solvers handle. The
//! solvers call these routines once per time-frequency bin, so nothing in
//! this module allocates.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Largest supported matrix dimension.
pub const MAX_DIM: usize = 4;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Absolute tolerance on `|m[i][j] - conj(m[j][i])|` for a matrix to count as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Complex column vector of dimension at most [`MAX_DIM`].
#[derive(Clone, Copy, PartialEq)]
pub struct CVec {
    n: usize,
    v: [C64; MAX_DIM],
}

impl CVec {
    pub fn zeros(n: usize) -> Self {
        assert!(n <= MAX_DIM, "vector dimension {n} exceeds MAX_DIM");
        CVec {
            n,
            v: [ZERO; MAX_DIM],
        }
    }

    pub fn from_slice(xs: &[C64]) -> Self {
        let mut out = CVec::zeros(xs.len());
        out.v[..xs.len()].copy_from_slice(xs);
        out
    }

    pub fn basis(n: usize, k: usize) -> Self {
        let mut out = CVec::zeros(n);
        out.v[k] = ONE;
        out
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn as_slice(&self) -> &[C64] {
        &self.v[..self.n]
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.v[..self.n]
    }

    /// Inner product `selfᴴ other`.
    #[inline]
    pub fn dot(&self, other: &CVec) -> C64 {
        let mut acc = ZERO;
        for i in 0..self.n {
            acc += self.v[i].conj() * other.v[i];
        }
        acc
    }

    #[inline]
    pub fn norm_sqr(&self) -> f64 {
        self.as_slice().iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scale(&self, s: C64) -> CVec {
        let mut out = *self;
        for z in out.as_mut_slice() {
            *z *= s;
        }
        out
    }

    /// Outer product `self selfᴴ`.
    pub fn outer(&self) -> CMat {
        let mut m = CMat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m.a[i][j] = self.v[i] * self.v[j].conj();
            }
        }
        m
    }
}

impl Index<usize> for CVec {
    type Output = C64;
    #[inline]
    fn index(&self, i: usize) -> &C64 {
        &self.v[..self.n][i]
    }
}

impl IndexMut<usize> for CVec {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        &mut self.v[..self.n][i]
    }
}

impl fmt::Debug for CVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.as_slice()).finish()
    }
}

/// Dense square complex matrix of dimension at most [`MAX_DIM`].
#[derive(Clone, Copy, PartialEq)]
pub struct CMat {
    n: usize,
    a: [[C64; MAX_DIM]; MAX_DIM],
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        assert!(n <= MAX_DIM, "matrix dimension {n} exceeds MAX_DIM");
        CMat {
            n,
            a: [[ZERO; MAX_DIM]; MAX_DIM],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n);
        for i in 0..n {
            m.a[i][i] = ONE;
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = CMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.a[i][j] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from row slices; every row must have `rows.len()` entries.
    pub fn from_rows(rows: &[&[C64]]) -> Result<Self> {
        let n = rows.len();
        if n > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "dimension {n} exceeds supported maximum {MAX_DIM}"
            )));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "row {bad} has {} entries, expected {n}",
                rows[bad].len()
            )));
        }
        Ok(CMat::from_fn(n, |i, j| rows[i][j]))
    }

    pub fn from_real_diag(d: &[f64]) -> Self {
        let mut m = CMat::zeros(d.len());
        for (i, &x) in d.iter().enumerate() {
            m.a[i][i] = C64::new(x, 0.0);
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.n, |i, j| self.a[j][i].conj())
    }

    pub fn scale(&self, s: f64) -> CMat {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out.a[i][j] *= s;
            }
        }
        out
    }

    pub fn scale_c(&self, s: C64) -> CMat {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out.a[i][j] *= s;
            }
        }
        out
    }

    /// `self += s * other`.
    #[inline]
    pub fn add_scaled(&mut self, s: f64, other: &CMat) {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[i][j] += other.a[i][j] * s;
            }
        }
    }

    pub fn trace(&self) -> C64 {
        (0..self.n).map(|i| self.a[i][i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += self.a[i][j].norm_sqr();
            }
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self.a[i][j].norm());
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.a[i][j].is_finite()))
    }

    /// Largest deviation from Hermitian symmetry, `max |a_ij - conj(a_ji)|`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.n {
            for j in i..self.n {
                d = d.max((self.a[i][j] - self.a[j][i].conj()).norm());
            }
        }
        d
    }

    /// `(self + selfᴴ) / 2`.
    pub fn hermitian_part(&self) -> CMat {
        let mut out = *self;
        for i in 0..self.n {
            out.a[i][i] = C64::new(self.a[i][i].re, 0.0);
            for j in i + 1..self.n {
                let z = (self.a[i][j] + self.a[j][i].conj()) * 0.5;
                out.a[i][j] = z;
                out.a[j][i] = z.conj();
            }
        }
        out
    }

    #[inline]
    pub fn mul_vec(&self, x: &CVec) -> CVec {
        debug_assert_eq!(self.n, x.n);
        let mut out = CVec::zeros(self.n);
        for i in 0..self.n {
            let mut acc = ZERO;
            for j in 0..self.n {
                acc += self.a[i][j] * x.v[j];
            }
            out.v[i] = acc;
        }
        out
    }

    /// `xᴴ self x`.
    #[inline]
    pub fn quad_form(&self, x: &CVec) -> C64 {
        x.dot(&self.mul_vec(x))
    }

    pub fn column(&self, j: usize) -> CVec {
        let mut out = CVec::zeros(self.n);
        for i in 0..self.n {
            out.v[i] = self.a[i][j];
        }
        out
    }

    pub fn set_column(&mut self, j: usize, c: &CVec) {
        for i in 0..self.n {
            self.a[i][j] = c.v[i];
        }
    }

    /// LU factorization with partial pivoting. Returns `(lu, perm, sign)` or
    /// `None` when a pivot is exactly zero.
    fn lu(&self) -> Option<(CMat, [usize; MAX_DIM], f64)> {
        let n = self.n;
        let mut lu = *self;
        let mut perm = [0usize; MAX_DIM];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = i;
        }
        let mut sign = 1.0;
        for k in 0..n {
            let mut piv = k;
            let mut best = lu.a[k][k].norm();
            for i in k + 1..n {
                let v = lu.a[i][k].norm();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best == 0.0 {
                return None;
            }
            if piv != k {
                lu.a.swap(piv, k);
                perm.swap(piv, k);
                sign = -sign;
            }
            let inv = ONE / lu.a[k][k];
            for i in k + 1..n {
                let l = lu.a[i][k] * inv;
                lu.a[i][k] = l;
                for j in k + 1..n {
                    let t = lu.a[k][j];
                    lu.a[i][j] -= l * t;
                }
            }
        }
        Some((lu, perm, sign))
    }

    pub fn det(&self) -> C64 {
        match self.lu() {
            None => ZERO,
            Some((lu, _, sign)) => {
                let mut d = C64::new(sign, 0.0);
                for i in 0..self.n {
                    d *= lu.a[i][i];
                }
                d
            }
        }
    }

    /// Solves `self y = b`; `None` if the matrix is singular.
    pub fn solve(&self, b: &CVec) -> Option<CVec> {
        let (lu, perm, _) = self.lu()?;
        let n = self.n;
        let mut y = CVec::zeros(n);
        for i in 0..n {
            let mut acc = b.v[perm[i]];
            for j in 0..i {
                acc -= lu.a[i][j] * y.v[j];
            }
            y.v[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = y.v[i];
            for j in i + 1..n {
                acc -= lu.a[i][j] * y.v[j];
            }
            y.v[i] = acc / lu.a[i][i];
        }
        Some(y)
    }

    /// General inverse; `None` if singular or the result is not finite.
    pub fn inverse(&self) -> Option<CMat> {
        let n = self.n;
        let mut out = CMat::zeros(n);
        for j in 0..n {
            let col = self.solve(&CVec::basis(n, j))?;
            out.set_column(j, &col);
        }
        out.is_finite().then_some(out)
    }

    /// Cholesky factor `L` (lower, real positive diagonal) of a Hermitian
    /// positive-definite matrix, reading only the lower triangle.
    pub fn cholesky(&self) -> Option<CMat> {
        let n = self.n;
        let mut l = CMat::zeros(n);
        for j in 0..n {
            let mut d = self.a[j][j].re;
            for k in 0..j {
                d -= l.a[j][k].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            l.a[j][j] = C64::new(d, 0.0);
            for i in j + 1..n {
                let mut acc = self.a[i][j];
                for k in 0..j {
                    acc -= l.a[i][k] * l.a[j][k].conj();
                }
                l.a[i][j] = acc / d;
            }
        }
        Some(l)
    }

    /// Inverse and log-determinant of a Hermitian positive-definite matrix.
    pub fn hpd_inverse_logdet(&self) -> Option<(CMat, f64)> {
        let n = self.n;
        if n == 2 {
            // closed form; the solvers live on I = 2
            let a = self.a[0][0].re;
            let d = self.a[1][1].re;
            let b = self.a[0][1];
            let det = a * d - b.norm_sqr();
            if !(a > 0.0) || !(det > 0.0) || !det.is_finite() {
                return None;
            }
            let inv = 1.0 / det;
            let mut m = CMat::zeros(2);
            m.a[0][0] = C64::new(d * inv, 0.0);
            m.a[1][1] = C64::new(a * inv, 0.0);
            m.a[0][1] = -b * inv;
            m.a[1][0] = -b.conj() * inv;
            return Some((m, det.ln()));
        }
        let l = self.cholesky()?;
        let logdet = 2.0 * (0..n).map(|i| l.a[i][i].re.ln()).sum::<f64>();
        // invert L by forward substitution, then inv = L⁻ᴴ L⁻¹
        let mut linv = CMat::zeros(n);
        for j in 0..n {
            linv.a[j][j] = C64::new(1.0 / l.a[j][j].re, 0.0);
            for i in j + 1..n {
                let mut acc = ZERO;
                for k in j..i {
                    acc -= l.a[i][k] * linv.a[k][j];
                }
                linv.a[i][j] = acc / l.a[i][i].re;
            }
        }
        let inv = linv.adjoint() * linv;
        Some((inv.hermitian_part(), logdet))
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        assert!(i < self.n && j < self.n, "index ({i},{j}) out of bounds");
        &self.a[i][j]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        assert!(i < self.n && j < self.n, "index ({i},{j}) out of bounds");
        &mut self.a[i][j]
    }
}

impl Mul for CMat {
    type Output = CMat;
    #[inline]
    fn mul(self, rhs: CMat) -> CMat {
        debug_assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.a[i][k];
                for j in 0..n {
                    out.a[i][j] += aik * rhs.a[k][j];
                }
            }
        }
        out
    }
}

impl Add for CMat {
    type Output = CMat;
    fn add(self, rhs: CMat) -> CMat {
        let mut out = self;
        out += rhs;
        out
    }
}

impl AddAssign for CMat {
    fn add_assign(&mut self, rhs: CMat) {
        debug_assert_eq!(self.n, rhs.n);
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[i][j] += rhs.a[i][j];
            }
        }
    }
}

impl Sub for CMat {
    type Output = CMat;
    fn sub(self, rhs: CMat) -> CMat {
        debug_assert_eq!(self.n, rhs.n);
        let mut out = self;
        for i in 0..self.n {
            for j in 0..self.n {
                out.a[i][j] -= rhs.a[i][j];
            }
        }
        out
    }
}

impl fmt::Debug for CMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[C64]> = (0..self.n).map(|i| &self.a[i][..self.n]).collect();
        f.debug_list().entries(rows).finish()
    }
}

/// A complex matrix known to be Hermitian to within [`HERMITIAN_TOL`].
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct HermitianMatrix(CMat);

impl HermitianMatrix {
    /// Validates Hermitian symmetry; the stored matrix is the exact Hermitian part.
    pub fn new(m: CMat) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let defect = m.hermitian_defect();
        if defect > HERMITIAN_TOL {
            return Err(Error::InvalidInput(format!(
                "matrix is not Hermitian (defect {defect:.3e})"
            )));
        }
        Ok(HermitianMatrix(m.hermitian_part()))
    }

    pub fn identity(n: usize) -> Self {
        HermitianMatrix(CMat::identity(n))
    }

    /// Wraps `m` after projecting it onto its Hermitian part.
    pub fn from_hermitian_part(m: &CMat) -> Self {
        HermitianMatrix(m.hermitian_part())
    }

    #[inline]
    pub fn as_cmat(&self) -> &CMat {
        &self.0
    }

    #[inline]
    pub fn into_cmat(self) -> CMat {
        self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.n
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    pub fn scale(&self, s: f64) -> HermitianMatrix {
        HermitianMatrix(self.0.scale(s))
    }

    pub fn is_psd(&self) -> bool {
        let (vals, _) = herm_eig(self);
        let scale = (self.trace() / self.dim() as f64).abs();
        vals[0] >= -1e-10 * scale
    }
}

/// Eigen-decomposition of a Hermitian matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the unitary matrix whose
/// columns are the matching eigenvectors.
pub fn herm_eig(h: &HermitianMatrix) -> (Vec<f64>, CMat) {
    let n = h.dim();
    let mut a = *h.as_cmat();
    let mut v = CMat::identity(n);
    let norm = a.frobenius_norm();
    if norm == 0.0 {
        return (vec![0.0; n], v);
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.a[p][q].norm_sqr();
            }
        }
        if off.sqrt() <= 1e-17 * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.a[p][q];
                let r = apq.norm();
                if r <= 1e-300 {
                    continue;
                }
                // phase e^{-iφ} on column q makes a_pq real, then a real rotation zeroes it
                let phase = (apq / r).conj();
                let app = a.a[p][p].re;
                let aqq = a.a[q][q].re;
                let theta = 0.5 * (2.0 * r).atan2(aqq - app);
                let (s, c) = theta.sin_cos();
                let u_pp = C64::new(c, 0.0);
                let u_pq = C64::new(s, 0.0);
                let u_qp = phase * (-s);
                let u_qq = phase * c;
                // a <- a U
                for k in 0..n {
                    let akp = a.a[k][p];
                    let akq = a.a[k][q];
                    a.a[k][p] = akp * u_pp + akq * u_qp;
                    a.a[k][q] = akp * u_pq + akq * u_qq;
                }
                // a <- Uᴴ a
                for k in 0..n {
                    let apk = a.a[p][k];
                    let aqk = a.a[q][k];
                    a.a[p][k] = u_pp.conj() * apk + u_qp.conj() * aqk;
                    a.a[q][k] = u_pq.conj() * apk + u_qq.conj() * aqk;
                }
                a.a[p][q] = ZERO;
                a.a[q][p] = ZERO;
                for k in 0..n {
                    let vkp = v.a[k][p];
                    let vkq = v.a[k][q];
                    v.a[k][p] = vkp * u_pp + vkq * u_qp;
                    v.a[k][q] = vkp * u_pq + vkq * u_qq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.a[i][i].re.total_cmp(&a.a[j][j].re));
    let vals = order.iter().map(|&i| a.a[i][i].re).collect();
    let vecs = CMat::from_fn(n, |r, c| v.a[r][order[c]]);
    (vals, vecs)
}

/// `U diag(f(λ)) Uᴴ`.
fn spectral_map(vals: &[f64], vecs: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let n = vecs.n;
    let mut out = CMat::zeros(n);
    for (k, &lam) in vals.iter().enumerate() {
        let fl = f(lam);
        for i in 0..n {
            let vik = vecs.a[i][k] * fl;
            for j in 0..n {
                out.a[i][j] += vik * vecs.a[j][k].conj();
            }
        }
    }
    out.hermitian_part()
}

fn psd_scale(vals: &[f64]) -> f64 {
    let n = vals.len().max(1) as f64;
    (vals.iter().sum::<f64>() / n).abs().max(vals.iter().fold(0.0f64, |m, v| m.max(v.abs())) / n)
}

/// Principal square root of a Hermitian positive semidefinite matrix.
pub fn herm_sqrt(h: &HermitianMatrix) -> Result<HermitianMatrix> {
    let (vals, vecs) = herm_eig(h);
    let tol = 1e-10 * psd_scale(&vals);
    if vals[0] < -tol {
        return Err(Error::InvalidInput(format!(
            "matrix is not positive semidefinite (eigenvalue {:.3e})",
            vals[0]
        )));
    }
    Ok(HermitianMatrix(spectral_map(&vals, &vecs, |l| l.max(0.0).sqrt())))
}

/// Solves `R Ψ R = Ω` for Hermitian positive semidefinite `R`.
///
/// Uses `R = Ψ^{-1/2} (Ψ^{1/2} Ω Ψ^{1/2})^{1/2} Ψ^{-1/2}`. `Ψ` must be
/// positive definite; small negative eigenvalues of `Ω` from round-off are
/// clipped.
pub fn solve_riccati(psi: &HermitianMatrix, omega: &HermitianMatrix) -> Result<HermitianMatrix> {
    if psi.dim() != omega.dim() {
        return Err(Error::DimensionMismatch(format!(
            "Ψ is {0}x{0}, Ω is {1}x{1}",
            psi.dim(),
            omega.dim()
        )));
    }
    let (vals, vecs) = herm_eig(psi);
    let top = vals[vals.len() - 1];
    if !(vals[0] > 1e-14 * top) || !(top > 0.0) || !top.is_finite() {
        return Err(Error::IllConditioned {
            bin: None,
            reason: format!("Ψ is singular (eigenvalues {:.3e}..{:.3e})", vals[0], top),
        });
    }
    let psi_half = spectral_map(&vals, &vecs, f64::sqrt);
    let psi_mhalf = spectral_map(&vals, &vecs, |l| 1.0 / l.sqrt());
    let inner = HermitianMatrix::from_hermitian_part(&(psi_half * *omega.as_cmat() * psi_half));
    let (ivals, ivecs) = herm_eig(&inner);
    let inner_sqrt = spectral_map(&ivals, &ivecs, |l| l.max(0.0).sqrt());
    Ok(HermitianMatrix::from_hermitian_part(
        &(psi_mhalf * inner_sqrt * psi_mhalf),
    ))
}

/// Minimizes `tr(R⁻¹ Ω) + tr(R Ψ)` over Hermitian `R` with `tr R = target`.
///
/// The minimizer solves `R (Ψ + λI) R = Ω`; `tr R` falls monotonically in
/// `λ`, which is found by bisection on `ln(λ + λ_min(Ψ))`. Fails when the
/// target cannot be bracketed, which happens only for (numerically) singular
/// `Ω`.
pub fn solve_riccati_fixed_trace(psi: &HermitianMatrix, omega: &HermitianMatrix, target: f64) -> Result<HermitianMatrix> {
    if psi.dim() != omega.dim() {
        return Err(Error::DimensionMismatch(format!(
            "Ψ is {0}x{0}, Ω is {1}x{1}",
            psi.dim(),
            omega.dim()
        )));
    }
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidInput(format!("trace target {target} is not positive")));
    }
    let (vals, vecs) = herm_eig(psi);
    let top = vals[vals.len() - 1];
    if !(vals[0] > 1e-14 * top) || !(top > 0.0) || !top.is_finite() {
        return Err(Error::IllConditioned {
            bin: None,
            reason: format!("Ψ is singular (eigenvalues {:.3e}..{:.3e})", vals[0], top),
        });
    }
    // in the eigenbasis of Ψ the shifted matrix is diagonal
    let rotated = HermitianMatrix::from_hermitian_part(&(vecs.adjoint() * *omega.as_cmat() * vecs));
    let at = |mu: f64| -> CMat {
        let d: Vec<f64> = vals.iter().map(|l| l - vals[0] + mu).collect();
        let half = CMat::from_real_diag(&d.iter().map(|x| x.sqrt()).collect::<Vec<_>>());
        let mhalf = CMat::from_real_diag(&d.iter().map(|x| 1.0 / x.sqrt()).collect::<Vec<_>>());
        let inner = HermitianMatrix::from_hermitian_part(&(half * *rotated.as_cmat() * half));
        let (ivals, ivecs) = herm_eig(&inner);
        mhalf * spectral_map(&ivals, &ivecs, |l| l.max(0.0).sqrt()) * mhalf
    };
    let trace = |mu: f64| at(mu).trace().re;
    let (mut lo, mut hi) = (top, top);
    while trace(hi) > target {
        hi *= 10.0;
        if hi > 1e30 * top {
            return Err(Error::IllConditioned {
                bin: None,
                reason: "trace target is below every feasible solution".into(),
            });
        }
    }
    while trace(lo) < target {
        lo /= 10.0;
        if lo < 1e-30 * top {
            return Err(Error::IllConditioned {
                bin: None,
                reason: "trace target is out of reach for a singular Ω".into(),
            });
        }
    }
    for _ in 0..200 {
        if hi / lo - 1.0 <= 1e-15 {
            break;
        }
        let mid = (lo * hi).sqrt();
        if trace(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = at((lo * hi).sqrt());
    Ok(HermitianMatrix::from_hermitian_part(&(vecs * r * vecs.adjoint())))
}

/// Symmetrizes `m` and loads its diagonal: `(m + mᴴ)/2 + eps I`.
///
/// When the Hermitian part of `m` is positive semidefinite, the result has
/// every eigenvalue at least `eps`.
pub fn regularize_psd(m: &CMat, eps: f64) -> HermitianMatrix {
    let mut out = m.hermitian_part();
    for i in 0..out.n {
        out.a[i][i].re += eps;
    }
    HermitianMatrix(out)
}

/// Diagonal loading used after spatial updates: `1e-7 · tr(M)/dim`.
pub fn default_loading(m: &HermitianMatrix) -> f64 {
    1e-7 * (m.trace() / m.dim() as f64).abs()
}

/// `tr(A B)` without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> Result<C64> {
    if a.n != b.n {
        return Err(Error::DimensionMismatch(format!(
            "trace_prod of {0}x{0} and {1}x{1}",
            a.n, b.n
        )));
    }
    Ok(trace_prod_unchecked(a, b))
}

#[inline]
pub(crate) fn trace_prod_unchecked(a: &CMat, b: &CMat) -> C64 {
    let mut acc = ZERO;
    for i in 0..a.n {
        for k in 0..a.n {
            acc += a.a[i][k] * b.a[k][i];
        }
    }
    acc
}
