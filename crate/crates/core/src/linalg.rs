//! Dense complex linear algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn zeros(r: usize, c: usize) -> CMat {
    CMat::zeros(r, c)
}

/// Frobenius norm of `a - a^H` relative to `1 + ||a||_F`.
pub fn hermitian_defect(a: &CMat) -> f64 {
    if a.nrows() != a.ncols() {
        return f64::INFINITY;
    }
    let mut d = 0.0;
    let n = a.nrows();
    for j in 0..n {
        for i in 0..n {
            d += (a[(i, j)] - a[(j, i)].conj()).norm_sqr();
        }
    }
    d.sqrt() / (1.0 + a.norm())
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    hermitian_defect(a) <= tol
}

/// `(a + a^H) / 2`.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()) * c(0.5)
}

pub fn hermitize_in_place(a: &mut CMat) {
    let n = a.nrows();
    for j in 0..n {
        a[(j, j)].im = 0.0;
        for i in (j + 1)..n {
            let v = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = v;
            a[(j, i)] = v.conj();
        }
    }
}

/// Block `(n, i)` of a matrix partitioned into `p x q` tiles (0-based).
pub fn block(a: &CMat, n: usize, i: usize, p: usize, q: usize) -> Result<CMat> {
    if p == 0 || q == 0 || !a.nrows().is_multiple_of(p) || !a.ncols().is_multiple_of(q) {
        return Err(Error::Dimension(format!(
            "{}x{} matrix cannot be tiled by {}x{} blocks",
            a.nrows(),
            a.ncols(),
            p,
            q
        )));
    }
    let (nb_r, nb_c) = (a.nrows() / p, a.ncols() / q);
    if n >= nb_r || i >= nb_c {
        return Err(Error::Index(format!(
            "block ({n}, {i}) outside {nb_r}x{nb_c} block grid"
        )));
    }
    Ok(a.view((n * p, i * q), (p, q)).into_owned())
}

pub fn set_block(a: &mut CMat, n: usize, i: usize, b: &CMat) {
    let (p, q) = b.shape();
    a.view_mut((n * p, i * q), (p, q)).copy_from(b);
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[CMat]) -> CMat {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), b.shape()).copy_from(b);
        off += b.nrows();
    }
    out
}

/// Column-stacking `vec` of a matrix.
pub fn vec_of(a: &CMat) -> CVec {
    CVec::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &CVec, rows: usize, cols: usize) -> CMat {
    CMat::from_column_slice(rows, cols, v.as_slice())
}

pub fn trace(a: &CMat) -> C64 {
    a.trace()
}

/// `tr(a b)` without forming the product.
pub fn trace_of_product(a: &CMat, b: &CMat) -> C64 {
    let (r, k) = a.shape();
    debug_assert_eq!(b.shape(), (k, r));
    let mut s = ZERO;
    for i in 0..r {
        for j in 0..k {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

/// Pairwise (cascade) summation of complex terms.
pub fn pairwise_sum(xs: &[C64]) -> C64 {
    match xs.len() {
        0 => ZERO,
        1 => xs[0],
        n if n <= 8 => xs.iter().copied().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Eigen-decomposition of a Hermitian matrix: real eigenvalues, unitary eigenvectors.
pub fn hermitian_eigen(a: &CMat) -> (Vec<f64>, CMat) {
    let mut h = a.clone();
    hermitize_in_place(&mut h);
    let eig = SymmetricEigen::new(h);
    (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
}

/// Hermitian PSD square root. Negative eigenvalues within `1e-10` of the
/// spectral radius are treated as rounding and clipped to zero.
pub fn psd_sqrt(a: &CMat) -> Result<CMat> {
    let defect = hermitian_defect(a);
    if defect > 1e-10 {
        return Err(Error::NotHermitian(defect));
    }
    let (vals, vecs) = hermitian_eigen(a);
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut roots = Vec::with_capacity(vals.len());
    for &v in &vals {
        if v < -floor {
            return Err(Error::NotPsd(v));
        }
        roots.push(v.max(0.0).sqrt());
    }
    let mut scaled = vecs.clone();
    for (j, r) in roots.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*r);
    }
    let mut s = scaled * vecs.adjoint();
    hermitize_in_place(&mut s);
    Ok(s)
}

pub fn cholesky(a: &CMat) -> Option<Cholesky<C64, Dyn>> {
    if a.nrows() != a.ncols() {
        return None;
    }
    let mut h = a.clone();
    hermitize_in_place(&mut h);
    Cholesky::new(h)
}

/// Solve `a x = b` for Hermitian positive-definite `a`.
pub fn solve_hpd(a: &CMat, b: &CMat) -> Result<CMat> {
    match cholesky(a) {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::NotPd(format!("{}x{} system", a.nrows(), a.ncols()))),
    }
}

/// Cholesky solve on `D^{-1/2} a D^{-1/2}` with `D = diag(a)`. Blocks of
/// very different magnitude (near and far APs) otherwise lose definiteness
/// to rounding.
fn solve_equilibrated(a: &CMat, b: &CMat) -> Option<CMat> {
    let n = a.nrows();
    let d: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
    if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return cholesky(a).map(|ch| ch.solve(b));
    }
    let s: Vec<f64> = d.iter().map(|x| 1.0 / x.sqrt()).collect();
    let scaled = CMat::from_fn(n, n, |i, j| a[(i, j)] * (s[i] * s[j]));
    let rhs = CMat::from_fn(n, b.ncols(), |i, j| b[(i, j)] * s[i]);
    let ch = cholesky(&scaled)?;
    // unit diagonal after scaling: a rounding-level pivot means singular
    if (0..n).any(|i| ch.l_dirty()[(i, i)].norm_sqr() < 64.0 * f64::EPSILON) {
        return None;
    }
    let y = ch.solve(&rhs);
    Some(CMat::from_fn(n, b.ncols(), |i, j| y[(i, j)] * s[i]))
}

/// Solve `a x = b` with diagonal equilibration; if the factorization fails,
/// retry once with a ridge of `1e-12 tr(a)/n`. The flag reports whether the ridge was used.
pub fn solve_hpd_with_ridge(a: &CMat, b: &CMat) -> Result<(CMat, bool)> {
    if let Some(x) = solve_equilibrated(a, b) {
        return Ok((x, false));
    }
    let n = a.nrows();
    let ridge = 1e-12 * a.trace().re.abs() / n.max(1) as f64;
    if ridge > 0.0 && ridge.is_finite() {
        let mut r = a.clone();
        for i in 0..n {
            r[(i, i)] += c(ridge);
        }
        if let Some(ch) = cholesky(&r) {
            log::warn!("ridge {ridge:e} added to a singular {n}x{n} system");
            return Ok((ch.solve(b), true));
        }
    }
    Err(Error::NotPd(format!("{n}x{n} system, ridge did not help")))
}

pub fn inverse_hpd(a: &CMat) -> Result<CMat> {
    match cholesky(a) {
        Some(ch) => Ok(ch.inverse()),
        None => Err(Error::NotPd(format!("{}x{} inverse", a.nrows(), a.ncols()))),
    }
}

/// Natural log-determinant of a Hermitian positive-definite matrix.
pub fn logdet_hpd(a: &CMat) -> Result<f64> {
    match cholesky(a) {
        Some(ch) => Ok(ch
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| 2.0 * d.re.ln())
            .sum()),
        None => Err(Error::NotPd(format!(
            "{}x{} log-determinant",
            a.nrows(),
            a.ncols()
        ))),
    }
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// `F^T ⊗ I_L`: maps `vec(H)` to `vec(H F)` for an `L x N` matrix `H`.
pub fn lift(f: &CMat, l: usize) -> CMat {
    f.transpose().kronecker(&eye(l))
}

pub fn fro2(a: &CMat) -> f64 {
    a.norm_squared()
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> CMat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CMat::from_fn(n, m, |_, _| crate::rng::complex_normal(&mut rng))
    }

    #[test]
    fn blocks_of_identity() {
        let i = eye(6);
        assert_eq!(block(&i, 1, 1, 2, 2).unwrap(), eye(2));
        assert_eq!(block(&i, 0, 2, 2, 2).unwrap(), zeros(2, 2));
        assert!(matches!(block(&i, 3, 0, 2, 2), Err(Error::Index(_))));
    }

    #[test]
    fn sqrt_of_simple_matrices() {
        assert!(max_abs_diff(&psd_sqrt(&eye(3)).unwrap(), &eye(3)) < 1e-14);
        let d = CMat::from_diagonal(&CVec::from_vec(vec![c(4.0), c(9.0)]));
        let s = psd_sqrt(&d).unwrap();
        assert!((s[(0, 0)].re - 2.0).abs() < 1e-14 && (s[(1, 1)].re - 3.0).abs() < 1e-14);
    }

    #[test]
    fn sqrt_reconstructs_random_psd() {
        for seed in 0..20 {
            let b = random(5, 3, seed);
            let a = &b * b.adjoint();
            let s = psd_sqrt(&a).unwrap();
            assert!((&s * &s - &a).norm() <= 1e-10 * (1.0 + a.norm()));
            assert!(is_hermitian(&s, 1e-14));
        }
    }

    #[test]
    fn sqrt_rejects_non_hermitian() {
        let mut a = eye(2);
        a[(0, 1)] = c(1.0);
        assert!(matches!(psd_sqrt(&a), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn lift_maps_vec() {
        let h = random(2, 3, 1);
        let f = random(3, 3, 2);
        let lhs = lift(&f, 2) * vec_of(&h);
        let rhs = vec_of(&(&h * &f));
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn logdet_matches_eigenvalues() {
        let b = random(4, 4, 9);
        let a = &b * b.adjoint() + eye(4);
        let (vals, _) = hermitian_eigen(&a);
        let expect: f64 = vals.iter().map(|v| v.ln()).sum();
        assert!((logdet_hpd(&a).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn ridge_fallback_on_singular() {
        let b = random(4, 1, 3);
        let a = &b * b.adjoint();
        let rhs = random(4, 1, 4);
        assert!(solve_hpd(&a, &rhs).is_err());
        let (_, ridged) = solve_hpd_with_ridge(&a, &rhs).unwrap();
        assert!(ridged);
    }
}
