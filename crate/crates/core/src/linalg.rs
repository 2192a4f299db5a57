//! Small dense helpers over `nalgebra` used by the solvers.

use nalgebra::{DMatrix, DVector};

/// `out += scale * m * v` for a row-major view of `m` applied to a slice.
#[inline]
pub fn gemv_acc(out: &mut [f64], m: &DMatrix<f64>, v: &[f64], scale: f64) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(out.len(), rows);
    debug_assert_eq!(v.len(), cols);
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, vj) in v.iter().enumerate() {
            acc += m[(i, j)] * vj;
        }
        *o += scale * acc;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral (operator) norm.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// `exp(A h)` and `int_0^h exp(A s) ds` from one exponential of the
/// augmented block matrix `[[A, I], [0, 0]] h`.
pub fn exp_and_integral(a: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = a.nrows();
    if d == 1 {
        let ah = a[(0, 0)] * h;
        let phi = ah.exp();
        // h * (e^x - 1) / x with x = a h, stable near zero
        let integral = if ah == 0.0 { h } else { h * ah.exp_m1() / ah };
        return (
            DMatrix::from_element(1, 1, phi),
            DMatrix::from_element(1, 1, integral),
        );
    }
    let mut block = DMatrix::zeros(2 * d, 2 * d);
    block.view_mut((0, 0), (d, d)).copy_from(&(a * h));
    block
        .view_mut((0, d), (d, d))
        .copy_from(&(DMatrix::identity(d, d) * h));
    let e = block.exp();
    (
        e.view((0, 0), (d, d)).into_owned(),
        e.view((0, d), (d, d)).into_owned(),
    )
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = smax * 1e-12 * m.nrows().max(m.ncols()) as f64;
    if smax == 0.0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    svd.pseudo_inverse(cutoff)
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}
