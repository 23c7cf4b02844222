//! Real symmetric spherical harmonics on S².
//!
//! Only even degrees are kept, so every basis function satisfies
//! `Y(u) = Y(-u)`, which matches the antipodal symmetry of diffusion signals.
//! The basis is orthonormal under the surface measure:
//!
//! ```text
//! Y_lm = √2 · N_l^|m| P_l^|m|(cos θ) sin(|m| φ)   m < 0
//!        N_l^0 P_l^0(cos θ)                       m = 0
//!        √2 · N_l^m P_l^m(cos θ) cos(m φ)          m > 0
//! ```
//!
//! Associated Legendre values are produced by the fully normalised three-term
//! recurrence in double precision; no Condon–Shortley phase is applied.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit direction on the sphere.
pub type Direction = [f64; 3];

/// Tikhonov weight used when callers do not pick one.
pub const DEFAULT_LAMBDA_REG: f64 = 0.006;

const UNIT_TOL: f64 = 1e-9;

/// One (l, m) pair of the real even-order basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShTerm {
    pub l: u32,
    pub m: i32,
}

impl ShTerm {
    /// Laplace–Beltrami eigenvalue magnitude `l(l+1)`.
    pub fn degree_weight(&self) -> f64 {
        let l = self.l as f64;
        l * (l + 1.0)
    }
}

/// Ordered (l, m) enumeration: ascending l, then ascending m, even l only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShOrderIndex {
    order: usize,
    entries: Vec<ShTerm>,
}

impl ShOrderIndex {
    pub fn new(order: i64) -> Result<Self> {
        if order < 0 || order % 2 != 0 {
            return Err(Error::InvalidShOrder(order));
        }
        Ok(Self {
            order: order as usize,
            entries: even_terms(order as usize).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[ShTerm] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Position of `(l, m)` in the table, if present.
    pub fn position(&self, l: u32, m: i32) -> Option<usize> {
        self.entries.iter().position(|t| t.l == l && t.m == m)
    }
}

fn even_terms(order: usize) -> impl Iterator<Item = ShTerm> {
    (0..=order as u32)
        .step_by(2)
        .flat_map(|l| (-(l as i32)..=l as i32).map(move |m| ShTerm { l, m }))
}

/// Enumerates the basis for even order `order`.
pub fn sh_index_table(order: i64) -> Result<ShOrderIndex> {
    ShOrderIndex::new(order)
}

/// Number of coefficients of the even-order basis up to degree `order`.
pub fn n_coeffs(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Largest even order whose coefficient count fits in `n_directions`.
pub fn max_order_for(n_directions: usize) -> Option<usize> {
    if n_directions == 0 {
        return None;
    }
    let mut order = 0;
    while n_coeffs(order + 2) <= n_directions {
        order += 2;
    }
    Some(order)
}

/// SH basis evaluated at a set of directions (rows) for every index (columns).
#[derive(Debug, Clone)]
pub struct ShBasis {
    values: DMatrix<f64>,
    index: ShOrderIndex,
    directions: Vec<Direction>,
}

impl ShBasis {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn index(&self) -> &ShOrderIndex {
        &self.index
    }

    pub fn order(&self) -> usize {
        self.index.order()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn n_directions(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.values.ncols()
    }

    /// Row restricted to a subset of directions.
    pub fn select_rows(&self, rows: &[usize]) -> ShBasis {
        let values = DMatrix::from_fn(rows.len(), self.n_coeffs(), |r, c| self.values[(rows[r], c)]);
        ShBasis {
            values,
            index: self.index.clone(),
            directions: rows.iter().map(|&r| self.directions[r]).collect(),
        }
    }
}

/// Evaluates the real symmetric basis of even order `order` at `dirs`.
pub fn eval_sh_basis(dirs: &[Direction], order: i64) -> Result<ShBasis> {
    let index = ShOrderIndex::new(order)?;
    for (i, d) in dirs.iter().enumerate() {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitDirection { index: i, norm });
        }
    }
    let lmax = index.order();
    let mut values = DMatrix::zeros(dirs.len(), index.len());
    let mut legendre = vec![0.0; (lmax + 1) * (lmax + 2) / 2];
    for (row, d) in dirs.iter().enumerate() {
        let cos_t = d[2].clamp(-1.0, 1.0);
        let sin_t = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let phi = d[1].atan2(d[0]);
        normalized_legendre(lmax, cos_t, sin_t, &mut legendre);
        for (col, term) in index.entries().iter().enumerate() {
            let l = term.l as usize;
            let am = term.m.unsigned_abs() as usize;
            let p = legendre[l * (l + 1) / 2 + am];
            values[(row, col)] = match term.m {
                0 => p,
                m if m > 0 => std::f64::consts::SQRT_2 * p * (am as f64 * phi).cos(),
                _ => std::f64::consts::SQRT_2 * p * (am as f64 * phi).sin(),
            };
        }
    }
    Ok(ShBasis {
        values,
        index,
        directions: dirs.to_vec(),
    })
}

/// Fills `out[l(l+1)/2 + m]` with the orthonormalised `N_l^m P_l^m(cos θ)` for
/// `0 ≤ m ≤ l ≤ lmax`.
fn normalized_legendre(lmax: usize, x: f64, s: f64, out: &mut [f64]) {
    let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
    out[0] = 0.5 / std::f64::consts::PI.sqrt();
    for m in 1..=lmax {
        let mf = m as f64;
        out[idx(m, m)] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * out[idx(m - 1, m - 1)];
    }
    for m in 0..lmax {
        out[idx(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * x * out[idx(m, m)];
    }
    for m in 0..=lmax {
        let mf = m as f64;
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let lm1 = lf - 1.0;
            let b = ((lm1 * lm1 - mf * mf) / (4.0 * lm1 * lm1 - 1.0)).sqrt();
            out[idx(l, m)] = a * (x * out[idx(l - 1, m)] - b * out[idx(l - 2, m)]);
        }
    }
}

/// Coefficient vector indexed by an [`ShOrderIndex`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoefficients {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

impl ShCoefficients {
    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            coeffs: vec![0.0; n_coeffs(order)],
        }
    }

    pub fn new(order: usize, coeffs: Vec<f64>) -> Result<Self> {
        if order % 2 != 0 {
            return Err(Error::InvalidShOrder(order as i64));
        }
        if coeffs.len() != n_coeffs(order) {
            return Err(Error::DimensionMismatch(format!(
                "order {order} needs {} coefficients, got {}",
                n_coeffs(order),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("SH coefficient".into()));
        }
        Ok(Self { order, coeffs })
    }

    /// Iterates `(term, coefficient)` pairs.
    pub fn terms(&self) -> impl Iterator<Item = (ShTerm, f64)> + '_ {
        even_terms(self.order).zip(self.coeffs.iter().copied())
    }
}

/// Precomputed regularised least-squares solver for one basis.
///
/// Holds `(YᵀY + λΛ)⁻¹Yᵀ` with `Λ = diag(l(l+1))`, so each fit is a single
/// matrix-vector product. Shared read-only across threads.
#[derive(Debug, Clone)]
pub struct ShFitter {
    order: usize,
    operator: DMatrix<f64>,
}

impl ShFitter {
    pub fn new(basis: &ShBasis, lambda_reg: f64) -> Result<Self> {
        if !(lambda_reg >= 0.0) || !lambda_reg.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda_reg must be finite and >= 0, got {lambda_reg}"
            )));
        }
        let y = basis.values();
        let mut normal = y.transpose() * y;
        for (i, term) in basis.index().entries().iter().enumerate() {
            normal[(i, i)] += lambda_reg * term.degree_weight();
        }
        let eig = SymmetricEigen::new(normal.clone());
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 1e-11 * max.max(f64::MIN_POSITIVE)) {
            return Err(Error::SingularFit {
                order: basis.order(),
                directions: basis.n_directions(),
                required: basis.n_coeffs(),
            });
        }
        let chol = normal.cholesky().ok_or(Error::SingularFit {
            order: basis.order(),
            directions: basis.n_directions(),
            required: basis.n_coeffs(),
        })?;
        let operator = chol.solve(&y.transpose());
        Ok(Self {
            order: basis.order(),
            operator,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `(C × N)` fitting operator.
    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    pub fn n_directions(&self) -> usize {
        self.operator.ncols()
    }

    pub fn fit(&self, signal: &[f64]) -> Result<ShCoefficients> {
        if signal.len() != self.n_directions() {
            return Err(Error::DimensionMismatch(format!(
                "signal has {} samples, basis has {} directions",
                signal.len(),
                self.n_directions()
            )));
        }
        let c = &self.operator * DVector::from_column_slice(signal);
        Ok(ShCoefficients {
            order: self.order,
            coeffs: c.as_slice().to_vec(),
        })
    }

    /// Fits every voxel of a direction-fastest buffer; returns coefficients
    /// voxel-major.
    pub fn fit_voxels(&self, signals: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_directions();
        if signals.len() % n != 0 {
            return Err(Error::DimensionMismatch(format!(
                "buffer of {} values is not a multiple of {n} directions",
                signals.len()
            )));
        }
        let c = self.operator.nrows();
        let mut out = vec![0.0; signals.len() / n * c];
        out.par_chunks_mut(c)
            .zip(signals.par_chunks(n))
            .for_each(|(dst, s)| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = (0..n).map(|j| self.operator[(i, j)] * s[j]).sum();
                }
            });
        Ok(out)
    }
}

/// Closed-form `argmin ‖Yc − s‖² + λ Σ l(l+1) c²`.
pub fn fit_sh(signal: &[f64], basis: &ShBasis, lambda_reg: f64) -> Result<ShCoefficients> {
    ShFitter::new(basis, lambda_reg)?.fit(signal)
}

/// Evaluates `Y·c`.
pub fn synth_from_sh(coeffs: &ShCoefficients, basis: &ShBasis) -> Result<Vec<f64>> {
    if coeffs.coeffs.len() != basis.n_coeffs() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients against a basis with {} columns",
            coeffs.coeffs.len(),
            basis.n_coeffs()
        )));
    }
    let v = basis.values() * DVector::from_column_slice(&coeffs.coeffs);
    Ok(v.as_slice().to_vec())
}

/// Applies the spherical Laplacian: `c_lm ↦ -l(l+1) c_lm`.
pub fn laplace_beltrami_apply(coeffs: &ShCoefficients) -> ShCoefficients {
    let coeffs_out = coeffs.terms().map(|(t, c)| -t.degree_weight() * c).collect();
    ShCoefficients {
        order: coeffs.order,
        coeffs: coeffs_out,
    }
}

/// Sobolev energy `½ Σ l(l+1) c_lm²`, equal to `½∫‖∇f‖² dΩ`.
pub fn smoothness_energy(coeffs: &ShCoefficients) -> f64 {
    0.5 * coeffs.terms().map(|(t, c)| t.degree_weight() * c * c).sum::<f64>()
}

/// Heat-kernel smoothing `c_lm ↦ exp(-l(l+1)τ) c_lm`.
pub fn heat_smooth(coeffs: &ShCoefficients, tau: f64) -> Result<ShCoefficients> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be >= 0, got {tau}")));
    }
    let coeffs_out = coeffs
        .terms()
        .map(|(t, c)| if t.l == 0 { c } else { (-t.degree_weight() * tau).exp() * c })
        .collect();
    Ok(ShCoefficients {
        order: coeffs.order,
        coeffs: coeffs_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{fibonacci_sphere, gauss_legendre_sphere};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn index_table_lengths() {
        assert_eq!(sh_index_table(0).unwrap().entries(), &[ShTerm { l: 0, m: 0 }]);
        assert_eq!(sh_index_table(2).unwrap().len(), 6);
        assert_eq!(sh_index_table(8).unwrap().len(), 45);
        assert!(sh_index_table(3).is_err());
        assert!(sh_index_table(-2).is_err());
        let t = sh_index_table(4).unwrap();
        let e = t.entries();
        assert!(e.windows(2).all(|w| (w[0].l, w[0].m) < (w[1].l, w[1].m)));
        assert!(e.iter().all(|t| t.l % 2 == 0 && t.m.unsigned_abs() <= t.l));
    }

    #[test]
    fn constant_term_and_antipodal_rows() {
        let u = [0.3, -0.4, (1.0f64 - 0.25).sqrt()];
        let v = [-u[0], -u[1], -u[2]];
        let b = eval_sh_basis(&[u, v], 8).unwrap();
        assert!(close(b.values()[(0, 0)], 0.28209479177387814, 1e-15));
        for c in 0..b.n_coeffs() {
            assert!(close(b.values()[(0, c)], b.values()[(1, c)], 1e-13));
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        let err = eval_sh_basis(&[[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]], 2).unwrap_err();
        assert!(matches!(err, Error::NonUnitDirection { index: 1, .. }));
    }

    #[test]
    fn quadrature_orthonormality() {
        let (dirs, weights) = gauss_legendre_sphere(12, 24);
        let b = eval_sh_basis(&dirs, 8).unwrap();
        let y = b.values();
        for i in 0..y.ncols() {
            for j in 0..y.ncols() {
                let g: f64 = (0..y.nrows()).map(|r| weights[r] * y[(r, i)] * y[(r, j)]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(close(g, expect, 1e-12), "({i},{j}) = {g}");
            }
        }
    }

    #[test]
    fn equal_weight_dense_grid_orthonormality() {
        let dirs = fibonacci_sphere(200_000);
        let b = eval_sh_basis(&dirs, 8).unwrap();
        let y = b.values();
        let gram = y.transpose() * y * (4.0 * std::f64::consts::PI / dirs.len() as f64);
        let err = (gram - DMatrix::<f64>::identity(45, 45)).abs().max();
        assert!(err < 1e-5, "max deviation {err}");
    }

    #[test]
    fn constant_signal_fits_to_y00() {
        let dirs = fibonacci_sphere(1);
        let b = eval_sh_basis(&dirs, 0).unwrap();
        let c = fit_sh(&[1.0], &b, 0.0).unwrap();
        assert!(close(c.coeffs[0], 2.0 * std::f64::consts::PI.sqrt(), 1e-12));

        let dirs = fibonacci_sphere(30);
        let b = eval_sh_basis(&dirs, 4).unwrap();
        let c = fit_sh(&vec![1.0; 30], &b, 0.0).unwrap();
        assert!(close(c.coeffs[0], 3.5449077018110318, 1e-10));
        assert!(c.coeffs[1..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn singular_fit_reports_direction_count() {
        let dirs = fibonacci_sphere(10);
        let b = eval_sh_basis(&dirs, 4).unwrap();
        match fit_sh(&[0.0; 10], &b, 0.0) {
            Err(Error::SingularFit { required, directions, .. }) => {
                assert_eq!(required, 15);
                assert_eq!(directions, 10);
            }
            other => panic!("expected singular fit, got {other:?}"),
        }
        // Regularisation makes the same problem solvable.
        assert!(fit_sh(&[0.0; 10], &b, 0.006).is_ok());
    }

    #[test]
    fn synth_trivia() {
        let dirs = fibonacci_sphere(17);
        let b = eval_sh_basis(&dirs, 2).unwrap();
        let mut c = ShCoefficients::zeros(2);
        assert!(synth_from_sh(&c, &b).unwrap().iter().all(|&v| v == 0.0));
        c.coeffs[0] = 2.0 * std::f64::consts::PI.sqrt();
        assert!(synth_from_sh(&c, &b).unwrap().iter().all(|&v| close(v, 1.0, 1e-14)));
        assert!(synth_from_sh(&ShCoefficients::zeros(4), &b).is_err());
    }

    #[test]
    fn laplace_beltrami_eigenvalues() {
        let idx = sh_index_table(4).unwrap();
        let mut c = ShCoefficients::zeros(4);
        c.coeffs[idx.position(2, -1).unwrap()] = 1.0;
        c.coeffs[idx.position(4, 3).unwrap()] = 0.5;
        c.coeffs[0] = 7.0;
        let out = laplace_beltrami_apply(&c);
        assert_eq!(out.coeffs[idx.position(2, -1).unwrap()], -6.0);
        assert_eq!(out.coeffs[idx.position(4, 3).unwrap()], -10.0);
        assert_eq!(out.coeffs[0], 0.0);
    }

    #[test]
    fn energy_and_heat_trivia() {
        let idx = sh_index_table(2).unwrap();
        let mut c = ShCoefficients::zeros(2);
        c.coeffs[0] = 42.0;
        assert_eq!(smoothness_energy(&c), 0.0);
        c.coeffs[0] = 0.0;
        c.coeffs[idx.position(2, 0).unwrap()] = 1.0;
        assert_eq!(smoothness_energy(&c), 3.0);

        let h = heat_smooth(&c, 0.1).unwrap();
        assert!(close(h.coeffs[idx.position(2, 0).unwrap()], (-0.6f64).exp(), 1e-15));
        assert!(close(h.coeffs[idx.position(2, 0).unwrap()], 0.5488, 1e-4));
        assert_eq!(heat_smooth(&c, 0.0).unwrap(), c);
        c.coeffs[0] = 1.5;
        let inf = heat_smooth(&c, f64::INFINITY).unwrap();
        assert_eq!(inf.coeffs[0], 1.5);
        assert!(inf.coeffs[1..].iter().all(|&v| v == 0.0));
        assert!(heat_smooth(&c, -1e-3).is_err());
    }

    #[test]
    fn order_selection() {
        assert_eq!(max_order_for(0), None);
        assert_eq!(max_order_for(1), Some(0));
        assert_eq!(max_order_for(6), Some(2));
        assert_eq!(max_order_for(14), Some(2));
        assert_eq!(max_order_for(15), Some(4));
        assert_eq!(max_order_for(60), Some(8));
    }
}
