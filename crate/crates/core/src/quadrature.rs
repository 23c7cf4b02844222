//! Sphere quadrature rules, used to check SH identities numerically.

use crate::sphere_sh::Direction;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Product rule: Gauss–Legendre in `cos θ`, uniform in `φ`. Integrates
/// spherical polynomials exactly up to degree `min(2·n_theta − 1, n_phi − 1)`.
/// Weights sum to `4π`.
pub fn gauss_legendre_sphere(n_theta: usize, n_phi: usize) -> (Vec<Direction>, Vec<f64>) {
    let (z, wz) = gauss_legendre(n_theta);
    let mut dirs = Vec::with_capacity(n_theta * n_phi);
    let mut weights = Vec::with_capacity(n_theta * n_phi);
    let dphi = 2.0 * std::f64::consts::PI / n_phi as f64;
    for (zi, wi) in z.iter().zip(&wz) {
        let s = (1.0 - zi * zi).sqrt();
        for j in 0..n_phi {
            let phi = (j as f64 + 0.5) * dphi;
            dirs.push([s * phi.cos(), s * phi.sin(), *zi]);
            weights.push(wi * dphi);
        }
    }
    (dirs, weights)
}

/// Fibonacci lattice: `n` near-uniform unit vectors, usable as an
/// equal-weight (`4π/n`) rule.
pub fn fibonacci_sphere(n: usize) -> Vec<Direction> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let v = [r * phi.cos(), r * phi.sin(), z];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / norm, v[1] / norm, v[2] / norm]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let int = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((int(0) - 2.0).abs() < 1e-14);
        assert!((int(10) - 2.0 / 11.0).abs() < 1e-14);
        assert!(int(7).abs() < 1e-14);
    }

    #[test]
    fn sphere_weights_sum_to_area() {
        let (_, w) = gauss_legendre_sphere(8, 16);
        assert!((w.iter().sum::<f64>() - 4.0 * std::f64::consts::PI).abs() < 1e-12);
    }
}
