//! Image-quality metrics and DTI scalar maps.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DwiVolume, GradientTable};

/// Signals are b0-normalised, so PSNR uses a unit peak unless told otherwise.
pub const DEFAULT_PEAK: f64 = 1.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Floor applied before taking the log of a signal.
pub const DTI_SIGNAL_FLOOR: f64 = 1e-6;
/// b-values at or below this are treated as b0 references.
pub const B0_THRESHOLD: f64 = 50.0;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidParameter("metric of an empty input".into()));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    Ok(())
}

/// `10·log10(peak²/MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(x: &[f64], y: &[f64], peak: f64) -> Result<f64> {
    check_pair(x, y)?;
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak must be > 0, got {peak}")));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM over all fully contained 7×7 windows of two `h × w` images.
/// Local variances use the unbiased estimator.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, peak: f64) -> Result<f64> {
    check_pair(x, y)?;
    if x.len() != h * w {
        return Err(Error::DimensionMismatch(format!("{} values for a {h}x{w} image", x.len())));
    }
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::InvalidParameter(format!("{k}x{k} SSIM window exceeds {h}x{w} image")));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in i..i + k {
                for c in j..j + k {
                    let (a, b) = (x[r * w + c], y[r * w + c]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / np, sy / np);
            let vx = cov_norm * (sxx / np - mx * mx);
            let vy = cov_norm * (syy / np - my * my);
            let vxy = cov_norm * (sxy / np - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Sample correlation coefficient.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    if x.len() < 2 {
        return Err(Error::InvalidParameter("correlation needs at least 2 samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidParameter("correlation of a constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Per-direction and whole-volume quality of a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Directions scored (all, or only the missing ones).
    pub directions: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub pearson: Vec<f64>,
    pub volume_psnr: f64,
    pub volume_pearson: f64,
    pub psnr_summary: Summary,
    pub ssim_summary: Summary,
    pub pearson_summary: Summary,
}

impl MetricReport {
    /// Scores `pred` against `truth` over the given directions.
    pub fn compute(pred: &DwiVolume, truth: &DwiVolume, directions: &[usize], peak: f64) -> Result<Self> {
        if pred.dims() != truth.dims() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", pred.dims(), truth.dims())));
        }
        if directions.is_empty() {
            return Err(Error::InvalidParameter("no directions to score".into()));
        }
        let [h, w, n] = truth.dims();
        if let Some(&d) = directions.iter().find(|&&d| d >= n) {
            return Err(Error::InvalidParameter(format!("direction {d} out of range for {n}")));
        }
        let per: Vec<(f64, f64, f64)> = directions
            .par_iter()
            .map(|&d| {
                let a = pred.direction_image(d);
                let b = truth.direction_image(d);
                let r = pearson_r(&a, &b).unwrap_or(f64::NAN);
                Ok((psnr(&a, &b, peak)?, ssim(&a, &b, h, w, peak)?, r))
            })
            .collect::<Result<_>>()?;
        let gather = |dirs: &[usize], v: &DwiVolume| -> Vec<f64> {
            let data = v.data();
            (0..h * w).flat_map(|px| dirs.iter().map(move |&d| data[px * n + d])).collect()
        };
        let a = gather(directions, pred);
        let b = gather(directions, truth);
        let psnr_v: Vec<f64> = per.iter().map(|p| p.0).collect();
        let ssim_v: Vec<f64> = per.iter().map(|p| p.1).collect();
        let r_v: Vec<f64> = per.iter().map(|p| p.2).collect();
        let finite = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).collect::<Vec<_>>();
        Ok(Self {
            directions: directions.to_vec(),
            volume_psnr: psnr(&a, &b, peak)?,
            volume_pearson: pearson_r(&a, &b).unwrap_or(f64::NAN),
            psnr_summary: Summary::of(&finite(&psnr_v)),
            ssim_summary: Summary::of(&ssim_v),
            pearson_summary: Summary::of(&finite(&r_v)),
            psnr: psnr_v,
            ssim: ssim_v,
            pearson: r_v,
        })
    }
}

/// Per-voxel symmetric diffusion tensors (mm²/s), row-major voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub height: usize,
    pub width: usize,
    pub tensors: Vec<Matrix3<f64>>,
}

/// Log-linear least-squares tensor fit, `ln S = −b·gᵀDg` with `S0 ≡ 1`.
/// Rows with `b ≤ B0_THRESHOLD` are the reference and are not fitted.
pub fn fit_dti(volume: &DwiVolume) -> Result<TensorField> {
    fit_dti_with(volume, volume.table())
}

/// As [`fit_dti`] with an explicit table for the volume's directions.
pub fn fit_dti_with(volume: &DwiVolume, table: &GradientTable) -> Result<TensorField> {
    let n = volume.n_dirs();
    if table.len() != n {
        return Err(Error::DimensionMismatch(format!("table has {} rows for {n} directions", table.len())));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| table.bvals()[i] > B0_THRESHOLD).collect();
    let mut design = DMatrix::zeros(rows.len(), 6);
    for (r, &i) in rows.iter().enumerate() {
        let b = table.bvals()[i];
        let [x, y, z] = table.bvecs()[i];
        let cols = [x * x, y * y, z * z, 2.0 * x * y, 2.0 * x * z, 2.0 * y * z];
        for (c, v) in cols.iter().enumerate() {
            design[(r, c)] = -b * v;
        }
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if rows.len() < 6 || !(smin > 1e-10 * smax) {
        return Err(Error::RankDeficient(format!(
            "{} diffusion-weighted directions give a tensor design of condition {:.3e}",
            rows.len(),
            smax / smin
        )));
    }
    let pinv = svd.pseudo_inverse(0.0).map_err(|e| Error::RankDeficient(e.to_string()))?;
    let data = volume.data();
    let tensors = (0..volume.n_voxels())
        .into_par_iter()
        .map(|v| {
            let logs = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data[v * n + i].max(DTI_SIGNAL_FLOOR).ln()));
            let d = &pinv * logs;
            Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2])
        })
        .collect();
    Ok(TensorField {
        height: volume.height(),
        width: volume.width(),
        tensors,
    })
}

/// FA, MD and AD of one tensor from its sorted eigenvalues. Non-finite
/// eigenvalues yield `None`.
pub fn tensor_scalars(d: &Matrix3<f64>) -> Option<(f64, f64, f64)> {
    let eig = SymmetricEigen::new(*d).eigenvalues;
    let mut l = [eig[0], eig[1], eig[2]];
    if l.iter().any(|v| !v.is_finite()) {
        return None;
    }
    l.sort_by(|a, b| b.total_cmp(a));
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    let dev = ((l[0] - md).powi(2) + (l[1] - md).powi(2) + (l[2] - md).powi(2)).sqrt();
    let fa = if norm > 0.0 { (1.5f64.sqrt() * dev / norm).clamp(0.0, 1.0) } else { 0.0 };
    Some((fa, md, l[0]))
}

/// Scalar maps of a tensor field. `md_norm` and `ad_norm` are min-max
/// normalised to `[0, 1]` over the valid voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtiScalars {
    pub fa: Vec<f64>,
    pub md: Vec<f64>,
    pub ad: Vec<f64>,
    pub md_norm: Vec<f64>,
    pub ad_norm: Vec<f64>,
    /// Voxels with non-finite eigenvalues (their maps hold NaN).
    pub invalid: Vec<usize>,
    /// Voxels with a negative eigenvalue.
    pub negative: Vec<usize>,
}

pub fn dti_scalars(field: &TensorField) -> DtiScalars {
    let n = field.tensors.len();
    let mut out = DtiScalars {
        fa: vec![f64::NAN; n],
        md: vec![f64::NAN; n],
        ad: vec![f64::NAN; n],
        md_norm: vec![f64::NAN; n],
        ad_norm: vec![f64::NAN; n],
        invalid: Vec::new(),
        negative: Vec::new(),
    };
    for (v, d) in field.tensors.iter().enumerate() {
        match tensor_scalars(d) {
            Some((fa, md, ad)) => {
                out.fa[v] = fa;
                out.md[v] = md;
                out.ad[v] = ad;
                if SymmetricEigen::new(*d).eigenvalues.iter().any(|&l| l < 0.0) {
                    out.negative.push(v);
                }
            }
            None => out.invalid.push(v),
        }
    }
    out.md_norm = min_max(&out.md);
    out.ad_norm = min_max(&out.ad);
    out
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    v.iter()
        .map(|&x| {
            if !x.is_finite() {
                f64::NAN
            } else if hi > lo {
                (x - lo) / (hi - lo)
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_directions, simulate_multitensor, stream_rng, TensorCompartment};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn psnr_closed_forms() {
        let x = vec![0.3; 10];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let zero = vec![0.0; 10];
        assert!((psnr(&zero, &vec![0.1; 10], 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&zero, &vec![2.0; 10], 2.0).unwrap().abs() < 1e-12);
        assert!(psnr(&[], &[], 1.0).is_err());
        assert!(psnr(&x, &x[..3], 1.0).is_err());
    }

    fn image(seed: u64, h: usize, w: usize) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn ssim_cases() {
        let x = image(1, 12, 10);
        assert!((ssim(&x, &x, 12, 10, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let bin: Vec<f64> = (0..120).map(|i| ((i / 10 + i % 10) % 2) as f64).collect();
        let inv: Vec<f64> = bin.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&bin, &inv, 12, 10, 1.0).unwrap() < 0.0);
        let mut rng = stream_rng(2, 0);
        let y: Vec<f64> = x.iter().map(|v| v + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
        assert!(ssim(&x, &y, 12, 10, 1.0).unwrap() > 0.99);
        assert_eq!(ssim(&x, &y, 12, 10, 1.0).unwrap(), ssim(&y, &x, 12, 10, 1.0).unwrap());
        assert!(ssim(&x[..36], &x[..36], 6, 6, 1.0).is_err());
    }

    #[test]
    fn pearson_cases() {
        let x = image(3, 10, 10);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson_r(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let a = image(4, 100, 100);
        let b = image(5, 100, 100);
        assert!(pearson_r(&a, &b).unwrap().abs() < 0.05);
        assert!(pearson_r(&x, &vec![1.0; 100]).is_err());
        assert!(pearson_r(&[1.0], &[2.0]).is_err());
    }

    fn scheme(n: usize) -> GradientTable {
        let mut dirs = vec![[0.0, 0.0, 1.0]];
        dirs.extend(generate_directions(n, 9).unwrap());
        let mut bvals = vec![0.0];
        bvals.extend(std::iter::repeat(1000.0).take(n));
        GradientTable::new(bvals, dirs).unwrap()
    }

    fn single(d: Matrix3<f64>, table: &GradientTable) -> DwiVolume {
        let comp = TensorCompartment {
            fraction: 1.0,
            tensor: d,
        };
        simulate_multitensor(&[vec![comp]], 1, 1, table).unwrap()
    }

    #[test]
    fn dti_recovers_generating_tensors() {
        let table = scheme(20);
        let iso = Matrix3::identity() * 0.7e-3;
        let f = fit_dti(&single(iso, &table)).unwrap();
        assert!((f.tensors[0] - iso).abs().max() < 1e-9);
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1).into_inner();
        let pro = r * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.7e-3, 0.2e-3, 0.2e-3)) * r.transpose();
        let f = fit_dti(&single(pro, &table)).unwrap();
        assert!((f.tensors[0] - pro).abs().max() < 1e-9);
    }

    #[test]
    fn equal_signals_give_isotropic_tensor() {
        let table = scheme(12);
        let mut data = vec![0.5; 13];
        data[0] = 1.0;
        let v = DwiVolume::new(1, 1, data, table).unwrap();
        let d = fit_dti(&v).unwrap().tensors[0];
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(d[(i, j)].abs() < 1e-12);
                }
            }
        }
        assert!((d[(0, 0)] - d[(1, 1)]).abs() < 1e-12 && (d[(0, 0)] - d[(2, 2)]).abs() < 1e-12);
    }

    #[test]
    fn degenerate_scheme_rejected() {
        let dirs = vec![[1.0, 0.0, 0.0]; 8];
        let table = GradientTable::single_shell(1000.0, dirs).unwrap();
        let v = DwiVolume::new(1, 1, vec![0.5; 8], table).unwrap();
        assert!(matches!(fit_dti(&v), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn scalar_closed_forms() {
        let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.7e-3, 0.2e-3, 0.2e-3));
        let (fa, md, ad) = tensor_scalars(&d).unwrap();
        assert!((fa - 0.8704).abs() < 1e-4, "{fa}");
        assert!((md - 0.7e-3).abs() < 1e-15 && (ad - 1.7e-3).abs() < 1e-15);
        let (fa_s, _, _) = tensor_scalars(&(d * 37.5)).unwrap();
        assert!((fa - fa_s).abs() < 1e-12);
        let (fa_iso, md_iso, ad_iso) = tensor_scalars(&(Matrix3::identity() * 1e-3)).unwrap();
        assert!(fa_iso.abs() < 1e-12 && (md_iso - 1e-3).abs() < 1e-15 && (ad_iso - 1e-3).abs() < 1e-15);
        let rank1 = Matrix3::from_diagonal(&nalgebra::Vector3::new(1e-3, 0.0, 0.0));
        assert!((tensor_scalars(&rank1).unwrap().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_maps_flag_and_normalise() {
        let field = TensorField {
            height: 1,
            width: 3,
            tensors: vec![
                Matrix3::identity() * 1e-3,
                Matrix3::identity() * 2e-3,
                Matrix3::from_diagonal(&nalgebra::Vector3::new(1e-3, -1e-4, 1e-4)),
            ],
        };
        let s = dti_scalars(&field);
        assert_eq!(s.negative, vec![2]);
        assert!(s.invalid.is_empty());
        assert!(s.md_norm.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut bad = field.clone();
        bad.tensors[0][(0, 0)] = f64::NAN;
        let s = dti_scalars(&bad);
        assert_eq!(s.invalid, vec![0]);
        assert!(s.fa[0].is_nan());
    }
}
