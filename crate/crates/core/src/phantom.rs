//! Synthetic ground truth: gradient schemes, multi-tensor signals and noise.
//!
//! Slices are 2D grids of voxels, each a mixture of up to two anisotropic
//! fibre compartments crossing at a spatially varying angle plus a free-water
//! compartment. Every random stream is derived from the master seed and the
//! voxel (or slice) index, so parallel and serial generation agree exactly.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere_sh::Direction;
use crate::volume::{AngularMask, DwiVolume, GradientTable};

/// Deterministic generator for stream `stream` of master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn dot(a: &Direction, b: &Direction) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: Direction) -> Direction {
    let n = dot(&v, &v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Antipodally symmetric Coulomb energy `Σ_{i<j} 1/‖uᵢ−uⱼ‖ + 1/‖uᵢ+uⱼ‖`.
pub fn electrostatic_energy(dirs: &[Direction]) -> f64 {
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            e += pair_energy(&dirs[i], &dirs[j]);
        }
    }
    e
}

fn pair_energy(a: &Direction, b: &Direction) -> f64 {
    let c = dot(a, b);
    // ‖a∓b‖² = 2 ∓ 2c for unit vectors.
    1.0 / (2.0 - 2.0 * c).max(1e-300).sqrt() + 1.0 / (2.0 + 2.0 * c).max(1e-300).sqrt()
}

fn energy_and_gradient(dirs: &[Direction], grad: &mut [Direction]) -> f64 {
    grad.iter_mut().for_each(|g| *g = [0.0; 3]);
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let (a, b) = (dirs[i], dirs[j]);
            let dm = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let dp = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
            let rm = dot(&dm, &dm).sqrt().max(1e-150);
            let rp = dot(&dp, &dp).sqrt().max(1e-150);
            e += 1.0 / rm + 1.0 / rp;
            let (km, kp) = (1.0 / (rm * rm * rm), 1.0 / (rp * rp * rp));
            for k in 0..3 {
                grad[i][k] += -km * dm[k] - kp * dp[k];
                grad[j][k] += km * dm[k] - kp * dp[k];
            }
        }
    }
    e
}

/// Minimises the antipodal electrostatic energy of `n` unit vectors by
/// projected gradient descent from a seeded random start. Output vectors are
/// flipped into the `z ≥ 0` hemisphere.
pub fn generate_directions(n: usize, seed: u64) -> Result<Vec<Direction>> {
    if n == 0 {
        return Err(Error::InvalidParameter("direction count must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut dirs: Vec<Direction> = (0..n)
        .map(|_| {
            let v: Direction = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            normalize(v)
        })
        .collect();
    if n > 1 {
        let mut grad = vec![[0.0; 3]; n];
        let mut trial = dirs.clone();
        let mut energy = energy_and_gradient(&dirs, &mut grad);
        let mut step = 0.1 / n as f64;
        for _ in 0..20_000 {
            let gnorm = grad
                .iter()
                .zip(&dirs)
                .map(|(g, u)| {
                    let r = dot(g, u);
                    let t = [g[0] - r * u[0], g[1] - r * u[1], g[2] - r * u[2]];
                    dot(&t, &t)
                })
                .sum::<f64>()
                .sqrt();
            if gnorm < 1e-12 {
                break;
            }
            for ((t, u), g) in trial.iter_mut().zip(&dirs).zip(&grad) {
                let r = dot(g, u);
                *t = normalize([
                    u[0] - step * (g[0] - r * u[0]) / gnorm,
                    u[1] - step * (g[1] - r * u[1]) / gnorm,
                    u[2] - step * (g[2] - r * u[2]) / gnorm,
                ]);
            }
            let e_trial = electrostatic_energy(&trial);
            if e_trial < energy {
                std::mem::swap(&mut dirs, &mut trial);
                energy = energy_and_gradient(&dirs, &mut grad);
                step *= 1.2;
            } else {
                step *= 0.5;
                if step < 1e-13 {
                    break;
                }
            }
        }
    }
    Ok(dirs
        .into_iter()
        .map(|u| if u[2] < 0.0 { [-u[0], -u[1], -u[2]] } else { u })
        .collect())
}

/// Smallest angle (degrees) between any two axes, treating `u` and `-u` as the
/// same axis.
pub fn min_axis_angle_deg(dirs: &[Direction]) -> f64 {
    let mut best = 90.0f64;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let c = dot(&dirs[i], &dirs[j]).abs().min(1.0);
            best = best.min(c.acos().to_degrees());
        }
    }
    best
}

/// Chooses `n_in` diffusion-weighted directions of `table` that minimise the
/// antipodal electrostatic energy of the subset.
///
/// Every pair of candidates seeds a farthest-point greedy set; each set is
/// then refined by pairwise exchange until no swap lowers the energy, and the
/// lowest-energy refined set wins. b0 rows are never candidates and are always observed.
pub fn subsample_directions(table: &GradientTable, n_in: usize) -> Result<AngularMask> {
    if n_in == 0 {
        return Err(Error::InvalidParameter("n_in must be >= 1".into()));
    }
    let candidates: Vec<usize> = (0..table.len()).filter(|&i| table.bvals()[i] > 0.0).collect();
    if n_in > candidates.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot select {n_in} of {} diffusion-weighted directions",
            candidates.len()
        )));
    }
    let dirs: Vec<Direction> = candidates.iter().map(|&i| table.bvecs()[i]).collect();
    let m = dirs.len();
    let pair: Vec<f64> = (0..m * m)
        .map(|k| {
            let (i, j) = (k / m, k % m);
            if i == j {
                0.0
            } else {
                pair_energy(&dirs[i], &dirs[j])
            }
        })
        .collect();
    let subset_energy = |set: &[usize]| -> f64 {
        let mut e = 0.0;
        for (a, &i) in set.iter().enumerate() {
            for &j in &set[a + 1..] {
                e += pair[i * m + j];
            }
        }
        e
    };

    // |cos| between axes: farthest-point growth picks the candidate whose
    // closest chosen axis is farthest away.
    let axis_cos: Vec<f64> = (0..m * m)
        .map(|k| dot(&dirs[k / m], &dirs[k % m]).abs())
        .collect();
    let starts: Vec<Vec<usize>> = if n_in == 1 {
        (0..m).map(|i| vec![i]).collect()
    } else {
        (0..m).flat_map(|i| ((i + 1)..m).map(move |j| vec![i, j])).collect()
    };

    let mut best: Option<(f64, Vec<usize>)> = None;
    for start in starts {
        let mut chosen = start;
        let mut in_set = vec![false; m];
        chosen.iter().for_each(|&c| in_set[c] = true);
        while chosen.len() < n_in {
            let next = (0..m)
                .filter(|&j| !in_set[j])
                .min_by(|&a, &b| {
                    let ca = chosen.iter().map(|&i| axis_cos[i * m + a]).fold(0.0, f64::max);
                    let cb = chosen.iter().map(|&i| axis_cos[i * m + b]).fold(0.0, f64::max);
                    ca.total_cmp(&cb)
                })
                .expect("candidates remain while chosen < n_in <= m");
            in_set[next] = true;
            chosen.push(next);
        }
        // Pairwise exchange refinement.
        loop {
            let mut improved = false;
            for slot in 0..chosen.len() {
                let i = chosen[slot];
                let others: f64 = chosen.iter().filter(|&&c| c != i).map(|&c| pair[i * m + c]).sum();
                let mut best_swap = None;
                let mut best_gain = 1e-12;
                for j in (0..m).filter(|&j| !in_set[j]) {
                    let with_j: f64 = chosen.iter().filter(|&&c| c != i).map(|&c| pair[j * m + c]).sum();
                    let gain = others - with_j;
                    if gain > best_gain {
                        best_gain = gain;
                        best_swap = Some(j);
                    }
                }
                if let Some(j) = best_swap {
                    in_set[i] = false;
                    in_set[j] = true;
                    chosen[slot] = j;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        chosen.sort_unstable();
        let e = subset_energy(&chosen);
        if best.as_ref().is_none_or(|(be, _)| e < *be - 1e-12) {
            best = Some((e, chosen));
        }
    }
    let (_, chosen) = best.expect("at least one seed evaluated");
    let mut observed = vec![false; table.len()];
    for (i, &b) in table.bvals().iter().enumerate() {
        if b <= 0.0 {
            observed[i] = true;
        }
    }
    for c in chosen {
        observed[candidates[c]] = true;
    }
    Ok(AngularMask::new(observed))
}

/// One Gaussian diffusion compartment.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCompartment {
    pub fraction: f64,
    /// Diffusivity tensor in mm²/s.
    pub tensor: Matrix3<f64>,
}

impl TensorCompartment {
    pub fn isotropic(fraction: f64, d: f64) -> Self {
        Self {
            fraction,
            tensor: Matrix3::identity() * d,
        }
    }

    /// Axially symmetric tensor with principal axis `axis`.
    pub fn prolate(fraction: f64, axis: Direction, d_par: f64, d_perp: f64) -> Self {
        let a = Vector3::from(normalize(axis));
        let tensor = Matrix3::identity() * d_perp + a * a.transpose() * (d_par - d_perp);
        Self { fraction, tensor }
    }

    fn validate(&self) -> Result<()> {
        let t = &self.tensor;
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidParameter(format!(
                "compartment fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        if (t - t.transpose()).abs().max() > 1e-12 * t.abs().max().max(1e-30) {
            return Err(Error::NotPositiveDefinite("tensor is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(*t);
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::NotPositiveDefinite(format!(
                "eigenvalues {:?}",
                eig.eigenvalues.as_slice()
            )));
        }
        Ok(())
    }

    /// `exp(−b gᵀDg)` for this compartment.
    pub fn attenuation(&self, bval: f64, g: &Direction) -> f64 {
        let g = Vector3::from(*g);
        (-bval * (g.transpose() * self.tensor * g)[(0, 0)]).exp()
    }
}

/// `S(b, g) = Σ_k f_k exp(−b gᵀD_k g)` for every voxel (row-major, `height ×
/// width` entries of `voxels`).
pub fn simulate_multitensor(
    voxels: &[Vec<TensorCompartment>],
    height: usize,
    width: usize,
    table: &GradientTable,
) -> Result<DwiVolume> {
    if voxels.len() != height * width {
        return Err(Error::DimensionMismatch(format!(
            "{} voxel compartment lists for a {height}x{width} grid",
            voxels.len()
        )));
    }
    for (v, comps) in voxels.iter().enumerate() {
        let total: f64 = comps.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "voxel {v}: fractions sum to {total}, expected 1"
            )));
        }
        for c in comps {
            c.validate()?;
        }
    }
    let n = table.len();
    let mut data = vec![0.0; voxels.len() * n];
    data.par_chunks_mut(n).zip(voxels.par_iter()).for_each(|(out, comps)| {
        for (k, s) in out.iter_mut().enumerate() {
            let (b, g) = (table.bvals()[k], table.bvecs()[k]);
            *s = comps.iter().map(|c| c.fraction * c.attenuation(b, &g)).sum();
        }
    });
    DwiVolume::new(height, width, data, table.clone())
}

/// Magnitude noise `√((s + n₁)² + n₂²)`, `n₁, n₂ ~ N(0, σ²)`, one RNG stream
/// per voxel.
pub fn add_rician_noise(volume: &DwiVolume, sigma: f64, seed: u64) -> Result<DwiVolume> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(volume.clone());
    }
    let n = volume.n_dirs();
    let mut data = volume.data().to_vec();
    data.par_chunks_mut(n).enumerate().for_each(|(v, chunk)| {
        let mut rng = stream_rng(seed, v as u64);
        for s in chunk {
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            let re = *s + sigma * n1;
            let im = sigma * n2;
            *s = (re * re + im * im).sqrt();
        }
    });
    volume.with_data(data)
}

/// Geometry and tissue parameters of the crossing-fibre slice phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    /// Axial / radial fibre diffusivities (mm²/s).
    pub d_par: f64,
    pub d_perp: f64,
    /// Free-water diffusivity (mm²/s).
    pub d_iso: f64,
    /// Rician noise level relative to b0 = 1.
    pub sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            d_par: 1.7e-3,
            d_perp: 0.3e-3,
            d_iso: 3.0e-3,
            sigma: 0.02,
        }
    }
}

/// Clean signal, noisy signal and generating compartments of one slice.
#[derive(Debug, Clone)]
pub struct PhantomSlice {
    pub clean: DwiVolume,
    pub noisy: DwiVolume,
    pub compartments: Vec<Vec<TensorCompartment>>,
}

impl PhantomSlice {
    /// Fraction-weighted mean tensor of each voxel.
    pub fn tensor_field(&self) -> crate::metrics::TensorField {
        let tensors = self
            .compartments
            .iter()
            .map(|comps| comps.iter().fold(Matrix3::zeros(), |acc, c| acc + c.tensor * c.fraction))
            .collect();
        crate::metrics::TensorField {
            height: self.clean.height(),
            width: self.clean.width(),
            tensors,
        }
    }
}

struct SmoothField {
    terms: Vec<(f64, f64, f64, f64)>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, n_terms: usize) -> Self {
        let terms = (0..n_terms)
            .map(|_| {
                let fx = rng.random_range(-1.5..1.5);
                let fy = rng.random_range(-1.5..1.5);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..1.0);
                (fx, fy, phase, amp)
            })
            .collect();
        Self { terms }
    }

    /// Value in roughly `[-1, 1]` at normalised coordinates `(u, v) ∈ [0,1]²`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let total: f64 = self.terms.iter().map(|t| t.3).sum();
        self.terms
            .iter()
            .map(|&(fx, fy, p, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + p).sin())
            .sum::<f64>()
            / total
    }
}

/// Per-voxel compartments of slice `index` under master seed `seed`.
pub fn slice_compartments(config: &PhantomConfig, seed: u64, index: u64) -> Vec<Vec<TensorCompartment>> {
    let mut rng = stream_rng(seed, index);
    let azimuth = SmoothField::random(&mut rng, 3);
    let elevation = SmoothField::random(&mut rng, 2);
    let crossing = SmoothField::random(&mut rng, 2);
    let second = SmoothField::random(&mut rng, 3);
    let base_azimuth = rng.random_range(0.0..std::f64::consts::PI);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.25),
                rng.random_range(0.4..0.95),
            )
        })
        .collect();

    let (h, w) = (config.height, config.width);
    let mut voxels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let f_iso = blobs
                .iter()
                .map(|&(cx, cy, r, a)| a * (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * r * r)).exp())
                .fold(0.05f64, f64::max)
                .min(0.95);
            let az = base_azimuth + 1.2 * azimuth.at(u, v);
            let el = 0.45 * elevation.at(u, v);
            let axis1 = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let cross = (60.0 + 30.0 * crossing.at(u, v)).to_radians();
            let axis2 = [el.cos() * (az + cross).cos(), el.cos() * (az + cross).sin(), el.sin()];
            let w2 = (0.5 * (second.at(u, v) + 0.2)).clamp(0.0, 0.5);
            let fib = 1.0 - f_iso;
            let mut comps = vec![TensorCompartment::isotropic(f_iso, config.d_iso)];
            comps.push(TensorCompartment::prolate(fib * (1.0 - w2), axis1, config.d_par, config.d_perp));
            if w2 > 0.0 {
                comps.push(TensorCompartment::prolate(fib * w2, axis2, config.d_par, config.d_perp));
            }
            voxels.push(comps);
        }
    }
    voxels
}

/// Generates slice `index` of a phantom set.
pub fn generate_slice(config: &PhantomConfig, table: &GradientTable, seed: u64, index: u64) -> Result<PhantomSlice> {
    let compartments = slice_compartments(config, seed, index);
    let clean = simulate_multitensor(&compartments, config.height, config.width, table)?;
    // Noise streams live in a separate seed space from the geometry streams.
    let noise_seed = seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index + 1);
    let noisy = add_rician_noise(&clean, config.sigma, noise_seed)?;
    Ok(PhantomSlice {
        clean,
        noisy,
        compartments,
    })
}
