//! Fixed sinusoidal encodings. Every function returns row-major `f64` tables.

use crate::error::{Error, Result};
use crate::sphere_sh::Direction;

const MAX_PERIOD: f64 = 10_000.0;

fn frequencies(count: usize) -> impl Iterator<Item = f64> {
    (0..count).map(move |i| MAX_PERIOD.powf(-(i as f64) / count as f64))
}

/// Sinusoidal embedding of integer timesteps, `[t.len(), dim]`:
/// `sin(t·ω_i)` in the first half, `cos(t·ω_i)` in the second.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = frequencies(half).collect();
    let mut out = vec![0.0; t.len() * dim];
    for (row, &step) in out.chunks_mut(dim).zip(t) {
        for (i, &w) in freqs.iter().enumerate() {
            row[i] = (step as f64 * w).sin();
            row[half + i] = (step as f64 * w).cos();
        }
    }
    out
}

/// 2D sin-cos encoding of a `gh × gw` patch grid, `[gh·gw, dim]`. The first
/// half of the channels encode the row, the second half the column.
pub fn spatial_encoding(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let freqs: Vec<f64> = frequencies(quarter).collect();
    let mut out = vec![0.0; gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut out[(y * gw + x) * dim..][..dim];
            for (i, &w) in freqs.iter().enumerate() {
                row[i] = (y as f64 * w).sin();
                row[quarter + i] = (y as f64 * w).cos();
                row[2 * quarter + i] = (x as f64 * w).sin();
                row[3 * quarter + i] = (x as f64 * w).cos();
            }
        }
    }
    out
}

/// Polar angle θ ∈ [0, π] and azimuth φ ∈ (−π, π] of a unit vector.
pub fn spherical_angles(u: &Direction) -> (f64, f64) {
    (u[2].clamp(-1.0, 1.0).acos(), u[1].atan2(u[0]))
}

/// Angular encoding `[dirs.len(), dim]`: for `k = 1..=freqs` the features
/// `sin kθ, cos kθ, sin kφ, cos kφ`; remaining channels are zero, so every row
/// has norm `√(2·freqs)`.
///
/// Antipodal vectors map to (π − θ, φ ± π) and are generally encoded
/// differently.
pub fn angular_encoding(dirs: &[Direction], freqs: usize, dim: usize) -> Result<Vec<f64>> {
    if 4 * freqs > dim {
        return Err(Error::InvalidParameter(format!("{freqs} angular frequencies exceed {dim} channels")));
    }
    let mut out = vec![0.0; dirs.len() * dim];
    for (row, u) in out.chunks_mut(dim).zip(dirs) {
        let (theta, phi) = spherical_angles(u);
        for k in 0..freqs {
            let f = (k + 1) as f64;
            row[4 * k] = (f * theta).sin();
            row[4 * k + 1] = (f * theta).cos();
            row[4 * k + 2] = (f * phi).sin();
            row[4 * k + 3] = (f * phi).cos();
        }
    }
    Ok(out)
}
