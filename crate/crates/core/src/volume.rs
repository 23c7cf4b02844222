//! Shared data containers: gradient tables, DWI slices and angular masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere_sh::Direction;

const BVEC_TOL: f64 = 1e-6;

/// b-values (s/mm²) and unit gradient directions of an acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTable {
    bvals: Vec<f64>,
    bvecs: Vec<Direction>,
}

impl GradientTable {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<Direction>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} b-values but {} b-vectors",
                bvals.len(),
                bvecs.len()
            )));
        }
        for (i, (&b, v)) in bvals.iter().zip(&bvecs).enumerate() {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::InvalidParameter(format!("b-value {i} is {b}")));
            }
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if b > 0.0 && (norm - 1.0).abs() > BVEC_TOL {
                return Err(Error::NonUnitDirection { index: i, norm });
            }
        }
        Ok(Self { bvals, bvecs })
    }

    /// Single shell at `bval` over the given unit directions.
    pub fn single_shell(bval: f64, dirs: Vec<Direction>) -> Result<Self> {
        Self::new(vec![bval; dirs.len()], dirs)
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[Direction] {
        &self.bvecs
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    /// Restricts the table to the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            bvals: rows.iter().map(|&r| self.bvals[r]).collect(),
            bvecs: rows.iter().map(|&r| self.bvecs[r]).collect(),
        }
    }
}

/// A 2D DWI slice `[H, W, N]`, direction index fastest, signal normalised so
/// that b0 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    height: usize,
    width: usize,
    data: Vec<f64>,
    table: GradientTable,
}

impl DwiVolume {
    pub fn new(height: usize, width: usize, data: Vec<f64>, table: GradientTable) -> Result<Self> {
        let n = table.len();
        if data.len() != height * width * n {
            return Err(Error::DimensionMismatch(format!(
                "volume data has {} values, expected {height}x{width}x{n}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            data,
            table,
        })
    }

    pub fn zeros(height: usize, width: usize, table: GradientTable) -> Self {
        let data = vec![0.0; height * width * table.len()];
        Self {
            height,
            width,
            data,
            table,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_dirs(&self) -> usize {
        self.table.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.n_dirs()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn table(&self) -> &GradientTable {
        &self.table
    }

    /// Signal profile of one voxel (all directions).
    pub fn voxel(&self, y: usize, x: usize) -> &[f64] {
        let n = self.n_dirs();
        let start = (y * self.width + x) * n;
        &self.data[start..start + n]
    }

    /// `[H, W]` image of one direction.
    pub fn direction_image(&self, dir: usize) -> Vec<f64> {
        let n = self.n_dirs();
        self.data.iter().skip(dir).step_by(n).copied().collect()
    }

    /// Same geometry with a subset of directions.
    pub fn select_directions(&self, rows: &[usize]) -> Self {
        let n = self.n_dirs();
        let mut data = Vec::with_capacity(self.n_voxels() * rows.len());
        for v in 0..self.n_voxels() {
            data.extend(rows.iter().map(|&r| self.data[v * n + r]));
        }
        Self {
            height: self.height,
            width: self.width,
            data,
            table: self.table.select(rows),
        }
    }

    /// Same geometry and table with replaced values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, data, self.table.clone())
    }
}

/// Per-direction observed/missing indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngularMask {
    observed: Vec<bool>,
}

impl AngularMask {
    pub fn new(observed: Vec<bool>) -> Self {
        Self { observed }
    }

    pub fn all_observed(n: usize) -> Self {
        Self::new(vec![true; n])
    }

    pub fn all_missing(n: usize) -> Self {
        Self::new(vec![false; n])
    }

    /// Mask with exactly the listed directions observed.
    pub fn from_observed_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut observed = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidParameter(format!("direction index {i} >= {n}")));
            }
            observed[i] = true;
        }
        Ok(Self { observed })
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn is_observed(&self, dir: usize) -> bool {
        self.observed[dir]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed[i]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.observed[i]).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn n_masked(&self) -> usize {
        self.len() - self.n_observed()
    }

    /// Masked ratio `k = #masked / N`.
    pub fn ratio(&self) -> f64 {
        self.n_masked() as f64 / self.len() as f64
    }

    /// Permutes directions: output position `i` takes input direction `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::new(perm.iter().map(|&p| self.observed[p]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_validation() {
        assert!(GradientTable::new(vec![1000.0], vec![[1.0, 0.0, 0.0]]).is_ok());
        assert!(GradientTable::new(vec![0.0], vec![[0.0, 0.0, 0.0]]).is_ok());
        assert!(GradientTable::new(vec![1000.0], vec![[1.0, 1.0, 0.0]]).is_err());
        assert!(GradientTable::new(vec![-1.0], vec![[1.0, 0.0, 0.0]]).is_err());
        assert!(GradientTable::new(vec![1000.0, 0.0], vec![[1.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn volume_accessors() {
        let table = GradientTable::single_shell(1000.0, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let vol = DwiVolume::new(2, 3, data, table).unwrap();
        assert_eq!(vol.voxel(1, 2), &[10.0, 11.0]);
        assert_eq!(vol.direction_image(1), vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0]);
        let sub = vol.select_directions(&[1]);
        assert_eq!(sub.data(), &[1.0, 3.0, 5.0, 7.0, 9.0, 11.0]);
        assert!(vol.with_data(vec![0.0; 5]).is_err());
    }

    #[test]
    fn mask_counts() {
        let m = AngularMask::from_observed_indices(5, &[0, 3]).unwrap();
        assert_eq!(m.n_observed(), 2);
        assert_eq!(m.missing_indices(), vec![1, 2, 4]);
        assert!((m.ratio() - 0.6).abs() < 1e-15);
        assert!(AngularMask::from_observed_indices(2, &[2]).is_err());
    }
}
