//! Layout of a phantom dataset directory.
//!
//! ```text
//! har.bvals  har.bvecs      target gradient table
//! lar.bvals  lar.bvecs      observed subset
//! mask.json                 observed indices into the target table
//! <split>/dwi.f32           noisy HAR signal      [slice, y, x, direction]
//! <split>/truth.f32         noise-free HAR signal
//! <split>/lar.f32           noisy observed directions only
//! <split>/tensors.f32       generating tensors    [slice, y, x, 6]
//! ```
//! Every `.f32` file has a `.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qsr_core::io::{read_gradient_table, read_volumes};
use qsr_core::volume::{AngularMask, DwiVolume, GradientTable};

use crate::error::CliError;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub n_target: usize,
    pub observed: Vec<usize>,
}

impl MaskFile {
    pub fn from_mask(mask: &AngularMask) -> Self {
        Self {
            n_target: mask.len(),
            observed: mask.observed_indices(),
        }
    }

    pub fn to_mask(&self) -> Result<AngularMask, CliError> {
        Ok(AngularMask::from_observed_indices(self.n_target, &self.observed)?)
    }

    pub fn read(path: &Path) -> Result<AngularMask, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let m: MaskFile = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        m.to_mask()
    }
}

pub struct Dataset {
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn table_paths(&self, which: &str) -> (PathBuf, PathBuf) {
        (self.root.join(format!("{which}.bvals")), self.root.join(format!("{which}.bvecs")))
    }

    pub fn mask_path(&self) -> PathBuf {
        self.root.join("mask.json")
    }

    pub fn split_file(&self, split: &str, name: &str) -> PathBuf {
        self.root.join(split).join(format!("{name}.f32"))
    }

    pub fn har_table(&self) -> Result<GradientTable, CliError> {
        let (a, b) = self.table_paths("har");
        Ok(read_gradient_table(&a, &b)?)
    }

    pub fn mask(&self) -> Result<AngularMask, CliError> {
        MaskFile::read(&self.mask_path())
    }

    pub fn volumes(&self, split: &str, name: &str, table: &GradientTable) -> Result<Vec<DwiVolume>, CliError> {
        Ok(read_volumes(&self.split_file(split, name), table)?)
    }
}

/// Places LAR directions at their matching rows of the target table.
/// Directions match up to sign within 1e-6 at equal b-value.
pub fn match_directions(lar: &GradientTable, target: &GradientTable) -> Result<Vec<usize>, CliError> {
    let mut used = vec![false; target.len()];
    let mut rows = Vec::with_capacity(lar.len());
    for (i, (g, b)) in lar.bvecs().iter().zip(lar.bvals()).enumerate() {
        let found = target.bvecs().iter().zip(target.bvals()).enumerate().position(|(j, (h, c))| {
            let same = (0..3).all(|k| (g[k] - h[k]).abs() < 1e-6);
            let flip = (0..3).all(|k| (g[k] + h[k]).abs() < 1e-6);
            !used[j] && (b - c).abs() < 1e-6 && (same || flip)
        });
        let j = found.ok_or_else(|| {
            CliError::Config(format!(
                "input direction {i} ({:?}, b={b}) does not appear in the target gradient table",
                g
            ))
        })?;
        used[j] = true;
        rows.push(j);
    }
    Ok(rows)
}
