//! On-disk formats: flat little-endian f32 arrays with a JSON sidecar, and
//! FSL-style `bvals` / `bvecs` text files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TensorField;
use crate::volume::{DwiVolume, GradientTable};

pub const DTYPE: &str = "f32le";

/// Contents of the `.json` sidecar next to a binary array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayHeader {
    /// Row-major dimensions, slowest first.
    pub dims: Vec<usize>,
    pub dtype: String,
    /// Names of the axes in `dims`.
    pub axes: Vec<String>,
    /// Signal divided by the b0 level.
    pub b0_normalized: bool,
}

impl ArrayHeader {
    pub fn new(dims: &[usize], axes: &[&str], b0_normalized: bool) -> Self {
        Self {
            dims: dims.to_vec(),
            dtype: DTYPE.into(),
            axes: axes.iter().map(|s| s.to_string()).collect(),
            b0_normalized,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sidecar path for a binary array: same name, `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Writes `data` as f32 values to `path` and the header to its sidecar.
pub fn write_array(path: &Path, header: &ArrayHeader, data: &[f64]) -> Result<()> {
    if header.len() != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "header {:?} describes {} values, got {}",
            header.dims,
            header.len(),
            data.len()
        )));
    }
    if header.axes.len() != header.dims.len() {
        return Err(Error::Format(format!("{} axis names for {} dims", header.axes.len(), header.dims.len())));
    }
    let mut bytes = Vec::with_capacity(4 * data.len());
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(header)? + "\n").map_err(|e| io_err(&side, e))
}

/// Reads an array written by [`write_array`].
pub fn read_array(path: &Path) -> Result<(ArrayHeader, Vec<f64>)> {
    let side = sidecar_path(path);
    let header: ArrayHeader = serde_json::from_str(&fs::read_to_string(&side).map_err(|e| io_err(&side, e))?)?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("{}: unsupported dtype {:?}", side.display(), header.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() != 4 * header.len() {
        return Err(Error::Format(format!(
            "{}: {} bytes, header {:?} needs {}",
            path.display(),
            bytes.len(),
            header.dims,
            4 * header.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok((header, data))
}

/// Stacks slices of identical geometry as `[slice, y, x, direction]`.
pub fn write_volumes(path: &Path, volumes: &[DwiVolume]) -> Result<()> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidParameter("no volumes to write".into()))?;
    let [h, w, n] = first.dims();
    let mut data = Vec::with_capacity(volumes.len() * h * w * n);
    for v in volumes {
        if v.dims() != first.dims() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", v.dims(), first.dims())));
        }
        data.extend_from_slice(v.data());
    }
    let header = ArrayHeader::new(&[volumes.len(), h, w, n], &["slice", "y", "x", "direction"], true);
    write_array(path, &header, &data)
}

/// Reads slices written by [`write_volumes`], attaching `table`.
pub fn read_volumes(path: &Path, table: &GradientTable) -> Result<Vec<DwiVolume>> {
    let (header, data) = read_array(path)?;
    let &[s, h, w, n] = header.dims.as_slice() else {
        return Err(Error::Format(format!("{}: expected 4 dims, got {:?}", path.display(), header.dims)));
    };
    if n != table.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}: {n} directions, gradient table has {}",
            path.display(),
            table.len()
        )));
    }
    let per = h * w * n;
    (0..s)
        .map(|i| DwiVolume::new(h, w, data[i * per..(i + 1) * per].to_vec(), table.clone()))
        .collect()
}

/// Tensor order of the six stored components.
pub const TENSOR_COMPONENTS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

/// Stacks tensor fields as `[slice, y, x, 6]` in `Dxx Dyy Dzz Dxy Dxz Dyz` order.
pub fn write_tensor_fields(path: &Path, fields: &[TensorField]) -> Result<()> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidParameter("no tensor fields to write".into()))?;
    let mut data = Vec::new();
    for f in fields {
        if (f.height, f.width) != (first.height, first.width) {
            return Err(Error::DimensionMismatch("tensor fields differ in size".into()));
        }
        for d in &f.tensors {
            data.extend(TENSOR_COMPONENTS.iter().map(|&(i, j)| d[(i, j)]));
        }
    }
    let header = ArrayHeader::new(&[fields.len(), first.height, first.width, 6], &["slice", "y", "x", "component"], false);
    write_array(path, &header, &data)
}

/// Writes one scalar per voxel as `[slice, y, x]`.
pub fn write_scalar_maps(path: &Path, slices: usize, height: usize, width: usize, data: &[f64]) -> Result<()> {
    write_array(path, &ArrayHeader::new(&[slices, height, width], &["slice", "y", "x"], false), data)
}

fn parse_rows(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Format(format!("{}: not a number: {t:?}", path.display())))
                })
                .collect()
        })
        .collect()
}

/// Reads FSL-style files: `bvals` holds one row of N values, `bvecs` three
/// rows of N components.
pub fn read_gradient_table(bvals: &Path, bvecs: &Path) -> Result<GradientTable> {
    let vals = parse_rows(&fs::read_to_string(bvals).map_err(|e| io_err(bvals, e))?, bvals)?;
    let vecs = parse_rows(&fs::read_to_string(bvecs).map_err(|e| io_err(bvecs, e))?, bvecs)?;
    let [vals] = vals.as_slice() else {
        return Err(Error::Format(format!("{}: expected one row, got {}", bvals.display(), vals.len())));
    };
    if vecs.len() != 3 || vecs.iter().any(|r| r.len() != vals.len()) {
        return Err(Error::Format(format!(
            "{}: expected 3 rows of {} values",
            bvecs.display(),
            vals.len()
        )));
    }
    let dirs = (0..vals.len()).map(|i| [vecs[0][i], vecs[1][i], vecs[2][i]]).collect();
    GradientTable::new(vals.clone(), dirs)
}

fn format_row(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

/// Writes `table` as FSL-style `bvals` and `bvecs` files.
pub fn write_gradient_table(table: &GradientTable, bvals: &Path, bvecs: &Path) -> Result<()> {
    fs::write(bvals, format_row(table.bvals().iter().copied()) + "\n").map_err(|e| io_err(bvals, e))?;
    let text: String = (0..3)
        .map(|k| format_row(table.bvecs().iter().map(|g| g[k])) + "\n")
        .collect();
    fs::write(bvecs, text).map_err(|e| io_err(bvecs, e))
}
