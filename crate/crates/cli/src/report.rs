//! Evaluation report written by `qsr eval`.
//!
//! JSON has no infinities, so non-finite numbers are written as the strings
//! `"inf"`, `"-inf"` and `"nan"`.

use serde::{Serialize, Serializer};

use qsr_core::metrics::{self, dti_scalars, fit_dti, MetricReport, Summary, TensorField};
use qsr_core::volume::DwiVolume;

use crate::error::CliError;

fn number<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stat {
    #[serde(serialize_with = "number")]
    pub mean: f64,
    #[serde(serialize_with = "number")]
    pub std: f64,
}

impl From<Summary> for Stat {
    fn from(s: Summary) -> Self {
        Self { mean: s.mean, std: s.std }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SliceScores {
    pub slice: usize,
    #[serde(serialize_with = "number")]
    pub psnr: f64,
    #[serde(serialize_with = "number")]
    pub pearson: f64,
    pub direction_psnr: Stat,
    pub direction_ssim: Stat,
    pub direction_pearson: Stat,
}

#[derive(Debug, Clone, Serialize)]
pub struct MapScores {
    #[serde(serialize_with = "number")]
    pub psnr: f64,
    #[serde(serialize_with = "number")]
    pub ssim: f64,
    #[serde(serialize_with = "number")]
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DtiComparison {
    pub fa: MapScores,
    pub md: MapScores,
    pub ad: MapScores,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub directions: Vec<usize>,
    /// PSNR over every scored voxel-direction pair of every slice.
    #[serde(serialize_with = "number")]
    pub psnr: f64,
    #[serde(serialize_with = "number")]
    pub pearson: f64,
    pub ssim: Stat,
    pub slices: Vec<SliceScores>,
    pub dti: DtiComparison,
}

/// One row per (slice, direction).
#[derive(Debug, Clone, Serialize)]
pub struct DirectionRow {
    pub slice: usize,
    pub direction: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub pearson: f64,
}

/// FA, normalised MD and normalised AD maps of every slice, concatenated.
pub struct Maps {
    pub fa: Vec<f64>,
    pub md: Vec<f64>,
    pub ad: Vec<f64>,
}

pub fn dti_maps(volumes: &[DwiVolume]) -> Result<(Vec<TensorField>, Maps), CliError> {
    let mut fields = Vec::with_capacity(volumes.len());
    let mut maps = Maps { fa: Vec::new(), md: Vec::new(), ad: Vec::new() };
    for v in volumes {
        let f = fit_dti(v)?;
        let s = dti_scalars(&f);
        maps.fa.extend(s.fa);
        maps.md.extend(s.md_norm);
        maps.ad.extend(s.ad_norm);
        fields.push(f);
    }
    Ok((fields, maps))
}

fn compare_maps(pred: &[f64], truth: &[f64], slices: usize, h: usize, w: usize) -> Result<MapScores, CliError> {
    let max_abs_error = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| if a.to_bits() == b.to_bits() { 0.0 } else { (a - b).abs() })
        .fold(0.0f64, |m, e| if e.is_nan() || m.is_nan() { f64::NAN } else { m.max(e) });
    let per = h * w;
    let mut ssim = Vec::with_capacity(slices);
    for s in 0..slices {
        let r = s * per..(s + 1) * per;
        ssim.push(metrics::ssim(&pred[r.clone()], &truth[r], h, w, metrics::DEFAULT_PEAK)?);
    }
    Ok(MapScores {
        psnr: metrics::psnr(pred, truth, metrics::DEFAULT_PEAK)?,
        ssim: ssim.iter().sum::<f64>() / slices as f64,
        max_abs_error,
    })
}

pub fn evaluate(
    pred: &[DwiVolume],
    truth: &[DwiVolume],
    directions: &[usize],
) -> Result<(EvalReport, Vec<DirectionRow>, Maps, Maps), CliError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(CliError::Config(format!(
            "reconstruction has {} slices, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut slices = Vec::new();
    let mut rows = Vec::new();
    let mut ssim_all = Vec::new();
    let (mut pa, mut ta) = (Vec::new(), Vec::new());
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        let r = MetricReport::compute(p, t, directions, metrics::DEFAULT_PEAK)?;
        for (k, &d) in r.directions.iter().enumerate() {
            rows.push(DirectionRow {
                slice: i,
                direction: d,
                psnr: r.psnr[k],
                ssim: r.ssim[k],
                pearson: r.pearson[k],
            });
        }
        ssim_all.extend_from_slice(&r.ssim);
        let n = p.n_dirs();
        for (j, (a, b)) in p.data().iter().zip(t.data()).enumerate() {
            if directions.contains(&(j % n)) {
                pa.push(*a);
                ta.push(*b);
            }
        }
        slices.push(SliceScores {
            slice: i,
            psnr: r.volume_psnr,
            pearson: r.volume_pearson,
            direction_psnr: r.psnr_summary.into(),
            direction_ssim: r.ssim_summary.into(),
            direction_pearson: r.pearson_summary.into(),
        });
    }
    let (_, pm) = dti_maps(pred)?;
    let (_, tm) = dti_maps(truth)?;
    let [h, w, _] = truth[0].dims();
    let dti = DtiComparison {
        fa: compare_maps(&pm.fa, &tm.fa, truth.len(), h, w)?,
        md: compare_maps(&pm.md, &tm.md, truth.len(), h, w)?,
        ad: compare_maps(&pm.ad, &tm.ad, truth.len(), h, w)?,
    };
    let report = EvalReport {
        directions: directions.to_vec(),
        psnr: metrics::psnr(&pa, &ta, metrics::DEFAULT_PEAK)?,
        pearson: metrics::pearson_r(&pa, &ta).unwrap_or(f64::NAN),
        ssim: Summary::of(&ssim_all).into(),
        slices,
        dti,
    };
    Ok((report, rows, pm, tm))
}
