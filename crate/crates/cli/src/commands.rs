use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use qsr_core::diffusion::{load_checkpoint, save_checkpoint, train_step, validation_loss, StepRecord, TrainState};
use qsr_core::io::{read_gradient_table, read_volumes, write_gradient_table, write_scalar_maps, write_tensor_fields, write_volumes};
use qsr_core::metrics::{MetricReport, DEFAULT_PEAK};
use qsr_core::model::{ModelConfig, PgDit, SignalNorm};
use qsr_core::phantom::{generate_directions, generate_slice, subsample_directions};
use qsr_core::shps::{grid_search_weights, sample, SamplerConfig};
use qsr_core::volume::{AngularMask, DwiVolume, GradientTable};

use crate::config::ExperimentConfig;
use crate::dataset::{match_directions, Dataset, MaskFile, SPLITS};
use crate::error::CliError;
use crate::provenance::{sha256_file, Manifest};
use crate::report::{self, DirectionRow};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn with_sidecar(p: PathBuf) -> [PathBuf; 2] {
    let side = qsr_core::io::sidecar_path(&p);
    [p, side]
}

fn config_path(dir: &Path, config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let p = dir.join("config.json");
    write_json(&p, config)?;
    Ok(p)
}

pub fn phantom(config: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    create_dir(out)?;
    let s = &config.scheme;
    let table = GradientTable::single_shell(s.bval, generate_directions(s.n_target, s.seed)?)?;
    let mask = subsample_directions(&table, s.n_in)?;
    let observed = mask.observed_indices();
    let lar = table.select(&observed);
    let ds = Dataset::new(out);

    let mut files = vec![config_path(out, config)?];
    for (which, t) in [("har", &table), ("lar", &lar)] {
        let (a, b) = ds.table_paths(which);
        write_gradient_table(t, &a, &b)?;
        files.extend([a, b]);
    }
    write_json(&ds.mask_path(), &MaskFile::from_mask(&mask))?;
    files.push(ds.mask_path());

    for (name, split) in config.dataset.splits() {
        create_dir(&out.join(name))?;
        let slices = (0..split.slices as u64)
            .map(|i| generate_slice(&config.phantom, &table, split.seed, i))
            .collect::<qsr_core::Result<Vec<_>>>()?;
        let noisy: Vec<DwiVolume> = slices.iter().map(|s| s.noisy.clone()).collect();
        let clean: Vec<DwiVolume> = slices.iter().map(|s| s.clean.clone()).collect();
        let lar_vols: Vec<DwiVolume> = noisy.iter().map(|v| v.select_directions(&observed)).collect();
        let tensors: Vec<_> = slices.iter().map(|s| s.tensor_field()).collect();
        let p = ds.split_file(name, "dwi");
        write_volumes(&p, &noisy)?;
        files.extend(with_sidecar(p));
        let p = ds.split_file(name, "truth");
        write_volumes(&p, &clean)?;
        files.extend(with_sidecar(p));
        let p = ds.split_file(name, "lar");
        write_volumes(&p, &lar_vols)?;
        files.extend(with_sidecar(p));
        let p = ds.split_file(name, "tensors");
        write_tensor_fields(&p, &tensors)?;
        files.extend(with_sidecar(p));
    }
    let mut manifest = Manifest::new("phantom", config);
    manifest.extra = serde_json::json!({ "asr_scale": s.scale(), "splits": SPLITS });
    manifest.write(out, &files)?;
    Ok(out.to_path_buf())
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct LossRow {
    iter: usize,
    k: f64,
    t_mean: f64,
    loss: f64,
}

impl From<&StepRecord> for LossRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            iter: r.iter,
            k: r.k,
            t_mean: r.t_mean,
            loss: r.loss,
        }
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct ValRow {
    iter: usize,
    val_loss: f64,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Architecture fields must agree; the signal normalisation may differ.
fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| ModelConfig {
        signal_norm: SignalNorm::default(),
        seed: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

pub fn train(
    config: &ExperimentConfig,
    data: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let ds = Dataset::new(data);
    let table = ds.har_table()?;
    let train_set = ds.volumes("train", "dwi", &table)?;
    let val_set = if config.monitor.val_every > 0 {
        ds.volumes("val", "dwi", &table)?
    } else {
        Vec::new()
    };
    create_dir(out)?;
    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;

    let mut state: TrainState<f32> = match resume {
        Some(p) => {
            let st: TrainState<f32> = load_checkpoint(p)?;
            if !same_architecture(st.model.config(), &config.model) {
                return Err(CliError::Config(format!("checkpoint {} does not match the model config", p.display())));
            }
            st
        }
        None => {
            let mut mc = config.model.clone();
            if config.monitor.fit_signal_norm {
                mc.signal_norm = SignalNorm::fit(train_set.iter().flat_map(|v| v.data().iter().copied()))?;
            }
            TrainState::new(PgDit::new(mc)?, config.train.optimizer.clone(), config.train.seed)?
        }
    };
    let schedule = config.train.schedule.build()?;
    let loss_path = out.join("loss.csv");
    let val_path = out.join("validation.csv");
    let start = state.iteration;
    let mut log: Vec<LossRow> = read_rows::<LossRow>(&loss_path)?.into_iter().filter(|r| r.iter < start).collect();
    let mut val_log: Vec<ValRow> = read_rows::<ValRow>(&val_path)?.into_iter().filter(|r| r.iter <= start).collect();
    let mut best = val_log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let best_path = ck_dir.join("best.qsr");
    let final_path = ck_dir.join("final.qsr");

    let every = config.monitor.val_every;
    let stop = stop_after.map_or(config.train.iterations, |n| n.min(config.train.iterations));
    while state.iteration < stop {
        let rec = match train_step(&mut state, &train_set, &schedule, &config.train) {
            Ok(r) => r,
            Err(e) => {
                write_csv(&loss_path, &log)?;
                let tail: Vec<String> = log
                    .iter()
                    .rev()
                    .take(10)
                    .rev()
                    .map(|r| format!("  iter {} k {:.4} t {:.1} loss {:e}", r.iter, r.k, r.t_mean, r.loss))
                    .collect();
                return Err(CliError::Numeric(format!("{e}\nlast logged steps:\n{}", tail.join("\n"))));
            }
        };
        log.push((&rec).into());
        let done = state.iteration;
        if every > 0 && (done % every == 0 || done == config.train.iterations) {
            let v = validation_loss(&state.model, &val_set, &schedule, config.monitor.val_mask_ratio, config.monitor.val_seed)?;
            eprintln!("iter {done}: train loss {:.5}, validation loss {v:.5}", rec.loss);
            val_log.push(ValRow { iter: done, val_loss: v });
            if v < best {
                best = v;
                save_checkpoint(&best_path, &state)?;
            }
        }
    }
    save_checkpoint(&final_path, &state)?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &state)?;
    }
    write_csv(&loss_path, &log)?;
    write_csv(&val_path, &val_log)?;

    let mut manifest = Manifest::new("train", config);
    for split in ["train", "val"] {
        manifest.input(&ds.split_file(split, "dwi"))?;
    }
    if let Some(p) = resume {
        manifest.input(p)?;
    }
    manifest.extra = serde_json::json!({
        "resumed_from_iteration": resume.map(|_| start),
        "stopped_at_iteration": state.iteration,
        "signal_norm": state.model.config().signal_norm,
        "best_validation_loss": best.is_finite().then_some(best),
    });
    let files = vec![config_path(out, config)?, final_path, best_path, loss_path, val_path];
    manifest.write(out, &files)?;
    Ok(out.to_path_buf())
}

/// Observed target directions filled from the LAR input; the rest are zero
/// and never read by the sampler.
fn embed_lar(lar: &[DwiVolume], rows: &[usize], target: &GradientTable) -> Result<Vec<DwiVolume>, CliError> {
    let n = target.len();
    lar.iter()
        .map(|v| {
            let mut data = vec![0.0; v.n_voxels() * n];
            for px in 0..v.n_voxels() {
                for (i, &r) in rows.iter().enumerate() {
                    data[px * n + r] = v.voxel(px / v.width(), px % v.width())[i];
                }
            }
            Ok(DwiVolume::new(v.height(), v.width(), data, target.clone())?)
        })
        .collect()
}

fn load_model(path: &Path, config: &ExperimentConfig) -> Result<PgDit<f32>, CliError> {
    let state: TrainState<f32> = load_checkpoint(path)?;
    if !same_architecture(state.model.config(), &config.model) {
        return Err(CliError::Config(format!("checkpoint {} does not match the model config", path.display())));
    }
    Ok(state.model)
}

pub struct SuperResolveInputs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub input_table: (&'a PathBuf, &'a PathBuf),
    pub target_table: (&'a PathBuf, &'a PathBuf),
}

pub fn super_resolve(config: &ExperimentConfig, io: &SuperResolveInputs<'_>, out: &Path) -> Result<PathBuf, CliError> {
    let lar_table = read_gradient_table(io.input_table.0, io.input_table.1)?;
    let target = read_gradient_table(io.target_table.0, io.target_table.1)?;
    let rows = match_directions(&lar_table, &target)?;
    let mask = AngularMask::from_observed_indices(target.len(), &rows)?;
    let lar = read_volumes(io.input, &lar_table)?;
    let model = load_model(io.checkpoint, config)?;
    let x_obs = embed_lar(&lar, &rows, &target)?;
    let schedule = config.train.schedule.build()?;
    let result = sample(&model, &x_obs, &mask, &schedule, &config.sampler)?;

    create_dir(out)?;
    let har = out.join("har.f32");
    write_volumes(&har, &result.volumes)?;
    let trace = out.join("trace.csv");
    fs::write(&trace, result.trace.to_csv()).map_err(|e| CliError::Io(format!("{}: {e}", trace.display())))?;
    let mask_path = out.join("mask.json");
    write_json(&mask_path, &MaskFile::from_mask(&mask))?;
    let (bvals, bvecs) = (out.join("har.bvals"), out.join("har.bvecs"));
    write_gradient_table(&target, &bvals, &bvecs)?;

    let mut manifest = Manifest::new("super-resolve", config);
    for p in [io.checkpoint, io.input, io.input_table.0, io.input_table.1, io.target_table.0, io.target_table.1] {
        manifest.input(p)?;
    }
    manifest.extra = serde_json::json!({
        "checkpoint_sha256": sha256_file(io.checkpoint)?,
        "seed": config.sampler.seed,
        "weights": config.sampler.weights,
    });
    let [har, har_side] = with_sidecar(har);
    let files = vec![config_path(out, config)?, har, har_side, trace, mask_path, bvals, bvecs];
    manifest.write(out, &files)?;
    Ok(out.to_path_buf())
}

pub struct EvalInputs<'a> {
    pub truth: &'a Path,
    pub recon: &'a Path,
    pub table: (&'a PathBuf, &'a PathBuf),
    pub mask: Option<&'a Path>,
}

pub fn eval(config: &ExperimentConfig, io: &EvalInputs<'_>, out: &Path) -> Result<PathBuf, CliError> {
    let table = read_gradient_table(io.table.0, io.table.1)?;
    let truth = read_volumes(io.truth, &table)?;
    let recon = read_volumes(io.recon, &table)?;
    if truth.len() != recon.len() || truth[0].dims() != recon[0].dims() {
        return Err(CliError::Config(format!(
            "shape mismatch: ground truth {} x {:?}, reconstruction {} x {:?}",
            truth.len(),
            truth[0].dims(),
            recon.len(),
            recon[0].dims()
        )));
    }
    let directions = match io.mask {
        Some(p) => {
            let m = MaskFile::read(p)?;
            if m.len() != table.len() {
                return Err(CliError::Config(format!("mask has {} directions, table {}", m.len(), table.len())));
            }
            m.missing_indices()
        }
        None => (0..table.len()).collect(),
    };
    let (rep, rows, pred_maps, truth_maps): (_, Vec<DirectionRow>, _, _) = report::evaluate(&recon, &truth, &directions)?;

    create_dir(out)?;
    let json = out.join("report.json");
    write_json(&json, &rep)?;
    let csv = out.join("directions.csv");
    write_csv(&csv, &rows)?;
    let mut files = vec![config_path(out, config)?, json, csv];
    let [h, w, _] = truth[0].dims();
    for (prefix, maps) in [("recon", &pred_maps), ("truth", &truth_maps)] {
        for (name, data) in [("fa", &maps.fa), ("md", &maps.md), ("ad", &maps.ad)] {
            let p = out.join(format!("{prefix}_{name}.f32"));
            write_scalar_maps(&p, truth.len(), h, w, data)?;
            files.extend(with_sidecar(p));
        }
    }
    let mut manifest = Manifest::new("eval", config);
    for p in [io.truth, io.recon, io.table.0.as_path(), io.table.1.as_path()] {
        manifest.input(p)?;
    }
    if let Some(p) = io.mask {
        manifest.input(p)?;
    }
    manifest.write(out, &files)?;
    Ok(out.to_path_buf())
}

#[derive(Serialize)]
struct GridRow {
    lambda_oc: f64,
    lambda_scc: f64,
    psnr: f64,
}

pub fn gridsearch(config: &ExperimentConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let ds = Dataset::new(data);
    let table = ds.har_table()?;
    let mask = ds.mask()?;
    let k = config.gridsearch.slices;
    let noisy = ds.volumes("val", "dwi", &table)?;
    let truth = ds.volumes("val", "truth", &table)?;
    if noisy.len() < k {
        return Err(CliError::Config(format!("gridsearch.slices {k} exceeds the {} validation slices", noisy.len())));
    }
    let model = load_model(checkpoint, config)?;
    let schedule = config.train.schedule.build()?;
    let missing = mask.missing_indices();
    let g = &config.gridsearch;
    let result = grid_search_weights(&g.lambda_oc, &g.lambda_scc, |weights| {
        let cfg = SamplerConfig {
            weights,
            ..config.sampler.clone()
        };
        let out = sample(&model, &noisy[..k], &mask, &schedule, &cfg)?;
        let mut total = 0.0;
        for (p, t) in out.volumes.iter().zip(&truth[..k]) {
            total += MetricReport::compute(p, t, &missing, DEFAULT_PEAK)?.volume_psnr;
        }
        let score = total / k as f64;
        eprintln!("lambda ({}, {}): {score:.3} dB", weights.lambda_oc, weights.lambda_scc);
        Ok(score)
    })?;

    create_dir(out)?;
    let rows: Vec<GridRow> = result
        .scores
        .iter()
        .map(|(w, s)| GridRow {
            lambda_oc: w.lambda_oc,
            lambda_scc: w.lambda_scc,
            psnr: *s,
        })
        .collect();
    let csv = out.join("gridsearch.csv");
    write_csv(&csv, &rows)?;
    let best = out.join("best.json");
    write_json(
        &best,
        &serde_json::json!({
            "weights": result.best,
            "psnr": result.best_score.is_finite().then_some(result.best_score),
        }),
    )?;
    let mut manifest = Manifest::new("gridsearch", config);
    for p in [checkpoint.to_path_buf(), ds.split_file("val", "dwi"), ds.split_file("val", "truth"), ds.mask_path()] {
        manifest.input(&p)?;
    }
    let files = vec![config_path(out, config)?, csv, best];
    manifest.write(out, &files)?;
    Ok(out.to_path_buf())
}
