use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, OptimizerConfig};
use super::{forward_diffuse, ramp, sample_mask_with, NoiseSchedule, ScheduleConfig, K_MAX, K_MIN};
use crate::autodiff::{archive, Graph, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{Conditioning, ModelConfig, PgDit};
use crate::phantom::stream_rng;
use crate::volume::DwiVolume;

const TRAIN_SALT: u64 = 0x7472_6169_6e00_0000;
const VALID_SALT: u64 = 0x7661_6c69_6400_0000;
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub k_min: f64,
    pub k_max: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { k_min: K_MIN, k_max: K_MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub masking: MaskingConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 1,
            schedule: ScheduleConfig::default(),
            masking: MaskingConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        let m = &self.masking;
        if !(0.0 < m.k_min && m.k_min <= m.k_max && m.k_max < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mask ratios need 0 < k_min <= k_max < 1, got [{}, {}]",
                m.k_min, m.k_max
            )));
        }
        self.optimizer.validate()?;
        self.schedule.build().map(|_| ())
    }

    /// Masked ratio used at `iter`.
    pub fn mask_ratio(&self, iter: usize) -> f64 {
        ramp(iter, self.iterations, self.masking.k_min, self.masking.k_max)
    }
}

/// Everything needed to continue training: per-iteration randomness is
/// derived from `(seed, iteration)`, so no generator state is stored.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: PgDit<T>,
    pub optimizer: AdamW<T>,
    pub iteration: usize,
    pub seed: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: PgDit<T>, optimizer: OptimizerConfig, seed: u64) -> Result<Self> {
        let optimizer = AdamW::new(optimizer, model.params())?;
        Ok(Self {
            model,
            optimizer,
            iteration: 0,
            seed,
        })
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub k: f64,
    pub t_mean: f64,
    pub loss: f64,
}

/// Concatenates volumes of identical geometry into `[B, H, W, N]`.
pub fn stack_batch(slices: &[&DwiVolume]) -> Result<Vec<f64>> {
    let first = slices.first().ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
    let mut out = Vec::with_capacity(slices.len() * first.data().len());
    for s in slices {
        if s.dims() != first.dims() {
            return Err(Error::DimensionMismatch(format!("slice {:?} vs {:?}", s.dims(), first.dims())));
        }
        out.extend_from_slice(s.data());
    }
    Ok(out)
}

/// One masked-denoising update. The loss is the mean squared noise error over
/// the masked directions of every sample.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    data: &[DwiVolume],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<StepRecord> {
    let first = data.first().ok_or_else(|| Error::InvalidParameter("empty training set".into()))?;
    let [h, w, n] = first.dims();
    let table = first.table();
    if let Some(bad) = data.iter().find(|d| d.dims() != first.dims() || d.table() != table) {
        return Err(Error::DimensionMismatch(format!(
            "training slices differ in geometry or gradient table ({:?} vs {:?})",
            bad.dims(),
            first.dims()
        )));
    }
    let iter = state.iteration;
    let mut rng = stream_rng(state.seed ^ TRAIN_SALT, iter as u64);
    let k = config.mask_ratio(iter);
    let bsz = config.batch_size;
    let per = h * w * n;

    let mut picks = Vec::with_capacity(bsz);
    let mut pick_idx = Vec::with_capacity(bsz);
    let mut ts = Vec::with_capacity(bsz);
    let mut masks = Vec::with_capacity(bsz);
    let mut noise = Vec::with_capacity(bsz * per);
    for _ in 0..bsz {
        let i = rng.random_range(0..data.len());
        pick_idx.push(i);
        picks.push(&data[i]);
        ts.push(rng.random_range(1..=schedule.timesteps()));
        masks.push(sample_mask_with(k, n, &mut rng)?);
        noise.extend((0..per).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let norm = state.model.config().signal_norm;
    let x0: Vec<f64> = stack_batch(&picks)?.into_iter().map(|v| norm.forward(v)).collect();
    let mut x_t = Vec::with_capacity(x0.len());
    let mut weight = Vec::with_capacity(x0.len());
    for b in 0..bsz {
        let r = b * per..(b + 1) * per;
        x_t.extend(forward_diffuse(schedule, &x0[r.clone()], ts[b], &noise[r])?);
        weight.extend((0..per).map(|i| if masks[b].is_observed(i % n) { 0.0 } else { 1.0 }));
    }
    let count: f64 = weight.iter().sum();

    let shape = [bsz, h, w, n];
    let mut g = Graph::<T>::new();
    let vars = state.model.bind(&mut g, true);
    let xt_v = g.constant(Tensor::from_f64(&shape, &x_t)?);
    let x0_v = g.constant(Tensor::from_f64(&shape, &x0)?);
    let cond = Conditioning {
        bvecs: table.bvecs(),
        masks: &masks,
        t: &ts,
    };
    let out = state.model.forward(&mut g, &vars, xt_v, x0_v, &cond)?;
    let eps_v = g.constant(Tensor::from_f64(&shape, &noise)?);
    let w_v = g.constant(Tensor::from_f64(&shape, &weight)?);
    let diff = g.sub(out.eps, eps_v)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.mul(sq, w_v)?;
    let total = g.sum(sq);
    let loss_v = g.scale(total, 1.0 / count);
    let loss = g.value(loss_v).item().as_f64();
    let t_mean = ts.iter().sum::<usize>() as f64 / bsz as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {loss} at iteration {iter} (k={k:.4}, t={ts:?}, slices={pick_idx:?})"
        )));
    }
    let mut grads = g.backward(loss_v)?;
    let grads: Vec<Tensor<T>> = vars
        .iter()
        .zip(state.model.params().tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    state.optimizer.update(state.model.params_mut(), &grads)?;
    state.iteration += 1;
    Ok(StepRecord { iter, k, t_mean, loss })
}

/// Masked-denoising loss of a frozen model over every slice of `data`.
/// Timesteps, masks and noise come from `seed` and the slice index, so the
/// value is comparable across checkpoints.
pub fn validation_loss<T: Scalar>(
    model: &PgDit<T>,
    data: &[DwiVolume],
    schedule: &NoiseSchedule,
    k: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty validation set".into()));
    }
    let norm = model.config().signal_norm;
    let (mut total, mut count) = (0.0, 0usize);
    for (i, slice) in data.iter().enumerate() {
        let [h, w, n] = slice.dims();
        let mut rng = stream_rng(seed ^ VALID_SALT, i as u64);
        let t = rng.random_range(1..=schedule.timesteps());
        let mask = sample_mask_with(k, n, &mut rng)?;
        let noise: Vec<f64> = (0..h * w * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x0: Vec<f64> = slice.data().iter().map(|&v| norm.forward(v)).collect();
        let x_t = forward_diffuse(schedule, &x0, t, &noise)?;
        let shape = [1, h, w, n];
        let cond = Conditioning {
            bvecs: slice.table().bvecs(),
            masks: std::slice::from_ref(&mask),
            t: &[t],
        };
        let eps = model.predict_noise(&Tensor::from_f64(&shape, &x_t)?, &Tensor::from_f64(&shape, &x0)?, &cond)?;
        for (j, (e, z)) in eps.data().iter().zip(&noise).enumerate() {
            if !mask.is_observed(j % n) {
                total += (e.as_f64() - z).powi(2);
                count += 1;
            }
        }
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("validation loss {loss}")));
    }
    Ok(loss)
}

/// Runs steps until `config.iterations` is reached, calling `on_step` after
/// each one. A resumed state continues from its own iteration count.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    data: &[DwiVolume],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    if schedule.timesteps() != state.model.config().timesteps {
        return Err(Error::InvalidParameter(format!(
            "schedule has {} timesteps, model expects {}",
            schedule.timesteps(),
            state.model.config().timesteps
        )));
    }
    let mut log = Vec::with_capacity(config.iterations.saturating_sub(state.iteration));
    while state.iteration < config.iterations {
        let rec = train_step(state, data, &schedule, config)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    model: ModelConfig,
    optimizer: OptimizerConfig,
    optimizer_step: u64,
    iteration: usize,
    seed: u64,
}

fn to_archive<T: Scalar>(state: &TrainState<T>) -> Result<(ParamStore<T>, serde_json::Value)> {
    let mut store = state.model.params().clone();
    let (m, v) = state.optimizer.moments();
    let names: Vec<String> = state.model.params().names().to_vec();
    for (name, t) in names.iter().zip(m) {
        store.insert(format!("{MOMENT_M}{name}"), t.clone())?;
    }
    for (name, t) in names.iter().zip(v) {
        store.insert(format!("{MOMENT_V}{name}"), t.clone())?;
    }
    let meta = CheckpointMeta {
        kind: "train_state".into(),
        model: state.model.config().clone(),
        optimizer: state.optimizer.config().clone(),
        optimizer_step: state.optimizer.step_count(),
        iteration: state.iteration,
        seed: state.seed,
    };
    Ok((store, serde_json::to_value(meta)?))
}

fn from_archive<T: Scalar>(store: ParamStore<T>, meta: serde_json::Value) -> Result<TrainState<T>> {
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in store.iter() {
        if name.starts_with(MOMENT_M) {
            m.push(t.clone());
        } else if name.starts_with(MOMENT_V) {
            v.push(t.clone());
        } else {
            params.insert(name, t.clone())?;
        }
    }
    let model = PgDit::from_params(meta.model, params)?;
    let optimizer = if m.is_empty() && v.is_empty() {
        AdamW::new(meta.optimizer, model.params())?
    } else {
        AdamW::from_state(meta.optimizer, meta.optimizer_step, m, v)?
    };
    if optimizer.moments().0.len() != model.params().len() {
        return Err(Error::Format("optimizer moments do not match the parameters".into()));
    }
    Ok(TrainState {
        model,
        optimizer,
        iteration: meta.iteration,
        seed: meta.seed,
    })
}

/// Writes parameters, optimizer moments and counters.
pub fn save_checkpoint<T: Scalar>(path: &Path, state: &TrainState<T>) -> Result<()> {
    let (store, meta) = to_archive(state)?;
    archive::save(path, &store, meta)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let (store, meta) = archive::load(path)?;
    from_archive(store, meta)
}

impl<T: Scalar> TrainState<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (store, meta) = to_archive(self)?;
        archive::encode(&store, meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = archive::decode(bytes)?;
        from_archive(store, meta)
    }
}
