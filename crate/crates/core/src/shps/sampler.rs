use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{tweedie_coefficient, GuidanceOperators, GuidanceScaling, GuidanceWeights, JacobianMode, SamplerConfig};
use crate::autodiff::{Graph, Scalar, Tensor};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Conditioning, PgDit, SignalNorm};
use crate::phantom::stream_rng;
use crate::sphere_sh::Direction;
use crate::volume::{AngularMask, DwiVolume, GradientTable};

const SAMPLE_SALT: u64 = 0x7368_7073_5f73_6d70;

/// Guidance diagnostics of one reverse step, summed over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub t: usize,
    pub l_oc: f64,
    pub l_scc: f64,
    /// `‖∇_{x_t} L‖`; zero when the term's weight is zero.
    pub grad_norm_oc: f64,
    pub grad_norm_scc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    pub records: Vec<TraceRecord>,
}

impl SamplerTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,t,l_oc,l_scc,grad_norm_oc,grad_norm_scc\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.t, r.l_oc, r.l_scc, r.grad_norm_oc, r.grad_norm_scc);
        }
        s
    }
}

/// Fixed inputs of one sampling run over a batch of slices that share the
/// direction set and the angular mask.
#[derive(Debug, Clone)]
pub struct SamplingContext<'a> {
    schedule: &'a NoiseSchedule,
    config: SamplerConfig,
    ops: GuidanceOperators,
    bvecs: Vec<Direction>,
    table: GradientTable,
    masks: Vec<AngularMask>,
    dims: [usize; 4],
    norm: SignalNorm,
    /// Observed signal as given, for the final hard overwrite.
    raw_obs: Vec<f64>,
    /// Observed signal in the diffusion domain, zero on missing directions.
    x_obs: Vec<f64>,
    c_obs: Vec<f64>,
}

impl<'a> SamplingContext<'a> {
    /// `x_obs` holds every target direction; only the observed ones are read.
    /// `norm` is the model's signal normalisation.
    pub fn new(
        x_obs: &[DwiVolume],
        mask: &AngularMask,
        schedule: &'a NoiseSchedule,
        config: &SamplerConfig,
        norm: SignalNorm,
    ) -> Result<Self> {
        norm.validate()?;
        config.validate()?;
        let first = x_obs
            .first()
            .ok_or_else(|| Error::InvalidParameter("sampling needs at least one slice".into()))?;
        let [h, w, n] = first.dims();
        if let Some(v) = x_obs.iter().find(|v| v.dims() != first.dims() || v.table() != first.table()) {
            return Err(Error::DimensionMismatch(format!(
                "slice of {:?} in a batch of {:?}",
                v.dims(),
                first.dims()
            )));
        }
        if mask.len() != n {
            return Err(Error::DimensionMismatch(format!("mask over {} directions for {n}", mask.len())));
        }
        if mask.n_observed() == 0 {
            return Err(Error::InvalidParameter("no observed directions to condition on".into()));
        }
        if config.steps > schedule.timesteps() {
            return Err(Error::InvalidParameter(format!(
                "{} sampling steps exceed {} timesteps",
                config.steps,
                schedule.timesteps()
            )));
        }
        let bvecs = first.table().bvecs().to_vec();
        let ops = GuidanceOperators::new(&bvecs, mask, config.sh_order, config.lambda_reg)?;
        let mut raw_obs = Vec::with_capacity(x_obs.len() * h * w * n);
        for v in x_obs {
            raw_obs.extend_from_slice(v.data());
        }
        // Missing directions of the observation never enter the model or
        // the losses; zero them so stale values cannot leak.
        let mut obs = raw_obs.clone();
        for (i, x) in obs.iter_mut().enumerate() {
            if mask.is_observed(i % n) {
                if !x.is_finite() {
                    return Err(Error::NonFinite("observed signal".into()));
                }
                *x = norm.forward(*x);
            } else {
                *x = 0.0;
            }
        }
        let c_obs = ops.observed_coeffs(&obs);
        Ok(Self {
            schedule,
            config: config.clone(),
            ops,
            bvecs,
            table: first.table().clone(),
            masks: vec![mask.clone(); x_obs.len()],
            dims: [x_obs.len(), h, w, n],
            norm,
            raw_obs,
            x_obs: obs,
            c_obs,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn operators(&self) -> &GuidanceOperators {
        &self.ops
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.x_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_obs.is_empty()
    }

    fn mask(&self) -> &AngularMask {
        &self.masks[0]
    }
}

/// ε̂, `x_{0|t}`, both losses and (when requested) their gradients with
/// respect to `x_t`.
#[derive(Debug, Clone)]
pub struct GuidanceEval {
    pub eps: Vec<f64>,
    pub x0t: Vec<f64>,
    pub l_oc: f64,
    pub l_scc: f64,
    pub grad_oc: Option<Vec<f64>>,
    pub grad_scc: Option<Vec<f64>>,
}

fn to_tensor<T: Scalar>(shape: &[usize], data: &[f64]) -> Result<Tensor<T>> {
    Tensor::from_f64(shape, data)
}

/// Evaluates the guidance at `(x_t, t)` and differentiates both losses
/// with the context's Jacobian mode.
pub fn guidance_gradients<T: Scalar>(model: &PgDit<T>, ctx: &SamplingContext<'_>, x_t: &[f64], t: usize) -> Result<GuidanceEval> {
    evaluate(model, ctx, x_t, t, true, true)
}

fn evaluate<T: Scalar>(
    model: &PgDit<T>,
    ctx: &SamplingContext<'_>,
    x_t: &[f64],
    t: usize,
    want_oc: bool,
    want_scc: bool,
) -> Result<GuidanceEval> {
    ctx.schedule.check(t)?;
    if x_t.len() != ctx.len() {
        return Err(Error::DimensionMismatch(format!("state of {} values, expected {}", x_t.len(), ctx.len())));
    }
    let [b, _, _, n] = ctx.dims;
    let v = ctx.len() / n;
    let c = ctx.ops.n_coeffs();
    let ts = vec![t; b];
    let cond = Conditioning {
        bvecs: &ctx.bvecs,
        masks: &ctx.masks,
        t: &ts,
    };
    let coef = tweedie_coefficient(ctx.schedule, t, ctx.config.tweedie);
    let inv_sqrt_ab = 1.0 / ctx.schedule.alpha_bar(t).sqrt();
    let wants = want_oc || want_scc;

    if wants && ctx.config.jacobian == JacobianMode::Full {
        let mut g = Graph::<T>::new();
        let vars = model.bind(&mut g, false);
        let xt = g.leaf(to_tensor(&ctx.dims, x_t)?, true);
        let xo = g.constant(to_tensor(&ctx.dims, &ctx.x_obs)?);
        let out = model.forward(&mut g, &vars, xt, xo, &cond)?;
        let ce = g.scale(out.eps, coef);
        let diff = g.sub(xt, ce)?;
        let x0t = g.scale(diff, inv_sqrt_ab);
        let x0t = g.reshape(x0t, &[v, n])?;
        let xo2 = g.reshape(xo, &[v, n])?;
        let co = g.constant(to_tensor(&[v, c], &ctx.c_obs)?);
        let (loc, lscc) = ctx.ops.losses(&mut g, x0t, xo2, co)?;
        let grad = |loss| -> Result<Option<Vec<f64>>> {
            let mut gr = g.backward(loss)?;
            Ok(Some(gr.take(xt).map(|t| t.to_f64()).unwrap_or_else(|| vec![0.0; x_t.len()])))
        };
        let grad_oc = if want_oc { grad(loc)? } else { None };
        let grad_scc = if want_scc { grad(lscc)? } else { None };
        return Ok(GuidanceEval {
            eps: g.value(out.eps).to_f64(),
            x0t: g.value(x0t).to_f64(),
            l_oc: g.value(loc).as_f64_item(),
            l_scc: g.value(lscc).as_f64_item(),
            grad_oc,
            grad_scc,
        });
    }

    let eps = model
        .predict_noise(&to_tensor(&ctx.dims, x_t)?, &to_tensor(&ctx.dims, &ctx.x_obs)?, &cond)?
        .to_f64();
    let x0t: Vec<f64> = x_t.iter().zip(&eps).map(|(&x, &e)| (x - coef * e) * inv_sqrt_ab).collect();
    let mut g = Graph::<f64>::new();
    let x0v = g.leaf(Tensor::new(vec![v, n], x0t.clone())?, wants);
    let xo = g.constant(Tensor::new(vec![v, n], ctx.x_obs.clone())?);
    let co = g.constant(Tensor::new(vec![v, c], ctx.c_obs.clone())?);
    let (loc, lscc) = ctx.ops.losses(&mut g, x0v, xo, co)?;
    // With ε̂ held fixed, ∂x_{0|t}/∂x_t = I/√ᾱ_t.
    let grad = |loss| -> Result<Option<Vec<f64>>> {
        let mut gr = g.backward(loss)?;
        let d = gr.take(x0v).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; x_t.len()]);
        Ok(Some(d.into_iter().map(|x| x * inv_sqrt_ab).collect()))
    };
    let grad_oc = if want_oc { grad(loc)? } else { None };
    let grad_scc = if want_scc { grad(lscc)? } else { None };
    Ok(GuidanceEval {
        l_oc: g.value(loc).item(),
        l_scc: g.value(lscc).item(),
        eps,
        x0t,
        grad_oc,
        grad_scc,
    })
}

trait ItemF64 {
    fn as_f64_item(&self) -> f64;
}

impl<T: Scalar> ItemF64 for Tensor<T> {
    fn as_f64_item(&self) -> f64 {
        self.item().as_f64()
    }
}

fn norm(v: &Option<Vec<f64>>) -> f64 {
    v.as_ref().map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn draw_normals(rngs: &mut [ChaCha8Rng], per_item: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rngs.len() * per_item);
    for rng in rngs {
        out.extend((0..per_item).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    out
}

/// One reverse step `t → t_prev` of guided ancestral sampling on `x_t` in
/// place (`t_prev = 0` is the final step). Each batch item draws its noise
/// from its own stream, and the draws do not depend on the guidance weights.
#[allow(clippy::too_many_arguments)]
pub fn guided_step<T: Scalar>(
    model: &PgDit<T>,
    ctx: &SamplingContext<'_>,
    x_t: &mut [f64],
    step: usize,
    t: usize,
    t_prev: usize,
    rngs: &mut [ChaCha8Rng],
    trace: &SamplerTrace,
) -> Result<TraceRecord> {
    if t_prev >= t {
        return Err(Error::InvalidParameter(format!("reverse step from {t} to {t_prev}")));
    }
    if rngs.len() != ctx.dims[0] {
        return Err(Error::DimensionMismatch(format!("{} noise streams for {} slices", rngs.len(), ctx.dims[0])));
    }
    let wts: GuidanceWeights = ctx.config.weights;
    let eval = evaluate(model, ctx, x_t, t, wts.lambda_oc > 0.0, wts.lambda_scc > 0.0)?;
    let record = TraceRecord {
        step,
        t,
        l_oc: eval.l_oc,
        l_scc: eval.l_scc,
        grad_norm_oc: norm(&eval.grad_oc),
        grad_norm_scc: norm(&eval.grad_scc),
    };
    let diverged = |record: TraceRecord| {
        let mut tr = trace.clone();
        tr.records.push(record);
        Error::SamplerDiverged {
            t,
            step,
            trace: tr.to_csv(),
        }
    };
    if !record.grad_norm_oc.is_finite() || !record.grad_norm_scc.is_finite() || eval.eps.iter().any(|e| !e.is_finite()) {
        return Err(diverged(record));
    }

    let per_item = ctx.len() / ctx.dims[0];
    let z = draw_normals(rngs, per_item);
    let z_obs = draw_normals(rngs, per_item);

    let s = ctx.schedule;
    let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let beta = 1.0 - ab / ab_prev;
    // Posterior mean of q(x_{t'} | x_t, x̂_0) over the respaced step.
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let clip = ctx.config.clip_denoised.map(|[lo, hi]| [ctx.norm.forward(lo), ctx.norm.forward(hi)]);
    let sigma = if t_prev == 0 { 0.0 } else { (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt() };
    let w = match ctx.config.scaling {
        GuidanceScaling::Plain => 1.0,
        GuidanceScaling::SignalScaled => ab,
    };
    let (k_oc, k_scc) = (w * wts.lambda_oc, w * wts.lambda_scc);
    let n = ctx.dims[3];
    let mask = ctx.mask();
    let (sa, sb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    for i in 0..x_t.len() {
        if mask.is_observed(i % n) {
            x_t[i] = if t_prev == 0 { ctx.x_obs[i] } else { sa * ctx.x_obs[i] + sb * z_obs[i] };
            continue;
        }
        let x0 = match clip {
            Some([lo, hi]) => eval.x0t[i].clamp(lo, hi),
            None => eval.x0t[i],
        };
        let mut x = c0 * x0 + ct * x_t[i];
        if t_prev > 0 {
            x += sigma * z[i];
        }
        if let Some(g) = &eval.grad_oc {
            x -= k_oc * g[i];
        }
        if let Some(g) = &eval.grad_scc {
            x -= k_scc * g[i];
        }
        x_t[i] = x;
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(diverged(record));
    }
    Ok(record)
}

/// Super-resolved slices with the guidance trace of the run.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub volumes: Vec<DwiVolume>,
    pub trace: SamplerTrace,
}

/// Guided reverse diffusion from pure noise over the respaced timesteps.
/// Slice `i` of the batch uses noise stream `i` of the configured seed, so
/// results do not depend on how slices are batched.
pub fn sample<T: Scalar>(
    model: &PgDit<T>,
    x_obs: &[DwiVolume],
    mask: &AngularMask,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    let ctx = SamplingContext::new(x_obs, mask, schedule, config, model.config().signal_norm)?;
    sample_with(model, &ctx, 0)
}

/// As [`sample`], numbering noise streams from `first_stream`.
pub fn sample_with<T: Scalar>(model: &PgDit<T>, ctx: &SamplingContext<'_>, first_stream: u64) -> Result<SampleOutput> {
    if model.config().timesteps != ctx.schedule.timesteps() {
        return Err(Error::InvalidParameter(format!(
            "model trained for {} timesteps, schedule has {}",
            model.config().timesteps,
            ctx.schedule.timesteps()
        )));
    }
    let [b, h, w, n] = ctx.dims;
    let mut rngs: Vec<ChaCha8Rng> = (0..b as u64)
        .map(|i| stream_rng(ctx.config.seed ^ SAMPLE_SALT, first_stream + i))
        .collect();
    let mut x = draw_normals(&mut rngs, h * w * n);
    let ts = ctx.schedule.respace(ctx.config.steps)?;
    let mut trace = SamplerTrace::default();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let rec = guided_step(model, ctx, &mut x, i, t, t_prev, &mut rngs, &trace)?;
        trace.records.push(rec);
    }
    let mask = ctx.mask();
    for (i, v) in x.iter_mut().enumerate() {
        *v = if mask.is_observed(i % n) { ctx.raw_obs[i] } else { ctx.norm.inverse(*v) };
    }
    let volumes = x
        .chunks(h * w * n)
        .map(|d| DwiVolume::new(h, w, d.to_vec(), ctx.table.clone()))
        .collect::<Result<_>>()?;
    Ok(SampleOutput { volumes, trace })
}

/// Mean PSNR over slices of the missing directions of a reconstruction of
/// `truth` from its observed directions.
pub fn masked_psnr<T: Scalar>(
    model: &PgDit<T>,
    truth: &[DwiVolume],
    mask: &AngularMask,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<f64> {
    let out = sample(model, truth, mask, schedule, config)?;
    let missing = mask.missing_indices();
    let mut total = 0.0;
    for (pred, gt) in out.volumes.iter().zip(truth) {
        total += metrics::MetricReport::compute(pred, gt, &missing, metrics::DEFAULT_PEAK)?.volume_psnr;
    }
    Ok(total / truth.len() as f64)
}

/// Scores of every grid point and the selected weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: GuidanceWeights,
    pub best_score: f64,
    pub scores: Vec<(GuidanceWeights, f64)>,
}

/// Highest score wins; ties go to the smaller total weight, then the
/// smaller λ_OC. The choice does not depend on the order of `scores`.
pub fn select_best(scores: &[(GuidanceWeights, f64)]) -> Option<(GuidanceWeights, f64)> {
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    scores.iter().copied().reduce(|a, b| {
        let (sa, sb) = (key(a.1), key(b.1));
        if sb > sa {
            return b;
        }
        if sb < sa {
            return a;
        }
        let ta = (a.0.lambda_oc + a.0.lambda_scc, a.0.lambda_oc, a.0.lambda_scc);
        let tb = (b.0.lambda_oc + b.0.lambda_scc, b.0.lambda_oc, b.0.lambda_scc);
        if tb.partial_cmp(&ta) == Some(std::cmp::Ordering::Less) {
            b
        } else {
            a
        }
    })
}

/// Scores every `(λ_OC, λ_SCC)` pair with `score` (higher is better).
/// Divergent runs score `−∞` instead of aborting the search.
pub fn grid_search_weights<F>(grid_oc: &[f64], grid_scc: &[f64], mut score: F) -> Result<GridSearchResult>
where
    F: FnMut(GuidanceWeights) -> Result<f64>,
{
    if grid_oc.is_empty() || grid_scc.is_empty() {
        return Err(Error::InvalidParameter("empty guidance grid".into()));
    }
    let mut scores = Vec::with_capacity(grid_oc.len() * grid_scc.len());
    for &a in grid_oc {
        for &b in grid_scc {
            let wts = GuidanceWeights::new(a, b)?;
            let s = match score(wts) {
                Ok(s) if s.is_nan() => f64::NEG_INFINITY,
                Ok(s) => s,
                Err(Error::SamplerDiverged { .. } | Error::NonFinite(_)) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            scores.push((wts, s));
        }
    }
    let (best, best_score) = select_best(&scores).expect("grid is non-empty");
    Ok(GridSearchResult {
        best,
        best_score,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckOptions};
    use crate::model::{AttentionLayout, ModelConfig};
    use crate::phantom::generate_directions;
    use crate::shps::TweedieForm;

    fn toy_model(seed: u64) -> PgDit<f64> {
        let cfg = ModelConfig {
            depth: 2,
            heads: 2,
            dim: 8,
            patch: 2,
            angular_freqs: 2,
            timesteps: 50,
            attention: AttentionLayout::Axial,
            signal_norm: SignalNorm::identity(),
            seed,
            ..ModelConfig::default()
        };
        let mut m = PgDit::<f64>::new(cfg).unwrap();
        // Wake the zero-initialised head and gates so ε̂ depends on x_t.
        let mut rng = stream_rng(seed, 99);
        for t in m.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.random_range(-1.0..1.0));
        }
        m
    }

    fn toy_slice(n: usize, seed: u64) -> (DwiVolume, AngularMask) {
        let dirs = generate_directions(n, 3).unwrap();
        let table = GradientTable::single_shell(1000.0, dirs).unwrap();
        let mut rng = stream_rng(seed, 0);
        let data = (0..16 * n).map(|_| rng.random_range(0.1..0.9)).collect();
        let v = DwiVolume::new(4, 4, data, table).unwrap();
        let mask = AngularMask::from_observed_indices(n, &[0, 2, 3]).unwrap();
        (v, mask)
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn full_jacobian_matches_finite_differences() {
        let model = toy_model(1);
        let (v, mask) = toy_slice(6, 2);
        let s = schedule();
        let cfg = SamplerConfig {
            steps: 10,
            jacobian: JacobianMode::Full,
            sh_order: Some(0),
            ..SamplerConfig::default()
        };
        let ctx = SamplingContext::new(std::slice::from_ref(&v), &mask, &s, &cfg, SignalNorm::identity()).unwrap();
        let mut rng = stream_rng(3, 0);
        let x: Vec<f64> = (0..ctx.len()).map(|_| rng.sample(StandardNormal)).collect();
        let t = 30;
        let ev = guidance_gradients(&model, &ctx, &x, t).unwrap();
        let analytic = ev.grad_oc.unwrap();
        let h = 1e-6;
        let mut num = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let lp = evaluate(&model, &ctx, &xp, t, false, false).unwrap().l_oc;
            let lm = evaluate(&model, &ctx, &xm, t, false, false).unwrap().l_oc;
            num[i] = (lp - lm) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(scale > 1e-6, "degenerate gradient");
        assert!(diff / scale < 1e-3, "relative error {}", diff / scale);
    }

    #[test]
    fn losses_differentiate_cleanly() {
        // Loss graph alone through the generic checker.
        let dirs = generate_directions(6, 3).unwrap();
        let mask = AngularMask::from_observed_indices(6, &[1, 4]).unwrap();
        let ops = GuidanceOperators::new(&dirs, &mask, Some(0), 0.006).unwrap();
        let mut rng = stream_rng(4, 0);
        let mk = |rng: &mut ChaCha8Rng, n| Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let inputs = [mk(&mut rng, 18), mk(&mut rng, 18), mk(&mut rng, 3)];
        let r = finite_diff_check(
            |g, v| {
                let a = g.reshape(v[0], &[3, 6])?;
                let b = g.reshape(v[1], &[3, 6])?;
                let c = g.reshape(v[2], &[3, 1])?;
                let (l1, l2) = ops.losses(g, a, b, c)?;
                g.add(l1, l2)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.rel_error < 1e-6, "{r:?}");
    }

    fn plain_ddpm(model: &PgDit<f64>, v: &DwiVolume, mask: &AngularMask, s: &NoiseSchedule, steps: usize, seed: u64) -> Vec<f64> {
        let [h, w, n] = v.dims();
        let mut rngs = vec![stream_rng(seed ^ SAMPLE_SALT, 0)];
        let mut x = draw_normals(&mut rngs, h * w * n);
        let obs: Vec<f64> = v.data().iter().enumerate().map(|(i, &x)| if mask.is_observed(i % n) { x } else { 0.0 }).collect();
        let ts = s.respace(steps).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let tp = ts.get(i + 1).copied().unwrap_or(0);
            let cond = Conditioning {
                bvecs: v.table().bvecs(),
                masks: std::slice::from_ref(mask),
                t: &[t],
            };
            let eps = model
                .predict_noise(&Tensor::new(vec![1, h, w, n], x.clone()).unwrap(), &Tensor::new(vec![1, h, w, n], obs.clone()).unwrap(), &cond)
                .unwrap();
            let z = draw_normals(&mut rngs, h * w * n);
            let zo = draw_normals(&mut rngs, h * w * n);
            let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(tp));
            let beta = 1.0 - ab / abp;
            let c0 = abp.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab);
            let inv = 1.0 / ab.sqrt();
            let coef = (1.0 - ab).sqrt();
            let sigma = if tp == 0 { 0.0 } else { (beta * (1.0 - abp) / (1.0 - ab)).sqrt() };
            for j in 0..x.len() {
                x[j] = if mask.is_observed(j % n) {
                    if tp == 0 { obs[j] } else { abp.sqrt() * obs[j] + (1.0 - abp).sqrt() * zo[j] }
                } else {
                    let x0 = ((x[j] - coef * eps.data()[j]) * inv).clamp(0.0, 1.0);
                    let mut y = c0 * x0 + ct * x[j];
                    if tp > 0 {
                        y += sigma * z[j];
                    }
                    y
                };
            }
        }
        x
    }

    #[test]
    fn zero_weights_reduce_to_plain_ancestral_sampling() {
        let model = toy_model(5);
        let (v, mask) = toy_slice(8, 6);
        let s = schedule();
        for jac in [JacobianMode::Full, JacobianMode::Fast] {
            let cfg = SamplerConfig {
                steps: 10,
                jacobian: jac,
                seed: 11,
                ..SamplerConfig::default()
            };
            let out = sample(&model, std::slice::from_ref(&v), &mask, &s, &cfg).unwrap();
            assert_eq!(out.volumes[0].data(), plain_ddpm(&model, &v, &mask, &s, 10, 11).as_slice());
            assert_eq!(out.trace.records.len(), 10);
            assert!(out.trace.records.iter().all(|r| r.grad_norm_oc == 0.0 && r.grad_norm_scc == 0.0));
        }
    }

    #[test]
    fn observed_directions_reproduced_bitwise() {
        let model = toy_model(7);
        let (v, mask) = toy_slice(8, 8);
        let s = schedule();
        for (jac, lo, ls) in [(JacobianMode::Fast, 0.0, 0.0), (JacobianMode::Fast, 0.3, 1.0), (JacobianMode::Full, 1.0, 0.1)] {
            let cfg = SamplerConfig {
                steps: 6,
                jacobian: jac,
                weights: GuidanceWeights::new(lo, ls).unwrap(),
                seed: 3,
                ..SamplerConfig::default()
            };
            let out = sample(&model, std::slice::from_ref(&v), &mask, &s, &cfg).unwrap();
            let n = 8;
            for (i, (&a, &b)) in out.volumes[0].data().iter().zip(v.data()).enumerate() {
                if mask.is_observed(i % n) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn batching_does_not_change_results() {
        let model = toy_model(9);
        let (a, mask) = toy_slice(8, 10);
        let (b, _) = toy_slice(8, 11);
        let s = schedule();
        let cfg = SamplerConfig {
            steps: 4,
            jacobian: JacobianMode::Fast,
            weights: GuidanceWeights::new(0.5, 0.5).unwrap(),
            ..SamplerConfig::default()
        };
        let both = sample(&model, &[a.clone(), b], &mask, &s, &cfg).unwrap();
        let one = sample(&model, &[a], &mask, &s, &cfg).unwrap();
        assert_eq!(both.volumes[0].data(), one.volumes[0].data());
    }

    #[test]
    fn guidance_step_descends_oc_loss() {
        let model = toy_model(12);
        let s = schedule();
        let mut wins = 0;
        let trials = 100;
        for trial in 0..trials {
            let (v, mask) = toy_slice(8, 100 + trial);
            let mk = |lambda| SamplerConfig {
                jacobian: JacobianMode::Fast,
                weights: GuidanceWeights::new(lambda, 0.0).unwrap(),
                scaling: GuidanceScaling::SignalScaled,
                steps: 10,
                sh_order: Some(2),
                ..SamplerConfig::default()
            };
            let guided = mk(0.05);
            let plain = mk(0.0);
            let cg = SamplingContext::new(std::slice::from_ref(&v), &mask, &s, &guided, SignalNorm::identity()).unwrap();
            let cp = SamplingContext::new(std::slice::from_ref(&v), &mask, &s, &plain, SignalNorm::identity()).unwrap();
            let mut rng = stream_rng(trial, 7);
            let x0: Vec<f64> = (0..cg.len()).map(|_| rng.sample(StandardNormal)).collect();
            let (t, tp) = (20, 19);
            let mut xg = x0.clone();
            let mut xp = x0;
            let tr = SamplerTrace::default();
            guided_step(&model, &cg, &mut xg, 0, t, tp, &mut [stream_rng(trial, 1)], &tr).unwrap();
            guided_step(&model, &cp, &mut xp, 0, t, tp, &mut [stream_rng(trial, 1)], &tr).unwrap();
            let lg = evaluate(&model, &cg, &xg, tp, false, false).unwrap().l_oc;
            let lp = evaluate(&model, &cp, &xp, tp, false, false).unwrap().l_oc;
            if lg < lp {
                wins += 1;
            }
        }
        assert!(wins > trials / 2, "guided step lowered L_OC in only {wins}/{trials} trials");
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let model = toy_model(13);
        let (v, mask) = toy_slice(8, 14);
        let s = schedule();
        let cfg = SamplerConfig {
            steps: 8,
            jacobian: JacobianMode::Fast,
            scaling: GuidanceScaling::Plain,
            weights: GuidanceWeights::new(1e300, 0.0).unwrap(),
            ..SamplerConfig::default()
        };
        match sample(&model, std::slice::from_ref(&v), &mask, &s, &cfg) {
            Err(Error::SamplerDiverged { trace, .. }) => assert!(trace.starts_with("step,t,")),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.trace)),
        }
    }

    #[test]
    fn literal_tweedie_changes_estimate() {
        let model = toy_model(15);
        let (v, mask) = toy_slice(6, 16);
        let s = schedule();
        let mut x0 = Vec::new();
        for form in [TweedieForm::Standard, TweedieForm::Literal] {
            let cfg = SamplerConfig {
                steps: 10,
                tweedie: form,
                jacobian: JacobianMode::Fast,
                ..SamplerConfig::default()
            };
            let ctx = SamplingContext::new(std::slice::from_ref(&v), &mask, &s, &cfg, SignalNorm::identity()).unwrap();
            let x = vec![0.2; ctx.len()];
            x0.push(evaluate(&model, &ctx, &x, 25, false, false).unwrap().x0t);
        }
        assert_ne!(x0[0], x0[1]);
    }

    #[test]
    fn grid_search_picks_best_and_breaks_ties_small() {
        let grid = [0.0, 0.1, 0.3, 1.0];
        let r = grid_search_weights(&grid, &grid, |w| Ok(-(w.lambda_oc - 0.3).powi(2) - (w.lambda_scc - 1.0).powi(2))).unwrap();
        assert_eq!(r.best, GuidanceWeights::new(0.3, 1.0).unwrap());
        assert_eq!(r.scores.len(), 16);
        let flat = grid_search_weights(&grid, &grid, |_| Ok(1.0)).unwrap();
        assert_eq!(flat.best, GuidanceWeights::default());
        let mut rev = grid;
        rev.reverse();
        let flat_rev = grid_search_weights(&rev, &rev, |_| Ok(1.0)).unwrap();
        assert_eq!(flat_rev.best, flat.best);
        let div = grid_search_weights(&grid, &[0.0], |w| {
            if w.lambda_oc > 0.2 {
                Err(Error::SamplerDiverged {
                    t: 1,
                    step: 0,
                    trace: String::new(),
                })
            } else {
                Ok(w.lambda_oc)
            }
        })
        .unwrap();
        assert_eq!(div.best.lambda_oc, 0.1);
        assert!(div.scores.iter().any(|s| s.1 == f64::NEG_INFINITY));
        assert!(grid_search_weights(&[], &grid, |_| Ok(0.0)).is_err());
    }
}
