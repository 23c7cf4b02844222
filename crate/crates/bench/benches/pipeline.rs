use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use qsr_core::autodiff::Tensor;
use qsr_core::diffusion::{train_step, OptimizerConfig, TrainConfig, TrainState};
use qsr_core::metrics::{fit_dti, MetricReport};
use qsr_core::model::{AttentionLayout, Conditioning, ModelConfig, PgDit};
use qsr_core::phantom::{generate_directions, generate_slice, subsample_directions, PhantomConfig, PhantomSlice};
use qsr_core::shps::{guided_step, GuidanceWeights, JacobianMode, SamplerConfig, SamplerTrace, SamplingContext};
use qsr_core::sphere_sh::{eval_sh_basis, ShFitter};
use qsr_core::volume::GradientTable;

fn setup() -> (GradientTable, Vec<PhantomSlice>) {
    let table = GradientTable::single_shell(1000.0, generate_directions(60, 1).unwrap()).unwrap();
    let slices = (0..2)
        .map(|i| generate_slice(&PhantomConfig::default(), &table, 1, i).unwrap())
        .collect();
    (table, slices)
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        dim: 64,
        depth: 4,
        heads: 4,
        patch: 8,
        attention: AttentionLayout::Axial,
        ..ModelConfig::default()
    }
}

fn sh_and_metrics(c: &mut Criterion) {
    let (table, slices) = setup();
    let fitter = ShFitter::new(&eval_sh_basis(table.bvecs(), 8).unwrap(), 0.006).unwrap();
    let data = slices[0].clean.data();
    c.bench_function("sh_fit_1024_voxels_order8", |b| b.iter(|| fitter.fit_voxels(black_box(data)).unwrap()));
    let dirs: Vec<usize> = (0..60).collect();
    c.bench_function("metric_report_60_dirs", |b| {
        b.iter(|| MetricReport::compute(&slices[0].noisy, &slices[0].clean, black_box(&dirs), 1.0).unwrap())
    });
    c.bench_function("dti_fit_1024_voxels", |b| b.iter(|| fit_dti(black_box(&slices[0].clean)).unwrap()));
    c.bench_function("phantom_slice_32x32x60", |b| {
        b.iter(|| generate_slice(&PhantomConfig::default(), &table, 9, black_box(0)).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let (table, slices) = setup();
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    let model = PgDit::<f32>::new(desk_model()).unwrap();
    let x = Tensor::<f32>::from_f64(&[1, 32, 32, 60], slices[0].noisy.data()).unwrap();
    let mask = subsample_directions(&table, 6).unwrap();
    let cond = Conditioning {
        bvecs: table.bvecs(),
        masks: std::slice::from_ref(&mask),
        t: &[500],
    };
    g.bench_function("forward_axial_d64", |b| b.iter(|| model.predict_noise(black_box(&x), &x, &cond).unwrap()));

    let data: Vec<_> = slices.iter().map(|s| s.noisy.clone()).collect();
    let tc = TrainConfig {
        optimizer: OptimizerConfig { lr: 1e-3, ..Default::default() },
        ..TrainConfig::default()
    };
    let schedule = tc.schedule.build().unwrap();
    let mut state = TrainState::new(PgDit::<f32>::new(desk_model()).unwrap(), tc.optimizer.clone(), 0).unwrap();
    g.bench_function("train_step_axial_d64", |b| {
        b.iter(|| {
            state.iteration = 0;
            train_step(&mut state, &data, &schedule, &tc).unwrap()
        })
    });

    let inputs = vec![slices[0].noisy.clone()];
    for mode in [JacobianMode::Fast, JacobianMode::Full] {
        let cfg = SamplerConfig {
            steps: 20,
            jacobian: mode,
            weights: GuidanceWeights::new(0.5, 0.5).unwrap(),
            ..SamplerConfig::default()
        };
        let ctx = SamplingContext::new(&inputs, &mask, &schedule, &cfg, model.config().signal_norm).unwrap();
        let x0: Vec<f64> = inputs[0].data().to_vec();
        g.bench_function(format!("guided_step_{mode:?}").to_lowercase(), |b| {
            b.iter(|| {
                let mut x = x0.clone();
                let mut rngs = vec![qsr_core::phantom::stream_rng(0, 0)];
                guided_step(&model, &ctx, &mut x, 0, 500, 450, &mut rngs, &SamplerTrace::default()).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, sh_and_metrics, model);
criterion_main!(benches);
