use apmg_core::render::{render_frame, RenderConfig};
use apmg_core::{synth_volume, ApmgModel, Camera, ModelConfig, SynthSpec, TransferFunction};
use criterion::{criterion_group, criterion_main, Criterion};

fn frames(c: &mut Criterion) {
    let cam = Camera { width: 64, height: 64, ..Camera::default() };
    let tf = TransferFunction::default();
    let cfg = RenderConfig { samples_per_ray: 128, ..RenderConfig::default() };
    let vol = synth_volume(&SynthSpec::two_blob(64)).unwrap();
    let model = ApmgModel::<f32>::init(&ModelConfig::new(16, 2, [16, 16, 16]), 0).unwrap();
    let mut g = c.benchmark_group("render_64x64");
    g.sample_size(10);
    g.bench_function("volume", |b| b.iter(|| render_frame(&vol, &cam, &tf, &cfg).unwrap()));
    g.bench_function("model", |b| b.iter(|| render_frame(&model, &cam, &tf, &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, frames);
criterion_main!(benches);
