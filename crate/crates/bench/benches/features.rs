use candle_core::{DType, Device};
use criterion::{criterion_group, criterion_main, Criterion};
use sketchfeat::backbone::PromptTokens;
use sketchfeat::pipeline::build_backbone;
use sketchfeat::{BackboneKind, SketchModel, TaskConfig};
use sketchfeat_bench::image_batch;

fn extraction(c: &mut Criterion) {
    let dev = Device::Cpu;
    let config = TaskConfig {
        backbone: BackboneKind::MockTiny,
        d_agg: 32,
        ..TaskConfig::default()
    };
    let bb = build_backbone(&config, DType::F32, &dev).unwrap();
    let model = SketchModel::new(&config, bb.as_ref(), 1, DType::F32, &dev).unwrap();
    let images = image_batch(1, config.image_size, 0);
    let keys = vec!["bench/0".to_string()];
    let inputs = model.prepare(bb.as_ref(), &images, &keys, &[]).unwrap();

    let mut group = c.benchmark_group("extraction");
    group.sample_size(10);
    group.bench_function("prepare", |b| b.iter(|| model.prepare(bb.as_ref(), &images, &keys, &[]).unwrap()));
    group.bench_function("unet_injected", |b| {
        b.iter(|| {
            let mut hook = model.adapters().hook(&inputs.f_v);
            bb.extract_unet_features(&inputs.z_t, config.timestep, &PromptTokens::null(), Some(&mut *hook))
                .unwrap()
        })
    });
    let taps = bb
        .extract_unet_features(&inputs.z_t, config.timestep, &PromptTokens::null(), None)
        .unwrap();
    group.bench_function("aggregate", |b| b.iter(|| model.aggregator().forward(&taps).unwrap()));
    group.finish();
}

criterion_group!(benches, extraction);
criterion_main!(benches);
