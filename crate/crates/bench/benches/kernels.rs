use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ibunet_core::features::stack_features;
use ibunet_core::metrics::{auc, roc_curve, ssim};
use ibunet_core::model::Mode;
use ibunet_core::synth::{synth_layout, SynthProfile};
use ibunet_core::{Graph, Map2, Model, ModelConfig, Task, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ch, hw) in [(16usize, 64usize), (64, 32), (128, 8)] {
        let x = Tensor4::full([8, ch, hw, hw], 0.3f32);
        let w = Tensor4::full([ch, ch, 3, 3], 0.01f32);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}ch_{hw}px")), &(x, w), |b, (x, w)| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                black_box(g.conv2d(xv, wv, None, 1, 1).unwrap());
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let model = Model::new(&ModelConfig::ibunet(Task::Rc).with_base_width(8), 0).unwrap();
    let x = Tensor4::full([4, 3, 64, 64], 0.3f32);
    let y = Tensor4::full([4, 1, 64, 64], 0.5f32);
    c.bench_function("ibunet_b8_fwd_bwd_4x64px", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let vars = model.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let tv = g.constant(y.clone());
            let tr = model.forward(&mut g, xv, &vars, Mode::Train).unwrap();
            let l = g.mse_loss(tr.output, tv).unwrap();
            g.backward(l).unwrap();
        })
    });
}

fn features(c: &mut Criterion) {
    let layout = synth_layout(1, &SynthProfile::small()).unwrap();
    c.bench_function("drc_feature_stack_small", |b| b.iter(|| black_box(stack_features(Task::Drc, &layout, &layout.grid).unwrap())));
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Map2::from_vec(256, 256, (0..65536).map(|_| rng.gen_range(0.0..1.0)).collect());
    let b2 = Map2::from_vec(256, 256, (0..65536).map(|_| rng.gen_range(0.0..1.0)).collect());
    c.bench_function("ssim_256", |b| b.iter(|| black_box(ssim(&a, &b2).unwrap())));
    let labels: Vec<bool> = (0..65536).map(|_| rng.gen_bool(0.1)).collect();
    let scores: Vec<f64> = a.data.clone();
    c.bench_function("roc_auc_65536", |b| b.iter(|| black_box(auc(&roc_curve(&scores, &labels).unwrap()))));
}

criterion_group!(benches, conv, train_step, features, metrics);
criterion_main!(benches);
