use ibunet_core::model::Mode;
use ibunet_core::{Graph, Model, ModelConfig, Task, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bottleneck_side(cfg: &ModelConfig, size: usize) -> [usize; 4] {
    let model = Model::new(cfg, 0).unwrap();
    let mut g = Graph::<f32>::new();
    let vars = model.bind(&mut g, false);
    let x = g.constant(Tensor4::full([1, cfg.in_channels, size, size], 0.5));
    let tr = model.forward(&mut g, x, &vars, Mode::Eval).unwrap();
    assert_eq!(g.value(tr.output).dims, [1, 1, size, size]);
    g.value(tr.bottleneck).dims
}

#[test]
fn ibunet_bottleneck_is_16_for_256_input() {
    let cfg = ModelConfig::ibunet(Task::Rc);
    let d = bottleneck_side(&cfg, 256);
    assert_eq!((d[2], d[3]), (16, 16));
    assert_eq!(d[1], cfg.base_width << (cfg.num_scales - 1));
}

#[test]
fn baseline_bottleneck_is_32_for_256_input() {
    let d = bottleneck_side(&ModelConfig::baseline(Task::Rc), 256);
    assert_eq!((d[2], d[3]), (32, 32));
}

fn batch_forward(task: Task) {
    let cfg = ModelConfig::ibunet(task);
    let model = Model::new(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor4::<f32>::from_fn([16, task.channels(), 256, 256], |_| rng.gen_range(0.0..1.0));
    let y = model.predict(&x).unwrap();
    assert_eq!(y.dims, [16, 1, 256, 256]);
    assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn rc_forward_16x3x256x256() {
    batch_forward(Task::Rc);
}

#[test]
fn drc_forward_16x9x256x256() {
    batch_forward(Task::Drc);
}

#[test]
fn wrong_channel_count_is_rejected() {
    let model = Model::new(&ModelConfig::ibunet(Task::Drc), 0).unwrap();
    assert!(model.predict(&Tensor4::zeros([1, 3, 32, 32])).is_err());
    assert!(model.predict(&Tensor4::zeros([1, 9, 40, 40])).is_err());
}
