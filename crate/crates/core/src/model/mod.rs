//! ibUNet and the RouteNet-style baseline as layer tables interpreted over a
//! [`Graph`].

mod config;

pub use config::{default_norm, Activation, Arch, ModelConfig, NormKind, SkipFusion, UpsampleKind};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::{ParamError, ParamStore};
use crate::tensor::gradcheck::{self, CheckReport, Probes};
use crate::tensor::{BatchStats, Graph, NormMode, Scalar, Tensor4, TensorError, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f32 = 0.25;

/// Kernel sizes of the Inception convolution branches (padding `k / 2`).
pub const INCEPTION_CONV_KERNELS: [usize; 4] = [1, 3, 5, 7];
/// Window sizes of the Inception stride-1 max-pool branches.
pub const INCEPTION_POOL_KERNELS: [usize; 2] = [3, 5];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("input shape mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// conv3x3 (pad 1) -> norm -> activation.
    ConvBlock { cin: usize, cout: usize },
    /// Stashes its input as skip `stage`, then max-pools 2x2 stride 2.
    Pool { stage: usize },
    Inception { channels: usize },
    Upsample { kind: UpsampleKind, cin: usize, cout: usize },
    /// Fuses the running activation with skip `stage`.
    Fuse { stage: usize, mode: SkipFusion },
    /// conv1x1 to one channel, then sigmoid.
    Head { cin: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<String>,
    pub out_channels: usize,
    /// log2 of the spatial downsampling factor after this layer.
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamShape {
    pub shape: Vec<usize>,
    pub learnable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub shapes: IndexMap<String, ParamShape>,
    /// Index of the layer whose output is the bottleneck activation.
    pub bottleneck: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InceptionBlockSpec {
    pub channels: usize,
    pub prefix: String,
    pub norm: NormKind,
    pub activation: Activation,
}

impl InceptionBlockSpec {
    pub fn branch_weight(&self, k: usize) -> String {
        format!("{}.conv{k}x{k}.weight", self.prefix)
    }

    pub fn branch_bias(&self, k: usize) -> String {
        format!("{}.conv{k}x{k}.bias", self.prefix)
    }
}

struct SpecBuilder {
    norm: NormKind,
    activation: Activation,
    layers: Vec<Layer>,
    shapes: IndexMap<String, ParamShape>,
}

impl SpecBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, learnable: bool) -> String {
        let prev = self.shapes.insert(name.clone(), ParamShape { shape, learnable });
        assert!(prev.is_none(), "duplicate parameter {name}");
        name
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<String> {
        vec![
            self.param(format!("{prefix}.weight"), vec![cout, cin, k, k], true),
            self.param(format!("{prefix}.bias"), vec![cout], true),
        ]
    }

    fn norm_act(&mut self, prefix: &str, c: usize) -> Vec<String> {
        let mut names = vec![
            self.param(format!("{prefix}.norm.gamma"), vec![c], true),
            self.param(format!("{prefix}.norm.beta"), vec![c], true),
        ];
        if self.norm == NormKind::Batch {
            names.push(self.param(format!("{prefix}.norm.running_mean"), vec![c], false));
            names.push(self.param(format!("{prefix}.norm.running_var"), vec![c], false));
        }
        if self.activation == Activation::Prelu {
            names.push(self.param(format!("{prefix}.act.slope"), vec![c], true));
        }
        names
    }

    fn push(&mut self, name: String, kind: LayerKind, params: Vec<String>, out_channels: usize, level: usize) {
        self.layers.push(Layer { name, kind, params, out_channels, level });
    }

    fn conv_block(&mut self, name: String, cin: usize, cout: usize, level: usize) {
        let mut p = self.conv(&format!("{name}.conv"), cin, cout, 3);
        p.extend(self.norm_act(&name, cout));
        self.push(name, LayerKind::ConvBlock { cin, cout }, p, cout, level);
    }

    fn inception(&mut self, name: String, c: usize, level: usize) {
        let mut p = Vec::new();
        for k in INCEPTION_CONV_KERNELS {
            p.extend(self.conv(&format!("{name}.conv{k}x{k}"), c, c, k));
        }
        p.extend(self.norm_act(&name, c));
        self.push(name, LayerKind::Inception { channels: c }, p, c, level);
    }
}

fn build_spec(config: &ModelConfig) -> Result<ModelSpec, ModelError> {
    config.validate()?;
    let s = config.num_scales;
    let b = config.base_width;
    let widths: Vec<usize> = (0..s).map(|k| b << k).collect();
    let mut sb = SpecBuilder { norm: config.norm, activation: config.activation, layers: Vec::new(), shapes: IndexMap::new() };

    let mut c = config.in_channels;
    for (k, &w) in widths.iter().enumerate() {
        sb.conv_block(format!("enc{k}.0"), c, w, k);
        sb.conv_block(format!("enc{k}.1"), w, w, k);
        sb.push(format!("pool{k}"), LayerKind::Pool { stage: k }, Vec::new(), w, k + 1);
        c = w;
    }

    match config.arch {
        Arch::Ibunet => sb.inception("neck".into(), c, s),
        Arch::Baseline => {
            sb.conv_block("neck.0".into(), c, 2 * c, s);
            sb.conv_block("neck.1".into(), 2 * c, 2 * c, s);
            c *= 2;
        }
    }
    let bottleneck = sb.layers.len() - 1;

    for k in (0..s).rev() {
        let w = widths[k];
        let up_out = match config.upsample {
            UpsampleKind::Bilinear => c,
            UpsampleKind::TransposedConv => w,
        };
        let name = format!("up{k}");
        let p = match config.upsample {
            UpsampleKind::Bilinear => Vec::new(),
            UpsampleKind::TransposedConv => vec![
                sb.param(format!("{name}.weight"), vec![c, up_out, 2, 2], true),
                sb.param(format!("{name}.bias"), vec![up_out], true),
            ],
        };
        sb.push(name, LayerKind::Upsample { kind: config.upsample, cin: c, cout: up_out }, p, up_out, k);
        let fused = match config.skip_fusion {
            SkipFusion::Concat => up_out + w,
            SkipFusion::Add => {
                if up_out != w {
                    return Err(ModelError::ConfigInvalid(format!("add fusion at stage {k}: {up_out} vs {w} channels")));
                }
                w
            }
        };
        sb.push(format!("fuse{k}"), LayerKind::Fuse { stage: k, mode: config.skip_fusion }, Vec::new(), fused, k);
        let next = if k == 0 { w } else { widths[k - 1] };
        sb.conv_block(format!("dec{k}.0"), fused, w, k);
        sb.conv_block(format!("dec{k}.1"), w, next, k);
        c = next;
    }
    let p = sb.conv("head", c, 1, 1);
    sb.push("head".into(), LayerKind::Head { cin: c }, p, 1, 0);
    Ok(ModelSpec { config: *config, layers: sb.layers, shapes: sb.shapes, bottleneck })
}

/// Fan-in-scaled uniform conv weights, zero biases, slopes 0.25, unit gamma,
/// zero beta, running mean 0 and variance 1.
pub fn init_params(shapes: &IndexMap<String, ParamShape>, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, ps) in shapes {
        let n: usize = ps.shape.iter().product();
        let fill = |v: f32| vec![v; n];
        let data = if name.ends_with(".weight") {
            let fan_in = ps.shape[1] * ps.shape[2] * ps.shape[3];
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
        } else if name.ends_with(".slope") {
            fill(PRELU_INIT)
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            fill(1.0)
        } else {
            fill(0.0)
        };
        store.insert(name.clone(), ps.shape.clone(), data, ps.learnable).expect("unique names");
    }
    store
}

pub fn param_count(spec: &ModelSpec) -> usize {
    spec.shapes.values().filter(|p| p.learnable).map(|p| p.shape.iter().product::<usize>()).sum()
}

/// Learnable element count per layer, in layer order.
pub fn layer_param_counts(spec: &ModelSpec) -> Vec<(String, usize)> {
    spec.layers
        .iter()
        .map(|l| {
            let n = l.params.iter().map(|p| &spec.shapes[p]).filter(|p| p.learnable).map(|p| p.shape.iter().product::<usize>()).sum();
            (l.name.clone(), n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

pub fn build_ibunet(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    if config.arch != Arch::Ibunet {
        return Err(ModelError::ConfigInvalid("build_ibunet needs model = ibunet".into()));
    }
    Model::new(config, seed)
}

pub fn build_routenet_baseline(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    if config.arch != Arch::Baseline {
        return Err(ModelError::ConfigInvalid("build_routenet_baseline needs model = baseline".into()));
    }
    Model::new(config, seed)
}

/// Standalone Inception block at width `c` with parameters under `prefix`.
pub fn build_inception_block(c: usize, norm: NormKind, activation: Activation, seed: u64) -> (InceptionBlockSpec, ParamStore) {
    assert!(c >= 1, "inception block needs at least one channel");
    let prefix = "inception".to_string();
    let mut sb = SpecBuilder { norm, activation, layers: Vec::new(), shapes: IndexMap::new() };
    sb.inception(prefix.clone(), c, 0);
    let params = init_params(&sb.shapes, seed);
    (InceptionBlockSpec { channels: c, prefix, norm, activation }, params)
}

/// Named graph handles for learnable parameters.
pub type ParamVars = IndexMap<String, Var>;

/// Places every learnable parameter on the graph as a leaf.
pub fn bind_params<T: Scalar>(params: &ParamStore, g: &mut Graph<T>, track: bool) -> ParamVars {
    params.learnable().map(|p| (p.name.clone(), g.leaf(p.tensor::<T>(), track))).collect()
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub output: Var,
    pub bottleneck: Var,
    /// Six-branch sum inside the Inception block, before normalization.
    pub inception_sum: Option<Var>,
    /// Batch statistics per batchnorm prefix, in train mode.
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

struct Ctx<'a, T> {
    params: &'a ParamStore,
    vars: &'a ParamVars,
    norm: NormKind,
    activation: Activation,
    mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::Param(ParamError::Missing(name.to_string())))
    }

    fn running(&self, name: &str) -> Result<Vec<T>, ModelError> {
        Ok(self.params.require(name)?.data.iter().map(|&v| T::from_f64(v as f64)).collect())
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, prefix: &str, pad: usize) -> Result<Var, ModelError> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        Ok(g.conv2d(x, w, Some(b), 1, pad)?)
    }

    fn norm_act(&mut self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let gamma = self.var(&format!("{prefix}.norm.gamma"))?;
        let beta = self.var(&format!("{prefix}.norm.beta"))?;
        let eps = T::from_f64(NORM_EPS);
        let y = match (self.norm, self.mode) {
            (NormKind::Instance, _) => g.instancenorm(x, gamma, beta, eps)?,
            (NormKind::Batch, Mode::Train) => {
                let (y, stats) = g.batchnorm(x, gamma, beta, eps, NormMode::Train)?;
                self.stats.push((prefix.to_string(), stats.expect("train mode yields stats")));
                y
            }
            (NormKind::Batch, Mode::Eval) => {
                let rm = self.running(&format!("{prefix}.norm.running_mean"))?;
                let rv = self.running(&format!("{prefix}.norm.running_var"))?;
                g.batchnorm(x, gamma, beta, eps, NormMode::Eval { running_mean: &rm, running_var: &rv })?.0
            }
        };
        Ok(match self.activation {
            Activation::Prelu => {
                let a = self.var(&format!("{prefix}.act.slope"))?;
                g.prelu(y, a)?
            }
            Activation::Relu => g.relu(y)?,
        })
    }

    /// Returns `(pre-norm six-branch sum, block output)`.
    fn inception(&mut self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<(Var, Var), ModelError> {
        let mut sum: Option<Var> = None;
        let mut acc = |g: &mut Graph<T>, v: Var| -> Result<(), ModelError> {
            sum = Some(match sum {
                None => v,
                Some(s) => g.add(s, v)?,
            });
            Ok(())
        };
        for k in INCEPTION_CONV_KERNELS {
            let y = self.conv(g, x, &format!("{prefix}.conv{k}x{k}"), k / 2)?;
            acc(g, y)?;
        }
        for k in INCEPTION_POOL_KERNELS {
            let y = g.maxpool2d(x, k, 1, k / 2)?;
            acc(g, y)?;
        }
        let sum = sum.expect("six branches");
        let out = self.norm_act(g, sum, prefix)?;
        Ok((sum, out))
    }
}

/// Runs the standalone Inception block; returns `(pre-norm sum, output)`.
pub fn inception_forward<T: Scalar>(
    block: &InceptionBlockSpec,
    params: &ParamStore,
    g: &mut Graph<T>,
    x: Var,
    vars: &ParamVars,
    mode: Mode,
) -> Result<(Var, Var), ModelError> {
    let c = g.value(x).c();
    if c != block.channels {
        return Err(ModelError::DimMismatch(format!("inception expects {} channels, got {c}", block.channels)));
    }
    let mut ctx = Ctx { params, vars, norm: block.norm, activation: block.activation, mode, stats: Vec::new() };
    ctx.inception(g, x, &block.prefix)
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
        let spec = build_spec(config)?;
        let params = init_params(&spec.shapes, seed);
        Ok(Model { spec, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.config
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.spec)
    }

    pub fn check_input(&self, dims: [usize; 4]) -> Result<(), ModelError> {
        let cfg = &self.spec.config;
        let d = cfg.divisor();
        if dims[1] != cfg.in_channels {
            return Err(ModelError::DimMismatch(format!("expected {} input channels, got {}", cfg.in_channels, dims[1])));
        }
        if dims[0] == 0 || dims[2] == 0 || dims[3] == 0 || dims[2] % d != 0 || dims[3] % d != 0 {
            return Err(ModelError::DimMismatch(format!("spatial size {}x{} must be a positive multiple of {d}", dims[2], dims[3])));
        }
        Ok(())
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, track: bool) -> ParamVars {
        bind_params(&self.params, g, track)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, vars: &ParamVars, mode: Mode) -> Result<ForwardTrace<T>, ModelError> {
        self.check_input(g.value(x).dims)?;
        let cfg = &self.spec.config;
        let mut ctx = Ctx { params: &self.params, vars, norm: cfg.norm, activation: cfg.activation, mode, stats: Vec::new() };
        let mut skips: Vec<Option<Var>> = vec![None; cfg.num_scales];
        let mut cur = x;
        let mut bottleneck = None;
        let mut inception_sum = None;
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            let name = layer.name.as_str();
            cur = match &layer.kind {
                LayerKind::ConvBlock { .. } => {
                    let y = ctx.conv(g, cur, &format!("{name}.conv"), 1)?;
                    ctx.norm_act(g, y, name)?
                }
                LayerKind::Pool { stage } => {
                    skips[*stage] = Some(cur);
                    g.maxpool2d(cur, 2, 2, 0)?
                }
                LayerKind::Inception { .. } => {
                    let (sum, out) = ctx.inception(g, cur, name)?;
                    inception_sum = Some(sum);
                    out
                }
                LayerKind::Upsample { kind, .. } => match kind {
                    UpsampleKind::Bilinear => g.upsample_bilinear2x(cur)?,
                    UpsampleKind::TransposedConv => {
                        let w = ctx.var(&format!("{name}.weight"))?;
                        let b = ctx.var(&format!("{name}.bias"))?;
                        g.conv_transpose2d(cur, w, Some(b), 2)?
                    }
                },
                LayerKind::Fuse { stage, mode } => {
                    let skip = skips[*stage].expect("encoder stage precedes decoder stage");
                    match mode {
                        SkipFusion::Concat => g.concat_channels(cur, skip)?,
                        SkipFusion::Add => g.add(cur, skip)?,
                    }
                }
                LayerKind::Head { .. } => {
                    let y = ctx.conv(g, cur, name, 0)?;
                    g.sigmoid(y)?
                }
            };
            if idx == self.spec.bottleneck {
                bottleneck = Some(cur);
            }
        }
        Ok(ForwardTrace {
            output: cur,
            bottleneck: bottleneck.expect("bottleneck layer present"),
            inception_sum,
            batch_stats: ctx.stats,
        })
    }

    /// Eval-mode inference, one sample at a time.
    pub fn predict(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>, ModelError> {
        self.check_input(x.dims)?;
        let mut outs = Vec::with_capacity(x.n());
        for s in 0..x.n() {
            let mut g = Graph::<f32>::new();
            let vars = self.bind(&mut g, false);
            let xv = g.constant(x.batch_slice(s, 1));
            let tr = self.forward(&mut g, xv, &vars, Mode::Eval)?;
            outs.push(g.value(tr.output).clone());
        }
        Ok(Tensor4::stack_batch(&outs)?)
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats<T: Scalar>(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<(), ModelError> {
        let m = NORM_MOMENTUM;
        for (prefix, st) in stats {
            for (suffix, vals) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                let name = format!("{prefix}.norm.{suffix}");
                let p = self.params.get_mut(&name).ok_or(ModelError::Param(ParamError::Missing(name.clone())))?;
                for (r, v) in p.data.iter_mut().zip(vals) {
                    *r = ((1.0 - m) * *r as f64 + m * v.as_f64()) as f32;
                }
            }
        }
        Ok(())
    }
}

/// End-to-end gradient check of a model in double precision on an
/// `(n, in_channels, size, size)` input, probing `probes` coordinates across
/// the input and all learnable parameters.
pub fn gradcheck_model(model: &Model, n: usize, size: usize, probes: usize, seed: u64) -> Result<CheckReport, ModelError> {
    let cfg = model.config();
    model.check_input([n, cfg.in_channels, size, size])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::<f64>::from_fn([n, cfg.in_channels, size, size], |_| rng.gen_range(0.0..1.0));
    let target = Tensor4::<f64>::from_fn([n, 1, size, size], |_| rng.gen_range(0.0..1.0));
    let names: Vec<String> = model.params.learnable().map(|p| p.name.clone()).collect();
    let mut inputs = vec![x];
    inputs.extend(model.params.learnable().map(|p| p.tensor::<f64>()));
    let report = gradcheck::check(
        &format!("{}_end_to_end", cfg.arch),
        &inputs,
        gradcheck::STEP,
        Probes::Sample { count: probes, seed: seed ^ 0x9e37_79b9 },
        |g, v| {
            let vars: ParamVars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let tr = model.forward(g, v[0], &vars, Mode::Train).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::DimMismatch { op: "model", msg: other.to_string() },
            })?;
            let t = g.constant(target.clone());
            g.mse_loss(tr.output, t)
        },
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Task;

    #[test]
    fn conv1x1_count() {
        let mut sb = SpecBuilder { norm: NormKind::Batch, activation: Activation::Prelu, layers: Vec::new(), shapes: IndexMap::new() };
        sb.conv("c", 5, 5, 1);
        let n: usize = sb.shapes.values().map(|p| p.shape.iter().product::<usize>()).sum();
        assert_eq!(n, 25 + 5);
    }

    #[test]
    fn inception_count_closed_form() {
        for c in [1usize, 8, 16] {
            let (_, params) = build_inception_block(c, NormKind::Batch, Activation::Prelu, 0);
            // branches, plus gamma, beta and slope
            assert_eq!(params.learnable_count(), c * c * (1 + 9 + 25 + 49) + 4 * c + 3 * c);
        }
    }

    #[test]
    fn layer_table_shapes_chain() {
        for cfg in [ModelConfig::ibunet(Task::Rc), ModelConfig::baseline(Task::Drc)] {
            let m = Model::new(&cfg, 0).unwrap();
            let last = m.spec.layers.last().unwrap();
            assert_eq!(last.out_channels, 1);
            let per_layer: usize = layer_param_counts(&m.spec).iter().map(|(_, n)| n).sum();
            assert_eq!(per_layer, m.param_count());
        }
    }

    #[test]
    fn miniature_forward_shapes_and_range() {
        for cfg in [ModelConfig::ibunet(Task::Drc).with_base_width(4), ModelConfig::baseline(Task::Rc).with_base_width(4)] {
            let m = Model::new(&cfg, 3).unwrap();
            let x = Tensor4::<f32>::from_fn([2, cfg.in_channels, 32, 32], |k| ((k * 37) % 19) as f32 / 19.0);
            let mut g = Graph::new();
            let vars = m.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let tr = m.forward(&mut g, xv, &vars, Mode::Train).unwrap();
            assert_eq!(g.value(tr.output).dims, [2, 1, 32, 32]);
            assert!(g.value(tr.output).data.iter().all(|&v| v > 0.0 && v < 1.0));
            let side = 32 >> cfg.num_scales;
            assert_eq!(&g.value(tr.bottleneck).dims[2..], &[side, side]);
            let y1 = m.predict(&x).unwrap();
            let y2 = m.predict(&x).unwrap();
            assert_eq!(y1, y2);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::new(&ModelConfig::ibunet(Task::Rc).with_base_width(2), 0).unwrap();
        assert!(matches!(m.predict(&Tensor4::zeros([1, 3, 24, 24])), Err(ModelError::DimMismatch(_))));
        assert!(matches!(m.predict(&Tensor4::zeros([1, 9, 32, 32])), Err(ModelError::DimMismatch(_))));
    }

    #[test]
    fn running_stats_update() {
        let mut m = Model::new(&ModelConfig::ibunet(Task::Rc).with_base_width(2), 0).unwrap();
        let stats = vec![("enc0.0".to_string(), BatchStats { mean: vec![1.0f32, 1.0], var: vec![2.0, 2.0] })];
        m.update_running_stats(&stats).unwrap();
        let rm = &m.params.get("enc0.0.norm.running_mean").unwrap().data;
        let rv = &m.params.get("enc0.0.norm.running_var").unwrap().data;
        assert!((rm[0] - 0.1).abs() < 1e-7 && (rv[0] - 1.1).abs() < 1e-7);
    }
}
