//! ResNet-style classifier sized for desk-scale experiments.
//!
//! Layout: 3×3 stem conv → batchnorm → relu, then one stage per entry of
//! `widths`, each made of `blocks_per_stage` basic residual blocks
//! (conv-bn-relu-conv-bn + shortcut, relu). Every stage after the first
//! halves the resolution in its first block, where a strided 1×1 conv
//! projects the shortcut. Global average pooling feeds a linear head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, SCHEMA_VERSION};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, NormConfig, NormMode, RunningStats};
use crate::error::{Error, Result};
use crate::seed::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub classes: usize,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default)]
    pub norm: NormConfig,
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 64]
}

fn default_blocks() -> usize {
    2
}

impl ModelConfig {
    pub fn new(resolution: usize, classes: usize) -> Self {
        ModelConfig {
            resolution,
            classes,
            widths: default_widths(),
            blocks_per_stage: default_blocks(),
            norm: NormConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("stage widths must be positive, got {:?}", self.widths)));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        let factor = 1usize << (self.widths.len() - 1);
        if self.resolution == 0 || self.resolution % factor.max(4) != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of {}",
                self.resolution,
                factor.max(4)
            )));
        }
        if !(self.norm.eps > 0.0) || !(0.0..=1.0).contains(&self.norm.momentum) {
            return Err(Error::Config(format!("invalid normalization settings {:?}", self.norm)));
        }
        Ok(())
    }

    /// Parameter names and shapes in declared (serialization) order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let w0 = self.widths[0];
        layout.push(("stem.conv.weight".to_string(), vec![w0, 3, 3, 3]));
        layout.push(("stem.bn.gamma".to_string(), vec![w0]));
        layout.push(("stem.bn.beta".to_string(), vec![w0]));
        let mut cin = w0;
        for (s, &cout) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let p = format!("stage{s}.block{b}");
                let block_in = if b == 0 { cin } else { cout };
                layout.push((format!("{p}.conv1.weight"), vec![cout, block_in, 3, 3]));
                layout.push((format!("{p}.bn1.gamma"), vec![cout]));
                layout.push((format!("{p}.bn1.beta"), vec![cout]));
                layout.push((format!("{p}.conv2.weight"), vec![cout, cout, 3, 3]));
                layout.push((format!("{p}.bn2.gamma"), vec![cout]));
                layout.push((format!("{p}.bn2.beta"), vec![cout]));
                if self.block_projects(s, b, block_in, cout) {
                    layout.push((format!("{p}.shortcut.weight"), vec![cout, block_in, 1, 1]));
                    layout.push((format!("{p}.shortcut.bias"), vec![cout]));
                }
            }
            cin = cout;
        }
        layout.push(("fc.weight".to_string(), vec![self.classes, cin]));
        layout.push(("fc.bias".to_string(), vec![self.classes]));
        layout
    }

    /// Batchnorm layers (name, channels) in declared order.
    pub fn norm_layout(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem.bn".to_string(), self.widths[0])];
        for (s, &cout) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                out.push((format!("stage{s}.block{b}.bn1"), cout));
                out.push((format!("stage{s}.block{b}.bn2"), cout));
            }
        }
        out
    }

    fn block_stride(&self, stage: usize, block: usize) -> usize {
        if stage > 0 && block == 0 {
            2
        } else {
            1
        }
    }

    fn block_projects(&self, stage: usize, block: usize, cin: usize, cout: usize) -> bool {
        self.block_stride(stage, block) != 1 || cin != cout
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Node handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Parameter leaves in declared order.
    pub params: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResNetLite {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    running: Vec<RunningStats>,
}

enum Stats<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
}

impl ResNetLite {
    /// He-normal (fan-in) weights, zero biases, unit gamma, zero beta.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.parameter_layout() {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..numel).map(|_| normal.sample(&mut rng) as f32).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; numel]
            } else {
                vec![0.0; numel]
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let running = config.norm_layout().iter().map(|(_, c)| RunningStats::new(*c)).collect();
        Ok(ResNetLite {
            config,
            names,
            params,
            running,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor>, running: Vec<RunningStats>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() || layout.iter().zip(&params).any(|((_, s), t)| s.as_slice() != t.shape()) {
            return Err(Error::Checkpoint("parameters do not match the configured architecture".into()));
        }
        let norms = config.norm_layout();
        if norms.len() != running.len() || norms.iter().zip(&running).any(|((_, c), r)| *c != r.channels() || r.var.len() != *c) {
            return Err(Error::Checkpoint("running statistics do not match the architecture".into()));
        }
        Ok(ResNetLite {
            config,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Drops the gradient buffers entirely.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.clear_grad();
        }
    }

    /// Adds the gradients collected on a pass's parameter leaves into the
    /// model's own gradient buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph, pass: &ForwardPass) {
        for (param, &id) in self.params.iter_mut().zip(&pass.params) {
            if let Some(g) = graph.grad(id) {
                param.accumulate_grad(g);
            }
        }
    }

    /// Forward pass. Train mode normalizes with batch statistics and updates
    /// the running statistics; parameter leaves then require gradients.
    pub fn forward(&mut self, graph: &mut Graph, input: NodeId, mode: Mode) -> Result<ForwardPass> {
        match mode {
            Mode::Train => {
                let (cfg, params, running) = (&self.config, &self.params, &mut self.running);
                build(cfg, params, Stats::Train(running), graph, input, true)
            }
            Mode::Eval => self.forward_eval(graph, input, true),
        }
    }

    /// Eval-mode pass; a pure function of parameters and input.
    pub fn forward_eval(&self, graph: &mut Graph, input: NodeId, param_grads: bool) -> Result<ForwardPass> {
        build(&self.config, &self.params, Stats::Eval(&self.running), graph, input, param_grads)
    }

    /// Eval-mode logits `[N, K]` for a batch `[N, 3, H, W]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(batch.clone(), false);
        let pass = self.forward_eval(&mut g, x, false)?;
        Ok(g.value(pass.logits).clone())
    }
}

fn build(
    cfg: &ModelConfig,
    params: &[Tensor],
    mut stats: Stats<'_>,
    g: &mut Graph,
    input: NodeId,
    param_grads: bool,
) -> Result<ForwardPass> {
    let (_, c, h, w) = g.value(input).dims4("forward")?;
    if c != 3 {
        return Err(Error::shape("forward", "channels", format!("expected 3 input channels, got {c}")));
    }
    if h != cfg.resolution || w != cfg.resolution {
        return Err(Error::shape(
            "forward",
            "resolution",
            format!("model expects {0}x{0} inputs, got {h}x{w}", cfg.resolution),
        ));
    }
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), param_grads)).collect();
    let mut next_param = ids.iter().copied();
    let mut take = || next_param.next().expect("layout covers every parameter");
    let mut norm_index = 0;
    let mut norm = |g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId| -> Result<NodeId> {
        let mode = match &mut stats {
            Stats::Train(s) => NormMode::Train(&mut s[norm_index]),
            Stats::Eval(s) => NormMode::Eval(&s[norm_index]),
        };
        norm_index += 1;
        g.batchnorm2d(x, gamma, beta, mode, cfg.norm)
    };

    let (stem_w, stem_g, stem_b) = (take(), take(), take());
    let mut x = g.conv2d(input, stem_w, None, 1, 1)?;
    x = norm(g, x, stem_g, stem_b)?;
    x = g.relu(x)?;

    let mut cin = cfg.widths[0];
    for (s, &cout) in cfg.widths.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let block_in = if b == 0 { cin } else { cout };
            let stride = cfg.block_stride(s, b);
            let (w1, g1, b1, w2, g2, b2) = (take(), take(), take(), take(), take(), take());
            let mut h = g.conv2d(x, w1, None, stride, 1)?;
            h = norm(g, h, g1, b1)?;
            h = g.relu(h)?;
            h = g.conv2d(h, w2, None, 1, 1)?;
            h = norm(g, h, g2, b2)?;
            let shortcut = if cfg.block_projects(s, b, block_in, cout) {
                let (sw, sb) = (take(), take());
                g.conv2d(x, sw, Some(sb), stride, 0)?
            } else {
                x
            };
            let sum = g.add(h, shortcut)?;
            x = g.relu(sum)?;
        }
        cin = cout;
    }
    let pooled = g.global_avg_pool(x)?;
    let (fc_w, fc_b) = (take(), take());
    let logits = g.linear(pooled, fc_w, Some(fc_b))?;
    Ok(ForwardPass { logits, params: ids })
}

/// A frozen classifier whose class logits can be differentiated with
/// respect to the input image.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Expected input as `(channels, height, width)`.
    fn input_dims(&self) -> (usize, usize, usize);

    /// Appends an eval-mode forward pass and returns the `[N, K]` logits node.
    fn logits_node(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId>;
}

impl Classifier for ResNetLite {
    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        (3, self.config.resolution, self.config.resolution)
    }

    fn logits_node(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        Ok(self.forward_eval(graph, input, false)?.logits)
    }
}

/// Affine classifier `logits = W · vec(x) + b` over flattened `[C,H,W]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub dims: (usize, usize, usize),
    /// `[K, C·H·W]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn new(dims: (usize, usize, usize), weight: Tensor, bias: Tensor) -> Result<Self> {
        let features = dims.0 * dims.1 * dims.2;
        let (k, f) = weight.dims2("LinearClassifier")?;
        if f != features || bias.shape() != [k] {
            return Err(Error::shape(
                "LinearClassifier",
                "weight",
                format!("weight {:?} / bias {:?} do not fit {features} features", weight.shape(), bias.shape()),
            ));
        }
        Ok(LinearClassifier { dims, weight, bias })
    }
}

impl Classifier for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn logits_node(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        let n = graph.value(input).shape()[0];
        let (c, h, w) = self.dims;
        let flat = graph.reshape(input, [n, c * h * w])?;
        let weight = graph.leaf(self.weight.clone(), false);
        let bias = graph.leaf(self.bias.clone(), false);
        graph.linear(flat, weight, Some(bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            resolution: 8,
            classes: 3,
            widths: vec![4, 6, 8],
            blocks_per_stage: 1,
            norm: NormConfig::default(),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(64, 8).validate().is_ok());
        assert!(ModelConfig::new(62, 8).validate().is_err());
        assert!(ModelConfig { widths: vec![16, 0, 64], ..ModelConfig::new(64, 8) }.validate().is_err());
        assert!(ModelConfig::new(64, 1).validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ResNetLite::init(small(), 3).unwrap();
        let b = ResNetLite::init(small(), 3).unwrap();
        let c = ResNetLite::init(small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        assert_eq!(a.param("fc.bias").unwrap().data(), &[0.0; 3]);
        assert_eq!(a.param("stage0.block0.bn1.gamma").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let model = ResNetLite::init(small(), 1).unwrap();
        let image: Vec<f32> = (0..3 * 64).map(|i| (i as f32 * 0.17).sin() * 0.5 + 0.5).collect();
        let batch = Tensor::new([3, 3, 8, 8], image.repeat(3)).unwrap();
        let logits = model.predict(&batch).unwrap();
        let rows: Vec<&[f32]> = logits.data().chunks(3).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
        assert_eq!(model.predict(&batch).unwrap(), logits);
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        let model = ResNetLite::init(ModelConfig::new(64, 8), 0).unwrap();
        let logits = model.predict(&Tensor::zeros([1, 3, 64, 64])).unwrap();
        assert_eq!(logits.shape(), &[1, 8]);
        assert!(logits.all_finite());
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let model = ResNetLite::init(small(), 0).unwrap();
        let err = model.predict(&Tensor::zeros([1, 3, 12, 12])).unwrap_err().to_string();
        assert!(err.contains("resolution"), "{err}");
    }

    #[test]
    fn train_forward_updates_running_stats_only() {
        let mut model = ResNetLite::init(small(), 0).unwrap();
        let before = model.clone();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([2, 3, 8, 8], |i| (i % 7) as f32 / 7.0), false);
        model.forward(&mut g, x, Mode::Train).unwrap();
        assert_eq!(model.params(), before.params());
        assert_ne!(model.running_stats(), before.running_stats());
    }

    #[test]
    fn linear_classifier_shape_checks() {
        let w = Tensor::zeros([2, 12]);
        assert!(LinearClassifier::new((3, 2, 2), w.clone(), Tensor::zeros([2])).is_ok());
        assert!(LinearClassifier::new((3, 2, 3), w, Tensor::zeros([2])).is_err());
    }
}
