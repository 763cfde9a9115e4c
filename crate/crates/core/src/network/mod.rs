//! The 3D U-Net: configuration, layer plan, seeded construction, forward pass
//! and parameter accounting.
//!
//! Every convolutional block is conv → instance norm → ReLU. The encoder
//! doubles the width after each 2x2x2 max pooling. Each decoder stage first
//! halves the width with a 1x1x1 block, doubles the spatial size with
//! nearest-neighbour interpolation, concatenates the matching encoder output
//! and runs the stage's conv blocks. A final 1x1x1 conv and a channel softmax
//! produce class probabilities.
//!
//! With the default configuration (width 32, two blocks per stage, 3x3x3
//! kernels in stages 1-4 and 1x1x1 in stages 5-6) the network has
//! 14,034,403 parameters; with 3x3x3 kernels everywhere it has 85,599,715.

mod ops;
mod weights;

pub use ops::{
    conv3d, instance_norm, max_pool_2x, nearest_upsample_2x, relu_inplace, softmax_channels,
    INSTANCE_NORM_EPS,
};
pub use weights::{load_weights, save_weights, WEIGHTS_MAGIC};

use std::fmt;

use rand::distr::{Distribution, Uniform};

use crate::error::{arg_err, Result};
use crate::tensor::Tensor4D;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub num_stages: usize,
    /// Cubic kernel edge per stage; each entry is 1 or 3.
    pub kernel_plan: Vec<usize>,
    pub convs_per_stage: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::task1()
    }
}

impl NetworkConfig {
    /// Single-channel input (one MRI scan).
    pub fn task1() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            base_width: 32,
            num_stages: 6,
            kernel_plan: vec![3, 3, 3, 3, 1, 1],
            convs_per_stage: 2,
        }
    }

    /// Four-channel input: mid-RT scan, registered pre-RT scan, GTVp and GTVn masks.
    pub fn task2() -> Self {
        Self { in_channels: 4, ..Self::task1() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return arg_err(format!("need at least 2 stages, got {}", self.num_stages));
        }
        if self.kernel_plan.len() != self.num_stages {
            return arg_err(format!(
                "kernel plan has {} entries for {} stages",
                self.kernel_plan.len(),
                self.num_stages
            ));
        }
        if let Some(k) = self.kernel_plan.iter().find(|&&k| k != 1 && k != 3) {
            return arg_err(format!("kernel sizes must be 1 or 3, got {k}"));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.base_width == 0 || self.convs_per_stage == 0 {
            return arg_err("channel counts, width and convs per stage must be positive");
        }
        Ok(())
    }

    /// Feature maps at `stage` (0-based): `base_width * 2^stage`.
    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Spatial dims must be multiples of this for the forward pass.
    pub fn divisor(&self) -> usize {
        1 << (self.num_stages - 1)
    }

    /// Ordered layer shapes, exactly as stored in a [`Model`] and a weight file.
    pub fn layer_plan(&self) -> Vec<LayerSpec> {
        let mut plan = Vec::new();
        let block = |plan: &mut Vec<LayerSpec>, role, k: usize, cin, cout| {
            plan.push(LayerSpec::new(LayerKind::Conv, role, [k; 3], cin, cout));
            plan.push(LayerSpec::new(LayerKind::InstanceNorm, role, [1; 3], cout, cout));
            plan.push(LayerSpec::new(LayerKind::Relu, role, [1; 3], cout, cout));
        };
        let mut c = self.in_channels;
        for s in 0..self.num_stages {
            let role = LayerRole::Encoder(s);
            if s > 0 {
                plan.push(LayerSpec::new(LayerKind::MaxPool, role, [2; 3], c, c));
            }
            for b in 0..self.convs_per_stage {
                let cin = if b == 0 { c } else { self.width(s) };
                block(&mut plan, role, self.kernel_plan[s], cin, self.width(s));
            }
            c = self.width(s);
        }
        for s in (0..self.num_stages - 1).rev() {
            let role = LayerRole::Decoder(s);
            let w = self.width(s);
            block(&mut plan, role, 1, self.width(s + 1), w);
            plan.push(LayerSpec::new(LayerKind::Upsample, role, [2; 3], w, w));
            for b in 0..self.convs_per_stage {
                let cin = if b == 0 { 2 * w } else { w };
                block(&mut plan, role, self.kernel_plan[s], cin, w);
            }
        }
        let k = self.num_classes;
        plan.push(LayerSpec::new(LayerKind::Conv, LayerRole::Head, [1; 3], self.width(0), k));
        plan.push(LayerSpec::new(LayerKind::Softmax, LayerRole::Head, [1; 3], k, k));
        plan
    }

    /// Parameter total of the layer plan, without allocating any weights.
    pub fn parameter_count(&self) -> usize {
        self.layer_plan().iter().map(LayerSpec::param_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    InstanceNorm,
    Relu,
    MaxPool,
    Upsample,
    Softmax,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            Self::Conv => 0,
            Self::InstanceNorm => 1,
            Self::Relu => 2,
            Self::MaxPool => 3,
            Self::Upsample => 4,
            Self::Softmax => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Self::Conv,
            1 => Self::InstanceNorm,
            2 => Self::Relu,
            3 => Self::MaxPool,
            4 => Self::Upsample,
            5 => Self::Softmax,
            _ => return None,
        })
    }
}

/// Where a layer sits in the network (stages are 0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Encoder(usize),
    Decoder(usize),
    Head,
}

/// Shape of one layer without its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub role: LayerRole,
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(kind: LayerKind, role: LayerRole, kernel: [usize; 3], cin: usize, cout: usize) -> Self {
        Self { kind, role, kernel, in_channels: cin, out_channels: cout }
    }

    /// (weight, bias) element counts. Instance norm stores gamma and beta.
    pub fn param_shape(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv => {
                let k: usize = self.kernel.iter().product();
                (k * self.in_channels * self.out_channels, self.out_channels)
            }
            LayerKind::InstanceNorm => (self.out_channels, self.out_channels),
            _ => (0, 0),
        }
    }

    pub fn param_count(&self) -> usize {
        let (w, b) = self.param_shape();
        w + b
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            LayerRole::Encoder(s) => format!("enc{}", s + 1),
            LayerRole::Decoder(s) => format!("dec{}", s + 1),
            LayerRole::Head => "head".to_string(),
        };
        let [kx, ky, kz] = self.kernel;
        write!(
            f,
            "{role:<5} {:<12} {kx}x{ky}x{kz}  {:>5} -> {:<5}",
            format!("{:?}", self.kind),
            self.in_channels,
            self.out_channels
        )
    }
}

/// A layer's shape plus its parameters (conv: weights/bias; norm: gamma/beta).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Encoder stage whose output is concatenated into a decoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipLink {
    pub encoder_stage: usize,
    pub decoder_stage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    layers: Vec<Layer>,
    skip_plan: Vec<SkipLink>,
}

fn skip_plan(config: &NetworkConfig) -> Vec<SkipLink> {
    (0..config.num_stages - 1)
        .map(|s| SkipLink { encoder_stage: s, decoder_stage: s })
        .collect()
}

/// Builds the network with weights drawn from a generator seeded by `init_seed`.
///
/// Conv weights are uniform in `±sqrt(6 / fan_in)`; conv biases and norm
/// shifts start at 0 and norm scales at 1.
pub fn build_unet(config: &NetworkConfig, init_seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = crate::seeded_rng(init_seed);
    let layers = config
        .layer_plan()
        .into_iter()
        .map(|spec| {
            let (nw, nb) = spec.param_shape();
            let (weight, bias) = match spec.kind {
                LayerKind::Conv => {
                    let fan_in = (nw / spec.out_channels) as f32;
                    let bound = (6.0 / fan_in).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    ((0..nw).map(|_| dist.sample(&mut rng)).collect(), vec![0.0; nb])
                }
                LayerKind::InstanceNorm => (vec![1.0; nw], vec![0.0; nb]),
                _ => (Vec::new(), Vec::new()),
            };
            Layer { spec, weight, bias }
        })
        .collect();
    Ok(Model { skip_plan: skip_plan(config), config: config.clone(), layers })
}

/// Total weight and bias elements, including instance-norm affine parameters.
pub fn count_parameters(model: &Model) -> usize {
    model.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
}

impl Model {
    /// Assembles a model from explicit layers, checking them against the config's plan.
    pub fn from_layers(config: &NetworkConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let plan = config.layer_plan();
        if plan.len() != layers.len() {
            return arg_err(format!("expected {} layers, got {}", plan.len(), layers.len()));
        }
        for (i, (spec, layer)) in plan.iter().zip(&layers).enumerate() {
            let (nw, nb) = spec.param_shape();
            if layer.spec != *spec || layer.weight.len() != nw || layer.bias.len() != nb {
                return arg_err(format!("layer {i} does not match the plan entry `{spec}`"));
            }
        }
        Ok(Self { skip_plan: skip_plan(config), config: config.clone(), layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn skip_plan(&self) -> &[SkipLink] {
        &self.skip_plan
    }

    /// Runs the network; output is `(num_classes, X, Y, Z)` probabilities.
    pub fn forward(&self, input: &Tensor4D) -> Result<Tensor4D> {
        forward(self, input)
    }
}

struct Cursor<'a> {
    layers: std::slice::Iter<'a, Layer>,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, kind: LayerKind) -> &'a Layer {
        let layer = self.layers.next().expect("layer list follows the plan");
        debug_assert_eq!(layer.spec.kind, kind);
        layer
    }

    fn conv_block(&mut self, x: &Tensor4D) -> Result<Tensor4D> {
        let conv = self.next(LayerKind::Conv);
        let y = conv3d(x, &conv.weight, &conv.bias, conv.spec.kernel)?;
        let norm = self.next(LayerKind::InstanceNorm);
        let mut y = instance_norm(&y, &norm.weight, &norm.bias, INSTANCE_NORM_EPS)?;
        self.next(LayerKind::Relu);
        relu_inplace(&mut y);
        Ok(y)
    }
}

/// U-Net forward pass. Spatial dims must be divisible by `2^(num_stages - 1)`.
pub fn forward(model: &Model, input: &Tensor4D) -> Result<Tensor4D> {
    let cfg = &model.config;
    if input.channels() != cfg.in_channels {
        return arg_err(format!(
            "network expects {} input channels, got {}",
            cfg.in_channels,
            input.channels()
        ));
    }
    let div = cfg.divisor();
    if input.dims().iter().any(|d| d % div != 0) {
        return arg_err(format!(
            "input spatial dims {:?} must each be divisible by {div} (2^(stages - 1))",
            input.dims()
        ));
    }
    let mut cur = Cursor { layers: model.layers.iter() };
    let mut skips: Vec<Tensor4D> = Vec::with_capacity(cfg.num_stages - 1);
    let mut x = input.clone();
    for s in 0..cfg.num_stages {
        if s > 0 {
            cur.next(LayerKind::MaxPool);
            x = max_pool_2x(&x)?;
        }
        for _ in 0..cfg.convs_per_stage {
            x = cur.conv_block(&x)?;
        }
        if s + 1 < cfg.num_stages {
            skips.push(x.clone());
        }
    }
    for s in (0..cfg.num_stages - 1).rev() {
        x = cur.conv_block(&x)?;
        cur.next(LayerKind::Upsample);
        x = nearest_upsample_2x(&x);
        let skip = skips.pop().expect("one skip per decoder stage");
        debug_assert_eq!(model.skip_plan[s].encoder_stage, s);
        x = skip.concat_channels(&x)?;
        for _ in 0..cfg.convs_per_stage {
            x = cur.conv_block(&x)?;
        }
    }
    let head = cur.next(LayerKind::Conv);
    let logits = conv3d(&x, &head.weight, &head.bias, head.spec.kernel)?;
    cur.next(LayerKind::Softmax);
    Ok(softmax_channels(&logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            num_classes: 3,
            base_width: 2,
            num_stages: 2,
            kernel_plan: vec![3, 3],
            convs_per_stage: 2,
        }
    }

    #[test]
    fn closed_form_layer_counts() {
        let conv = LayerSpec::new(LayerKind::Conv, LayerRole::Head, [3; 3], 1, 32);
        assert_eq!(conv.param_count(), 896);
        let conv = LayerSpec::new(LayerKind::Conv, LayerRole::Head, [1; 3], 512, 512);
        assert_eq!(conv.param_count(), 262_656);
    }

    #[test]
    fn default_model_counts() {
        let model = build_unet(&NetworkConfig::task1(), 0).unwrap();
        assert_eq!(count_parameters(&model), NetworkConfig::task1().parameter_count());
        assert_eq!(count_parameters(&model), 14_034_403);
        assert_eq!(model.skip_plan().len(), 5);
        let all3 = NetworkConfig { kernel_plan: vec![3; 6], ..NetworkConfig::task1() };
        assert_eq!(all3.parameter_count(), 85_599_715);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_unet(&toy_config(), 11).unwrap();
        let b = build_unet(&toy_config(), 11).unwrap();
        let c = build_unet(&toy_config(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.kernel_plan = vec![3, 5];
        assert!(build_unet(&c, 0).is_err());
        let mut c = toy_config();
        c.num_stages = 1;
        c.kernel_plan = vec![3];
        assert!(build_unet(&c, 0).is_err());
        let mut c = toy_config();
        c.kernel_plan = vec![3];
        assert!(build_unet(&c, 0).is_err());
    }

    #[test]
    fn zero_input_gives_uniform_probabilities() {
        let model = build_unet(&toy_config(), 3).unwrap();
        let out = model.forward(&Tensor4D::zeros(1, [4, 4, 4])).unwrap();
        assert!(out.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn forward_checks_shape() {
        let model = build_unet(&toy_config(), 3).unwrap();
        let err = model.forward(&Tensor4D::zeros(1, [4, 3, 4])).unwrap_err();
        assert!(err.to_string().contains("divisible by 2"));
        assert!(model.forward(&Tensor4D::zeros(2, [4, 4, 4])).is_err());
    }

    #[test]
    fn task2_first_layer_takes_four_channels() {
        let plan = NetworkConfig::task2().layer_plan();
        assert_eq!(plan[0].in_channels, 4);
        assert_eq!(NetworkConfig::task2().parameter_count(), 14_034_403 + 3 * 27 * 32);
    }

    #[test]
    fn from_layers_rejects_foreign_layers() {
        let model = build_unet(&toy_config(), 1).unwrap();
        let mut layers = model.layers().to_vec();
        layers[0].weight.pop();
        assert!(Model::from_layers(&toy_config(), layers).is_err());
    }
}
