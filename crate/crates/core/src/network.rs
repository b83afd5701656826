//! Attention U-Net.
//!
//! Encoder stages of double 3x3 conv + ReLU blocks separated by 2x2 max
//! pooling, a bottleneck block followed by dropout, and one decoder stage
//! per encoder stage. Each decoder stage upsamples with a 2x2 stride-2
//! transposed convolution, filters the matching encoder skip through an
//! attention gate driven by the upsampled feature, concatenates the two
//! and runs another double conv block. A 1x1 conv and a sigmoid produce
//! the probability map.
//!
//! Attention gate for skip `x` and gating signal `g` (same shape, `F`
//! channels, `F_int = F * attention_inter_ratio`):
//!
//! ```text
//! q     = relu(W_x * x + W_g * g + b)        W_x, W_g: 1x1 convs F -> F_int
//! alpha = sigmoid(psi * q + b_psi)           psi: 1x1 conv F_int -> 1
//! x'    = alpha (broadcast over channels) * x
//! ```

use std::collections::HashMap;

use rand::{Rng, SeedableRng};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub attention_inter_ratio: f64,
    pub dropout_p: f64,
    pub out_channels: usize,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            stage_channels: vec![64, 128],
            bottleneck_channels: 256,
            attention_inter_ratio: 0.5,
            dropout_p: 0.3,
            out_channels: 1,
            input_size: 128,
        }
    }
}

impl ModelConfig {
    /// Config with the given encoder widths; the bottleneck doubles the last one.
    pub fn with_stages(stage_channels: Vec<usize>) -> Self {
        let bottleneck_channels = 2 * stage_channels.last().copied().unwrap_or(0);
        Self {
            stage_channels,
            bottleneck_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channels", "in/out channels must be >= 1"));
        }
        let Some(&last) = self.stage_channels.last() else {
            return Err(Error::invalid("stage_channels", "need at least one stage"));
        };
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "stage_channels",
                format!("{:?} must be positive and strictly increasing", self.stage_channels),
            ));
        }
        if self.bottleneck_channels != 2 * last {
            return Err(Error::invalid(
                "bottleneck_channels",
                format!("{} must equal twice the last stage ({last})", self.bottleneck_channels),
            ));
        }
        if !(self.attention_inter_ratio > 0.0 && self.attention_inter_ratio <= 1.0) {
            return Err(Error::invalid("attention_inter_ratio", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p", "must lie in [0, 1)"));
        }
        self.check_size(self.input_size)
    }

    /// Spatial size must survive every pooling stage.
    pub fn check_size(&self, size: usize) -> Result<()> {
        let div = self.size_divisor();
        if size == 0 || !size.is_multiple_of(div) {
            return Err(Error::invalid(
                "input_size",
                format!("{size} is not a positive multiple of {div}"),
            ));
        }
        Ok(())
    }

    pub fn size_divisor(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn inter_channels(&self, features: usize) -> usize {
        ((features as f64 * self.attention_inter_ratio).round() as usize).max(1)
    }

    /// Recovers the architecture from the tensor shapes of a parameter set.
    pub fn infer(params: &ParameterSet) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::invalid("checkpoint", format!("missing parameter `{name}`")))
        };
        let mut stage_channels = Vec::new();
        let mut in_channels = 0;
        for stage in 1.. {
            let name = format!("enc{stage}.conv1.weight");
            if params.get(&name).is_none() {
                break;
            }
            let s = shape(&name)?;
            if stage == 1 {
                in_channels = s[1];
            }
            stage_channels.push(s[0]);
        }
        let bottleneck_channels = shape("bottleneck.conv1.weight")?[0];
        let head = shape("head.weight")?;
        let last = *stage_channels
            .last()
            .ok_or_else(|| Error::invalid("checkpoint", "no encoder stages found"))?;
        let inter = shape(&format!("gate{}.wx.weight", stage_channels.len()))?[0];
        let config = Self {
            in_channels,
            stage_channels,
            bottleneck_channels,
            attention_inter_ratio: inter as f64 / last as f64,
            out_channels: head[0],
            ..Self::default()
        };
        let expected = ParameterSet::zeros(&config)?;
        for (name, tensor) in expected.iter() {
            match params.get(name) {
                Some(t) if t.shape() == tensor.shape() => {}
                Some(t) => {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("`{name}` is {:?}, expected {:?}", t.shape(), tensor.shape()),
                    ))
                }
                None => return Err(Error::invalid("checkpoint", format!("missing parameter `{name}`"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!("{} parameters, architecture expects {}", params.len(), expected.len()),
            ));
        }
        Ok(config)
    }
}

/// One weighted layer of the network, used for construction and accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub bias: bool,
    /// Output grid is `input_size / scale` on each side.
    pub scale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

impl LayerSpec {
    fn conv(name: String, cin: usize, cout: usize, kernel: usize, bias: bool, scale: usize) -> Self {
        Self {
            name,
            kind: LayerKind::Conv,
            cin,
            cout,
            kernel,
            bias,
            scale,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv => [self.cout, self.cin, self.kernel, self.kernel],
            LayerKind::ConvTranspose => [self.cin, self.cout, self.kernel, self.kernel],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.cin * self.cout * self.kernel * self.kernel + if self.bias { self.cout } else { 0 }
    }

    /// Multiply-adds over the output grid: every output element costs
    /// `cin * kernel^2`, transposed convolutions included.
    pub fn macs(&self, input_size: usize) -> u64 {
        let side = (input_size / self.scale) as u64;
        (self.cin * self.cout * self.kernel * self.kernel) as u64 * side * side
    }

    /// Multiply-adds actually performed. A stride-2 2x2 transposed
    /// convolution touches each output element with one tap per input
    /// channel, a quarter of [`LayerSpec::macs`].
    pub fn executed_macs(&self, input_size: usize) -> u64 {
        match self.kind {
            LayerKind::Conv => self.macs(input_size),
            LayerKind::ConvTranspose => self.macs(input_size) / 4,
        }
    }
}

fn double_conv_specs(prefix: &str, cin: usize, cout: usize, scale: usize) -> [LayerSpec; 2] {
    [
        LayerSpec::conv(format!("{prefix}.conv1"), cin, cout, 3, true, scale),
        LayerSpec::conv(format!("{prefix}.conv2"), cout, cout, 3, true, scale),
    ]
}

/// Every weighted layer in forward order.
pub fn layer_plan(config: &ModelConfig) -> Vec<LayerSpec> {
    let stages = &config.stage_channels;
    let mut plan = Vec::new();
    let mut cin = config.in_channels;
    for (i, &c) in stages.iter().enumerate() {
        plan.extend(double_conv_specs(&format!("enc{}", i + 1), cin, c, 1 << i));
        cin = c;
    }
    let deepest = 1 << stages.len();
    plan.extend(double_conv_specs(
        "bottleneck",
        cin,
        config.bottleneck_channels,
        deepest,
    ));
    let mut below = config.bottleneck_channels;
    for (i, &f) in stages.iter().enumerate().rev() {
        let stage = i + 1;
        let scale = 1 << i;
        plan.push(LayerSpec {
            name: format!("up{stage}"),
            kind: LayerKind::ConvTranspose,
            cin: below,
            cout: f,
            kernel: 2,
            bias: true,
            scale,
        });
        let inter = config.inter_channels(f);
        plan.push(LayerSpec::conv(format!("gate{stage}.wx"), f, inter, 1, false, scale));
        plan.push(LayerSpec::conv(format!("gate{stage}.wg"), f, inter, 1, true, scale));
        plan.push(LayerSpec::conv(format!("gate{stage}.psi"), inter, 1, 1, true, scale));
        plan.extend(double_conv_specs(&format!("dec{stage}"), 2 * f, f, scale));
        below = f;
    }
    plan.push(LayerSpec::conv("head".into(), below, config.out_channels, 1, true, 1));
    plan
}

/// Trainable scalar count of the network built from `config`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    layer_plan(config).iter().map(LayerSpec::parameter_count).sum()
}

/// Multiply-add count of one forward pass at `config.input_size`, batch 1,
/// summed over every conv, transposed conv and gate projection.
pub fn count_macs(config: &ModelConfig) -> Result<u64> {
    config.check_size(config.input_size)?;
    Ok(layer_plan(config).iter().map(|l| l.macs(config.input_size)).sum())
}

/// Like [`count_macs`] but counting only the taps the kernels execute.
pub fn count_executed_macs(config: &ModelConfig) -> Result<u64> {
    config.check_size(config.input_size)?;
    Ok(layer_plan(config)
        .iter()
        .map(|l| l.executed_macs(config.input_size))
        .sum())
}

/// Named trainable tensors in canonical (forward) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("name", format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All-zero parameters with the shapes of `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut set = Self::new();
        for layer in layer_plan(config) {
            set.insert(format!("{}.weight", layer.name), Tensor::zeros(layer.weight_shape()))?;
            if layer.bias {
                set.insert(format!("{}.bias", layer.name), Tensor::zeros([layer.cout]))?;
            }
        }
        Ok(set)
    }

    /// He-normal weights (fan-in per output element) and zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut set = Self::new();
        for layer in layer_plan(config) {
            let fan_in = match layer.kind {
                LayerKind::Conv => layer.cin * layer.kernel * layer.kernel,
                LayerKind::ConvTranspose => layer.cin,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            set.insert(
                format!("{}.weight", layer.name),
                Tensor::randn(layer.weight_shape(), std, rng),
            )?;
            if layer.bias {
                set.insert(format!("{}.bias", layer.name), Tensor::zeros([layer.cout]))?;
            }
        }
        Ok(set)
    }
}

/// Parameters registered as leaves of one [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(graph: &mut Graph, params: &ParameterSet) -> Self {
        let vars = params.iter().map(|(_, t)| graph.param(t.clone())).collect();
        Self {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid("params", format!("missing parameter `{name}`")))
    }

    /// Vars in the same order as the [`ParameterSet`] they were bound from.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects the gradient of every parameter, zeros where none arrived.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars.iter().map(|&v| graph.grad_tensor(v)).collect()
    }
}

fn conv_layer(graph: &mut Graph, x: Var, params: &BoundParams, name: &str, padding: usize) -> Result<Var> {
    let w = params.var(&format!("{name}.weight"))?;
    let b = params.var(&format!("{name}.bias"))?;
    graph.conv2d(x, w, b, 1, padding)
}

/// Two 3x3 conv (padding 1) + ReLU layers: `cin -> cout -> cout`.
pub fn double_conv_block(graph: &mut Graph, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let h = conv_layer(graph, x, params, &format!("{prefix}.conv1"), 1)?;
    let h = graph.relu(h);
    let h = conv_layer(graph, h, params, &format!("{prefix}.conv2"), 1)?;
    Ok(graph.relu(h))
}

/// Returns `(alpha * x, alpha)` for skip `x` and gating signal `g`.
pub fn attention_gate(graph: &mut Graph, x: Var, g: Var, params: &BoundParams, prefix: &str) -> Result<(Var, Var)> {
    let (xs, gs) = (graph.value(x).shape(), graph.value(g).shape());
    if xs != gs {
        return Err(Error::shape(
            "attention_gate",
            format!("skip {xs:?} and gating signal {gs:?} differ"),
        ));
    }
    let wx = params.var(&format!("{prefix}.wx.weight"))?;
    let inter = graph.value(wx).shape()[0];
    let no_bias = graph.constant(Tensor::zeros([inter]));
    let theta = graph.conv2d(x, wx, no_bias, 1, 0)?;
    let phi = conv_layer(graph, g, params, &format!("{prefix}.wg"), 0)?;
    let fused = graph.add(theta, phi)?;
    let fused = graph.relu(fused);
    let logits = conv_layer(graph, fused, params, &format!("{prefix}.psi"), 0)?;
    let alpha = graph.sigmoid(logits);
    let gated = graph.mul(x, alpha)?;
    Ok((gated, alpha))
}

/// The network: architecture plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionUNet {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl AttentionUNet {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ParameterSet::init(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Wraps existing weights after checking them against `config`.
    pub fn from_params(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let inferred = ModelConfig::infer(&params)?;
        if inferred.stage_channels != config.stage_channels
            || inferred.in_channels != config.in_channels
            || inferred.out_channels != config.out_channels
            || inferred.bottleneck_channels != config.bottleneck_channels
        {
            return Err(Error::shape(
                "model",
                format!(
                    "parameters describe stages {:?}, config asks for {:?}",
                    inferred.stage_channels, config.stage_channels
                ),
            ));
        }
        Ok(Self { config, params })
    }

    /// Records the forward pass of `x` (`[N, in_channels, S, S]`) on `graph`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph,
        params: &BoundParams,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let (_, c, h, w) = graph.value(x).dims4("forward")?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {c} channels, model expects {}", self.config.in_channels),
            ));
        }
        if h != w {
            return Err(Error::shape("forward", format!("input {h}x{w} is not square")));
        }
        self.config.check_size(h)?;

        let stages = self.config.stage_channels.len();
        let mut skips = Vec::with_capacity(stages);
        let mut h = x;
        for stage in 1..=stages {
            let feat = double_conv_block(graph, h, params, &format!("enc{stage}"))?;
            skips.push(feat);
            h = graph.maxpool2d(feat)?;
        }
        h = double_conv_block(graph, h, params, "bottleneck")?;
        h = graph.dropout(h, self.config.dropout_p, training, rng)?;
        for stage in (1..=stages).rev() {
            let w = params.var(&format!("up{stage}.weight"))?;
            let b = params.var(&format!("up{stage}.bias"))?;
            let up = graph.conv_transpose2d(h, w, b)?;
            let (gated, _) = attention_gate(graph, skips[stage - 1], up, params, &format!("gate{stage}"))?;
            let merged = graph.concat_channels(gated, up)?;
            h = double_conv_block(graph, merged, params, &format!("dec{stage}"))?;
        }
        let logits = conv_layer(graph, h, params, "head", 0)?;
        Ok(graph.sigmoid(logits))
    }

    /// Inference forward pass (dropout off) returning the probability map.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let params = BoundParams::bind(&mut graph, &self.params);
        let x = graph.constant(images.clone());
        // dropout is off, so the generator is never drawn from
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut graph, &params, x, false, &mut rng)?;
        Ok(graph.value(out).clone())
    }
}
